//! Synthetic moving-square videos whose class is the direction of motion.
//!
//! The moving coordinate starts uniformly among positions that keep the
//! square in frame for the whole clip; the other coordinate is drawn from
//! the distribution the moving coordinate has in a randomly chosen frame.
//! A single frame therefore carries no information about the class, and a
//! clip played backwards is a sample of the opposite class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};
use crate::tokenizer::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    pub fn label(self) -> usize {
        self as usize
    }

    pub fn from_label(label: usize) -> Option<Direction> {
        Self::ALL.get(label).copied()
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }

    fn horizontal(self) -> bool {
        matches!(self, Direction::Left | Direction::Right)
    }

    fn sign(self) -> isize {
        match self {
            Direction::Right | Direction::Down => 1,
            Direction::Left | Direction::Up => -1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_train: usize,
    pub num_test: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Side of the bright square in pixels.
    pub square: usize,
    /// Pixels per frame.
    pub speed: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_train: 2000,
            num_test: 400,
            frames: 8,
            height: 32,
            width: 32,
            square: 6,
            speed: 2,
            noise: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub clip: VideoClip,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub const NUM_CLASSES: usize = 4;

const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        self.check_fit(self.frames, self.height, self.width)
    }

    fn check_fit(&self, frames: usize, height: usize, width: usize) -> Result<()> {
        if self.speed == 0 {
            return Err(Error::Config(
                "dataset speed must be at least 1 pixel per frame, otherwise directions are indistinguishable"
                    .into(),
            ));
        }
        if frames < 2 || self.square == 0 {
            return Err(Error::Config("dataset needs at least 2 frames and a non-empty square".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("dataset noise must be non-negative, got {}", self.noise)));
        }
        let travel = self.speed * (frames - 1);
        if self.square + travel > height.min(width) {
            return Err(Error::Config(format!(
                "a {0}×{0} square moving {1} px/frame for {frames} frames does not fit a {height}×{width} frame",
                self.square, self.speed
            )));
        }
        Ok(())
    }

    /// Longest clip this spec can render in a `height × width` frame.
    pub fn max_frames(&self, height: usize, width: usize) -> usize {
        let room = height.min(width).saturating_sub(self.square);
        room / self.speed.max(1) + 1
    }

    /// Render one `frames × height × width × 1` video of `dir`.
    pub fn render(&self, dir: Direction, frames: usize, height: usize, width: usize, rng: &mut RngState) -> Result<VideoClip> {
        self.check_fit(frames, height, width)?;
        let travel = self.speed * (frames - 1);
        let (moving_len, other_len) = if dir.horizontal() { (width, height) } else { (height, width) };
        let span = moving_len - self.square - travel;
        let start = rng.below(span + 1) + if dir.sign() < 0 { travel } else { 0 };
        // position of a moving square in a random frame
        let other_span = other_len - self.square - travel;
        let other = rng.below(other_span + 1) + self.speed * rng.below(frames);

        let mut data = vec![0f32; frames * height * width];
        for t in 0..frames {
            let p = (start as isize + dir.sign() * (self.speed * t) as isize) as usize;
            let (y0, x0) = if dir.horizontal() { (other, p) } else { (p, other) };
            for y in y0..y0 + self.square {
                let row = (t * height + y) * width;
                data[row + x0..row + x0 + self.square].fill(1.0);
            }
        }
        if self.noise > 0.0 {
            for v in &mut data {
                *v = (*v + (self.noise * rng.normal()) as f32).clamp(0.0, 1.0);
            }
        }
        VideoClip::new(Tensor::new([frames, height, width, 1], data)?)
    }

    fn split(&self, stream: u64, count: usize) -> Result<Vec<Sample>> {
        let root = RngState::new(self.seed).fork(stream);
        (0..count)
            .map(|i| {
                let label = i % NUM_CLASSES;
                let dir = Direction::from_label(label).expect("label < 4");
                let mut rng = root.fork(i as u64);
                let clip = self.render(dir, self.frames, self.height, self.width, &mut rng)?;
                Ok(Sample { clip, label })
            })
            .collect()
    }

    /// Deterministic train and test splits with balanced labels.
    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        Ok(Dataset {
            train: self.split(TRAIN_STREAM, self.num_train)?,
            test: self.split(TEST_STREAM, self.num_test)?,
        })
    }

    /// Test videos of a custom size, for multi-view evaluation.
    pub fn long_test_videos(&self, frames: usize, height: usize, width: usize) -> Result<Vec<Sample>> {
        let root = RngState::new(self.seed).fork(TEST_STREAM).fork(u64::MAX);
        (0..self.num_test)
            .map(|i| {
                let label = i % NUM_CLASSES;
                let dir = Direction::from_label(label).expect("label < 4");
                let mut rng = root.fork(i as u64);
                Ok(Sample {
                    clip: self.render(dir, frames, height, width, &mut rng)?,
                    label,
                })
            })
            .collect()
    }
}

/// Free wrapper matching the other harness entry points.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.generate()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetSpec {
        DatasetSpec {
            num_train: 10,
            num_test: 5,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn zero_speed_is_rejected() {
        let spec = DatasetSpec { speed: 0, ..small() };
        assert!(matches!(spec.generate(), Err(Error::Config(_))));
        let spec = DatasetSpec { speed: 5, ..small() };
        assert!(spec.generate().is_err());
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = small().generate().unwrap();
        assert_eq!(a, small().generate().unwrap());
        let mut counts = [0; 4];
        for s in &a.train {
            counts[s.label] += 1;
        }
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        assert_ne!(a.train[0].clip, a.train[4].clip);
    }

    #[test]
    fn square_stays_in_frame() {
        let spec = DatasetSpec { noise: 0.0, ..small() };
        for s in spec.generate().unwrap().train {
            let (t, ..) = s.clip.dims();
            for f in 0..t {
                let lit = s.clip.frame(f).iter().filter(|&&v| v == 1.0).count();
                assert_eq!(lit, 36);
            }
        }
    }

    #[test]
    fn max_frames_fits() {
        let spec = DatasetSpec::default();
        let f = spec.max_frames(32, 32);
        let mut rng = RngState::new(0);
        assert!(spec.render(Direction::Up, f, 32, 32, &mut rng).is_ok());
        assert!(spec.render(Direction::Up, f + 1, 32, 32, &mut rng).is_err());
    }
}
