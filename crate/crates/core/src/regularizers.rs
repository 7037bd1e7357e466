//! Training-time regularisers and data augmentation.
//!
//! Every clip transform draws its parameters once and applies them to all
//! frames, so a clip of identical frames stays a clip of identical frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};
use crate::tokenizer::VideoClip;

/// Largest rand-augment magnitude.
pub const MAX_MAGNITUDE: u32 = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandAugmentConfig {
    pub layers: usize,
    pub magnitude: u32,
}

impl Default for RandAugmentConfig {
    fn default() -> Self {
        RandAugmentConfig {
            layers: 0,
            magnitude: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Probability of a random (rather than centred) crop position.
    pub crop_prob: f64,
    pub flip_prob: f64,
    pub scale_jitter_prob: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub colour_jitter_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from this range.
    pub colour_jitter_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_prob: 0.0,
            flip_prob: 0.0,
            scale_jitter_prob: 0.0,
            min_scale: 0.9,
            max_scale: 1.33,
            colour_jitter_prob: 0.0,
            colour_jitter_range: [0.6, 1.4],
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    /// Stochastic depth rate of the deepest layer.
    pub drop_rate: f64,
    pub label_smoothing: f64,
    /// Mixup is off when zero.
    pub mixup_alpha: f64,
    pub rand_augment: RandAugmentConfig,
    pub augment: AugmentConfig,
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")))
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        check_prob("drop_rate", self.drop_rate)?;
        check_prob("label_smoothing", self.label_smoothing)?;
        if !(self.mixup_alpha >= 0.0 && self.mixup_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mixup_alpha must be non-negative, got {}",
                self.mixup_alpha
            )));
        }
        if self.rand_augment.magnitude > MAX_MAGNITUDE {
            return Err(Error::Config(format!(
                "rand_augment.magnitude must be at most {MAX_MAGNITUDE}"
            )));
        }
        let a = &self.augment;
        check_prob("augment.crop_prob", a.crop_prob)?;
        check_prob("augment.flip_prob", a.flip_prob)?;
        check_prob("augment.scale_jitter_prob", a.scale_jitter_prob)?;
        check_prob("augment.colour_jitter_prob", a.colour_jitter_prob)?;
        if !(a.min_scale > 0.0 && a.min_scale <= a.max_scale) {
            return Err(Error::Config(format!(
                "augment scale range [{}, {}] must satisfy 0 < min <= max",
                a.min_scale, a.max_scale
            )));
        }
        let [lo, hi] = a.colour_jitter_range;
        if !(lo >= 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "augment.colour_jitter_range [{lo}, {hi}] must satisfy 0 <= lo <= hi"
            )));
        }
        Ok(())
    }
}

/// Whether layer `layer` (1-based) of `depth` survives; it is dropped with
/// probability `layer / depth · p_drop`.
pub fn stochastic_depth_gate(layer: usize, depth: usize, p_drop: f64, rng: &mut RngState) -> Result<bool> {
    if layer == 0 || layer > depth {
        return Err(Error::invalid(
            "stochastic depth",
            format!("layer index {layer} outside 1..={depth}"),
        ));
    }
    check_prob("drop rate", p_drop)?;
    if p_drop == 0.0 {
        return Ok(true);
    }
    Ok(!rng.bernoulli(layer as f64 / depth as f64 * p_drop))
}

/// `(1 − λ) y + λ / K`
pub fn label_smooth(y: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_prob("label smoothing", lambda)?;
    let u = lambda / y.len() as f64;
    Ok(y.iter().map(|&p| (1.0 - lambda) * p + u).collect())
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}

/// `λ a + (1 − λ) b` for clips and for label distributions.
pub fn mix(a: &VideoClip, ya: &[f64], b: &VideoClip, yb: &[f64], lambda: f64) -> Result<(VideoClip, Vec<f64>)> {
    if a.dims() != b.dims() || ya.len() != yb.len() {
        return Err(Error::shape("mixup", a.frames().shape(), b.frames().shape()));
    }
    check_prob("mixup weight", lambda)?;
    let l = lambda as f32;
    let data = a
        .frames()
        .data()
        .iter()
        .zip(b.frames().data())
        .map(|(&x, &y)| (l * x + (1.0 - l) * y).clamp(0.0, 1.0))
        .collect();
    let y = ya
        .iter()
        .zip(yb)
        .map(|(&p, &q)| lambda * p + (1.0 - lambda) * q)
        .collect();
    Ok((rebuild(a, data)?, y))
}

/// Mixup with `λ ~ Beta(α, α)`; returns the mixed pair and `λ`.
pub fn mixup(
    a: &VideoClip,
    ya: &[f64],
    b: &VideoClip,
    yb: &[f64],
    alpha: f64,
    rng: &mut RngState,
) -> Result<(VideoClip, Vec<f64>, f64)> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("mixup", format!("alpha must be positive, got {alpha}")));
    }
    let lambda = rng.beta(alpha, alpha);
    let (x, y) = mix(a, ya, b, yb, lambda)?;
    Ok((x, y, lambda))
}

fn rebuild(like: &VideoClip, data: Vec<f32>) -> Result<VideoClip> {
    let mut clip = VideoClip::new(Tensor::new(like.frames().shape().to_vec(), data)?)?;
    clip.frame_rate_stride = like.frame_rate_stride;
    Ok(clip)
}

/// Resample every frame through `map`, which sends an output pixel `(y, x)`
/// to a source position; bilinear with edge clamping.
fn warp(clip: &VideoClip, map: impl Fn(f64, f64) -> (f64, f64)) -> Result<VideoClip> {
    let (t, h, w, c) = clip.dims();
    let src = clip.frames().data();
    let mut out = Vec::with_capacity(src.len());
    let clampf = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64);
    for f in 0..t {
        let frame = &src[f * h * w * c..(f + 1) * h * w * c];
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = map(y as f64, x as f64);
                let (sy, sx) = (clampf(sy, h), clampf(sx, w));
                let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
                for ch in 0..c {
                    let p = |yy: usize, xx: usize| frame[(yy * w + xx) * c + ch];
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
                }
            }
        }
    }
    rebuild(clip, out)
}

/// Apply an affine colour map `x ↦ a·x + b` to every pixel.
fn affine_colour(clip: &VideoClip, a: f32, b: f32) -> Result<VideoClip> {
    let data = clip
        .frames()
        .data()
        .iter()
        .map(|&x| (a * x + b).clamp(0.0, 1.0))
        .collect();
    rebuild(clip, data)
}

fn clip_mean(clip: &VideoClip) -> f32 {
    let d = clip.frames().data();
    (d.iter().map(|&x| x as f64).sum::<f64>() / d.len() as f64) as f32
}

pub fn adjust_brightness(clip: &VideoClip, factor: f64) -> Result<VideoClip> {
    affine_colour(clip, factor as f32, 0.0)
}

/// Blend towards the clip-wide mean intensity.
pub fn adjust_contrast(clip: &VideoClip, factor: f64) -> Result<VideoClip> {
    let m = clip_mean(clip);
    let f = factor as f32;
    affine_colour(clip, f, (1.0 - f) * m)
}

/// Blend each RGB pixel towards its grey level; a no-op unless `C = 3`.
pub fn adjust_saturation(clip: &VideoClip, factor: f64) -> Result<VideoClip> {
    let (.., c) = clip.dims();
    if c != 3 {
        return Ok(clip.clone());
    }
    let f = factor as f32;
    let mut data = clip.frames().data().to_vec();
    for px in data.chunks_exact_mut(3) {
        let grey = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
        for v in px.iter_mut() {
            *v = (f * *v + (1.0 - f) * grey).clamp(0.0, 1.0);
        }
    }
    rebuild(clip, data)
}

pub fn flip_horizontal(clip: &VideoClip) -> VideoClip {
    let (t, h, w, c) = clip.dims();
    let src = clip.frames().data();
    let mut data = Vec::with_capacity(src.len());
    for row in 0..t * h {
        for x in (0..w).rev() {
            let at = (row * w + x) * c;
            data.extend_from_slice(&src[at..at + c]);
        }
    }
    rebuild(clip, data).expect("flip preserves shape and range")
}

/// Shift content by `(dy, dx)` pixels.
pub fn translate(clip: &VideoClip, dy: f64, dx: f64) -> Result<VideoClip> {
    warp(clip, |y, x| (y - dy, x - dx))
}

/// Rotate about the frame centre by `degrees`.
pub fn rotate(clip: &VideoClip, degrees: f64) -> Result<VideoClip> {
    let (_, h, w, _) = clip.dims();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, c) = degrees.to_radians().sin_cos();
    warp(clip, |y, x| {
        let (ry, rx) = (y - cy, x - cx);
        (cy + c * ry - s * rx, cx + s * ry + c * rx)
    })
}

/// Horizontal shear about the frame centre.
pub fn shear_x(clip: &VideoClip, shear: f64) -> Result<VideoClip> {
    let (_, h, ..) = clip.dims();
    let cy = (h as f64 - 1.0) / 2.0;
    warp(clip, |y, x| (y, x + shear * (y - cy)))
}

/// Zoom by `scale` (content magnified when above 1) taking the window
/// whose top-left corner is `offset` in source pixels; the window is
/// clamped to the frame.
pub fn resized_crop(clip: &VideoClip, scale: f64, offset: (f64, f64)) -> Result<VideoClip> {
    if !(scale > 0.0) {
        return Err(Error::invalid("resized crop", format!("scale must be positive, got {scale}")));
    }
    let (_, h, w, _) = clip.dims();
    let wh = (h as f64 / scale).min(h as f64);
    let ww = (w as f64 / scale).min(w as f64);
    let oy = offset.0.clamp(0.0, h as f64 - wh);
    let ox = offset.1.clamp(0.0, w as f64 - ww);
    let (ry, rx) = (wh / h as f64, ww / w as f64);
    warp(clip, |y, x| (oy + (y + 0.5) * ry - 0.5, ox + (x + 0.5) * rx - 0.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandAugmentOp {
    TranslateX,
    TranslateY,
    Rotate,
    ShearX,
    Brightness,
    Contrast,
}

impl RandAugmentOp {
    pub const ALL: [RandAugmentOp; 6] = [
        RandAugmentOp::TranslateX,
        RandAugmentOp::TranslateY,
        RandAugmentOp::Rotate,
        RandAugmentOp::ShearX,
        RandAugmentOp::Brightness,
        RandAugmentOp::Contrast,
    ];

    /// Apply at `magnitude` in `0..=30`; `negate` flips the direction.
    pub fn apply(self, clip: &VideoClip, magnitude: u32, negate: bool) -> Result<VideoClip> {
        let level = magnitude.min(MAX_MAGNITUDE) as f64 / MAX_MAGNITUDE as f64;
        let sign = if negate { -1.0 } else { 1.0 };
        let (_, h, w, _) = clip.dims();
        match self {
            RandAugmentOp::TranslateX => translate(clip, 0.0, sign * level * 0.45 * w as f64),
            RandAugmentOp::TranslateY => translate(clip, sign * level * 0.45 * h as f64, 0.0),
            RandAugmentOp::Rotate => rotate(clip, sign * level * 30.0),
            RandAugmentOp::ShearX => shear_x(clip, sign * level * 0.3),
            RandAugmentOp::Brightness => adjust_brightness(clip, 1.0 + sign * level * 0.9),
            RandAugmentOp::Contrast => adjust_contrast(clip, 1.0 + sign * level * 0.9),
        }
    }
}

/// `layers` ops drawn uniformly with replacement, each applied with a random
/// direction at the shared magnitude.
pub fn rand_augment(clip: &VideoClip, layers: usize, magnitude: u32, rng: &mut RngState) -> Result<VideoClip> {
    if magnitude > MAX_MAGNITUDE {
        return Err(Error::invalid(
            "rand augment",
            format!("magnitude {magnitude} exceeds {MAX_MAGNITUDE}"),
        ));
    }
    let mut out = clip.clone();
    for _ in 0..layers {
        let op = RandAugmentOp::ALL[rng.below(RandAugmentOp::ALL.len())];
        let negate = rng.bernoulli(0.5);
        out = op.apply(&out, magnitude, negate)?;
    }
    Ok(out)
}

/// Scale jitter with a random or centred crop, horizontal flip and colour
/// jitter.
pub fn geometric_augment(clip: &VideoClip, cfg: &AugmentConfig, rng: &mut RngState) -> Result<VideoClip> {
    let (_, h, w, _) = clip.dims();
    let scale = if rng.bernoulli(cfg.scale_jitter_prob) {
        rng.uniform_in(cfg.min_scale, cfg.max_scale)
    } else {
        1.0
    };
    let (wh, ww) = ((h as f64 / scale).min(h as f64), (w as f64 / scale).min(w as f64));
    let (sy, sx) = (h as f64 - wh, w as f64 - ww);
    let offset = if rng.bernoulli(cfg.crop_prob) {
        (rng.uniform() * sy, rng.uniform() * sx)
    } else {
        (sy / 2.0, sx / 2.0)
    };
    let mut out = if scale == 1.0 {
        clip.clone()
    } else {
        resized_crop(clip, scale, offset)?
    };
    if rng.bernoulli(cfg.flip_prob) {
        out = flip_horizontal(&out);
    }
    if rng.bernoulli(cfg.colour_jitter_prob) {
        let [lo, hi] = cfg.colour_jitter_range;
        let b = rng.uniform_in(lo, hi);
        let c = rng.uniform_in(lo, hi);
        let s = rng.uniform_in(lo, hi);
        out = adjust_brightness(&out, b)?;
        out = adjust_contrast(&out, c)?;
        out = adjust_saturation(&out, s)?;
    }
    Ok(out)
}

/// Rand-augment followed by the geometric/colour pipeline.
pub fn augment_clip(clip: &VideoClip, cfg: &RegConfig, rng: &mut RngState) -> Result<VideoClip> {
    let out = rand_augment(clip, cfg.rand_augment.layers, cfg.rand_augment.magnitude, rng)?;
    geometric_augment(&out, &cfg.augment, rng)
}
