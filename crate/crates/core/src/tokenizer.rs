//! Video → token grid: uniform frame sampling and tubelet embedding.
//!
//! Token order is fixed everywhere: temporal-major, then height, then width.
//! Within one patch or tubelet the flattened pixel order is `(dt, dh, dw, c)`,
//! which matches the row-major layout of a `[t, h, w, C, d]` kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ops, Scalar, Tensor};

/// A raw clip, `frames` shaped `[T, H, W, C]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    frames: Tensor<f32>,
    /// Source frame stride; bookkeeping only.
    pub frame_rate_stride: usize,
}

impl VideoClip {
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rank() != 4 {
            return Err(Error::invalid(
                "video clip",
                format!("expected [T, H, W, C], got {:?}", frames.shape()),
            ));
        }
        if frames
            .data()
            .iter()
            .any(|x| !x.is_finite() || !(0.0..=1.0).contains(x))
        {
            return Err(Error::invalid("video clip", "pixel values must lie in [0, 1]"));
        }
        Ok(VideoClip {
            frames,
            frame_rate_stride: 1,
        })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    /// `(T, H, W, C)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let (_, h, w, c) = self.dims();
        let n = h * w * c;
        &self.frames.data()[t * n..(t + 1) * n]
    }

    /// Sub-clip of `len` frames starting at `start` and the spatial window
    /// `[y0, y0+height) × [x0, x0+width)`.
    pub fn crop(
        &self,
        start: usize,
        len: usize,
        y0: usize,
        x0: usize,
        height: usize,
        width: usize,
    ) -> Result<VideoClip> {
        let (t, h, w, c) = self.dims();
        if len == 0 || height == 0 || width == 0 || start + len > t || y0 + height > h || x0 + width > w
        {
            return Err(Error::invalid(
                "crop",
                format!(
                    "window {len}×{height}×{width} at ({start}, {y0}, {x0}) exceeds clip {t}×{h}×{w}"
                ),
            ));
        }
        let src = self.frames.data();
        let mut data = Vec::with_capacity(len * height * width * c);
        for f in start..start + len {
            for y in y0..y0 + height {
                let row = ((f * h + y) * w + x0) * c;
                data.extend_from_slice(&src[row..row + width * c]);
            }
        }
        Ok(VideoClip {
            frames: Tensor::new([len, height, width, c], data)?,
            frame_rate_stride: self.frame_rate_stride,
        })
    }

    /// The clip with its frames in reverse order.
    pub fn reversed(&self) -> VideoClip {
        let (t, ..) = self.dims();
        let mut data = Vec::with_capacity(self.frames.numel());
        for f in (0..t).rev() {
            data.extend_from_slice(self.frame(f));
        }
        VideoClip {
            frames: Tensor::new(self.frames.shape().to_vec(), data).expect("same shape"),
            frame_rate_stride: self.frame_rate_stride,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tubelet {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl Tubelet {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Tubelet { t, h, w }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub nt: usize,
    pub nh: usize,
    pub nw: usize,
}

impl Grid {
    pub fn spatial(&self) -> usize {
        self.nh * self.nw
    }

    pub fn len(&self) -> usize {
        self.nt * self.nh * self.nw
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened position of token `(t, h, w)`.
    pub fn index(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.nh + h) * self.nw + w
    }
}

/// Embedded tokens `[nt, nh, nw, d]` plus an optional classification token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Tensor<T>,
    pub cls: Option<Tensor<T>>,
    pub grid: Grid,
}

/// Linear embedding `E` (`[t, h, w, C, d]` or `[h, w, C, d]`), its bias, the
/// positional table and the optional classification token.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingWeights<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub pos: Tensor<T>,
    pub cls: Option<Tensor<T>>,
}

impl<T: Scalar> EmbeddingWeights<T> {
    pub fn dim(&self) -> usize {
        *self.kernel.shape().last().expect("rank >= 1")
    }

    /// Kernel as a `[patch_len, d]` projection matrix.
    pub fn projection(&self) -> Result<Tensor<T>> {
        let d = self.dim();
        self.kernel.reshape([self.kernel.numel() / d, d])
    }
}

/// Frame indices `⌊i·T/nt⌋` for `i in 0..nt`.
pub fn sample_frame_indices(total: usize, nt: usize) -> Result<Vec<usize>> {
    if nt == 0 || nt > total {
        return Err(Error::invalid(
            "uniform frame sampling",
            format!("cannot sample {nt} frames from {total}"),
        ));
    }
    Ok((0..nt).map(|i| i * total / nt).collect())
}

pub fn tubelet_grid(dims: (usize, usize, usize), tubelet: Tubelet) -> Result<Grid> {
    let (t, h, w) = dims;
    if tubelet.t == 0 || tubelet.h == 0 || tubelet.w == 0 {
        return Err(Error::invalid("tubelet", "tubelet dimensions must be positive"));
    }
    if tubelet.t > t || tubelet.h > h || tubelet.w > w {
        return Err(Error::invalid(
            "tubelet",
            format!(
                "tubelet {}×{}×{} larger than clip {t}×{h}×{w}",
                tubelet.t, tubelet.h, tubelet.w
            ),
        ));
    }
    Ok(Grid {
        nt: t / tubelet.t,
        nh: h / tubelet.h,
        nw: w / tubelet.w,
    })
}

/// Gather non-overlapping tubelets into a `[N, t·h·w·C]` matrix.
pub fn extract_tubelets<T: Scalar>(clip: &VideoClip, tubelet: Tubelet) -> Result<(Grid, Tensor<T>)> {
    let (ct, ch, cw, cc) = clip.dims();
    let grid = tubelet_grid((ct, ch, cw), tubelet)?;
    let frames: Vec<usize> = (0..grid.nt * tubelet.t).collect();
    gather(clip, &frames, tubelet, grid, cc, ch, cw)
}

/// Uniformly sample `nt` frames and gather their `h×w` patches into a
/// `[nt·nh·nw, h·w·C]` matrix.
pub fn extract_frame_patches<T: Scalar>(
    clip: &VideoClip,
    nt: usize,
    patch: (usize, usize),
) -> Result<(Grid, Tensor<T>)> {
    let (ct, ch, cw, cc) = clip.dims();
    let frames = sample_frame_indices(ct, nt)?;
    let tubelet = Tubelet::new(1, patch.0, patch.1);
    let spatial = tubelet_grid((1, ch, cw), tubelet)?;
    let grid = Grid { nt, ..spatial };
    gather(clip, &frames, tubelet, grid, cc, ch, cw)
}

fn gather<T: Scalar>(
    clip: &VideoClip,
    frames: &[usize],
    tb: Tubelet,
    grid: Grid,
    c: usize,
    height: usize,
    width: usize,
) -> Result<(Grid, Tensor<T>)> {
    let src = clip.frames().data();
    let patch_len = tb.t * tb.h * tb.w * c;
    let mut data = Vec::with_capacity(grid.len() * patch_len);
    for it in 0..grid.nt {
        for ih in 0..grid.nh {
            for iw in 0..grid.nw {
                for dt in 0..tb.t {
                    let f = frames[it * tb.t + dt];
                    for dh in 0..tb.h {
                        let y = ih * tb.h + dh;
                        let row = ((f * height + y) * width + iw * tb.w) * c;
                        data.extend(src[row..row + tb.w * c].iter().map(|&v| T::of(v as f64)));
                    }
                }
            }
        }
    }
    Ok((grid, Tensor::new([grid.len(), patch_len], data)?))
}

fn project<T: Scalar>(
    grid: Grid,
    patches: &Tensor<T>,
    weights: &EmbeddingWeights<T>,
) -> Result<TokenGrid<T>> {
    let d = weights.dim();
    if weights.bias.shape() != [d] {
        return Err(Error::shape("embedding bias", weights.bias.shape(), &[d]));
    }
    let mut tokens = ops::matmul(patches, &weights.projection()?)?;
    for row in tokens.data_mut().chunks_exact_mut(d) {
        for (x, &b) in row.iter_mut().zip(weights.bias.data()) {
            *x = *x + b;
        }
    }
    Ok(TokenGrid {
        tokens: tokens.into_reshape([grid.nt, grid.nh, grid.nw, d])?,
        cls: weights.cls.clone(),
        grid,
    })
}

/// Embed each of `nt` uniformly sampled frames with a 2D `[h, w, C, d]` kernel.
pub fn uniform_frame_embed<T: Scalar>(
    clip: &VideoClip,
    weights: &EmbeddingWeights<T>,
    nt: usize,
) -> Result<TokenGrid<T>> {
    let k = weights.kernel.shape();
    let (.., c) = clip.dims();
    if k.len() != 4 || k[2] != c {
        return Err(Error::shape("uniform_frame_embed", k, clip.frames().shape()));
    }
    let (grid, patches) = extract_frame_patches(clip, nt, (k[0], k[1]))?;
    project(grid, &patches, weights)
}

/// Embed non-overlapping tubelets with a `[t, h, w, C, d]` kernel; a stride-
/// `(t, h, w)` 3D convolution.
pub fn tubelet_embed<T: Scalar>(
    clip: &VideoClip,
    weights: &EmbeddingWeights<T>,
    tubelet: Tubelet,
) -> Result<TokenGrid<T>> {
    let k = weights.kernel.shape();
    let (.., c) = clip.dims();
    if k.len() != 5 || k[..4] != [tubelet.t, tubelet.h, tubelet.w, c] {
        return Err(Error::shape("tubelet_embed", k, &[tubelet.t, tubelet.h, tubelet.w, c]));
    }
    let (grid, patches) = extract_tubelets(clip, tubelet)?;
    project(grid, &patches, weights)
}

/// Flatten the grid, optionally prepend the class token, add positions.
pub fn assemble_sequence<T: Scalar>(
    tokens: &TokenGrid<T>,
    weights: &EmbeddingWeights<T>,
    use_cls: bool,
) -> Result<Tensor<T>> {
    let d = *tokens.tokens.shape().last().expect("rank 4");
    let n = tokens.grid.len() + usize::from(use_cls);
    if weights.pos.shape() != [n, d] {
        return Err(Error::shape("assemble_sequence", weights.pos.shape(), &[n, d]));
    }
    let mut data = Vec::with_capacity(n * d);
    if use_cls {
        let cls = tokens
            .cls
            .as_ref()
            .or(weights.cls.as_ref())
            .ok_or_else(|| Error::invalid("assemble_sequence", "no classification token"))?;
        data.extend_from_slice(cls.data());
    }
    data.extend_from_slice(tokens.tokens.data());
    for (x, &p) in data.iter_mut().zip(weights.pos.data()) {
        *x = *x + p;
    }
    Tensor::new([n, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngState;

    fn random_clip(t: usize, h: usize, w: usize, c: usize, seed: u64) -> VideoClip {
        let mut rng = RngState::new(seed);
        VideoClip::new(Tensor::random_uniform([t, h, w, c], 0.0, 1.0, &mut rng)).unwrap()
    }

    fn weights(kernel_shape: &[usize], rows: usize, seed: u64) -> EmbeddingWeights<f64> {
        let mut rng = RngState::new(seed);
        let d = *kernel_shape.last().unwrap();
        EmbeddingWeights {
            kernel: Tensor::random_uniform(kernel_shape.to_vec(), -1.0, 1.0, &mut rng),
            bias: Tensor::random_uniform([d], -0.1, 0.1, &mut rng),
            pos: Tensor::random_uniform([rows, d], -0.1, 0.1, &mut rng),
            cls: Some(Tensor::random_uniform([d], -1.0, 1.0, &mut rng)),
        }
    }

    #[test]
    fn frame_indices_follow_floor_formula() {
        assert_eq!(
            sample_frame_indices(32, 8).unwrap(),
            vec![0, 4, 8, 12, 16, 20, 24, 28]
        );
        assert_eq!(sample_frame_indices(8, 8).unwrap(), (0..8).collect::<Vec<_>>());
        assert!(sample_frame_indices(4, 8).is_err());
    }

    #[test]
    fn grid_arithmetic() {
        let g = tubelet_grid((32, 224, 224), Tubelet::new(2, 16, 16)).unwrap();
        assert_eq!((g.nt, g.nh, g.nw, g.len()), (16, 14, 14, 3136));
        let g = tubelet_grid((1, 224, 224), Tubelet::new(1, 16, 16)).unwrap();
        assert_eq!(g.spatial(), 196);
        let g = tubelet_grid((33, 224, 224), Tubelet::new(2, 16, 16)).unwrap();
        assert_eq!(g.nt, 16);
        assert!(tubelet_grid((2, 8, 8), Tubelet::new(4, 4, 4)).is_err());
    }

    #[test]
    fn flattened_index_is_temporal_major() {
        let g = Grid { nt: 2, nh: 2, nw: 2 };
        assert_eq!(g.index(1, 0, 1), 5);
    }

    #[test]
    fn tubelet_embed_matches_gather_then_matmul_loop() {
        let clip = random_clip(4, 8, 8, 1, 1);
        let w = weights(&[2, 4, 4, 1, 3], 8, 2);
        let out = tubelet_embed(&clip, &w, Tubelet::new(2, 4, 4)).unwrap();
        assert_eq!(out.grid, Grid { nt: 2, nh: 2, nw: 2 });
        let f = clip.frames();
        let k = &w.kernel;
        for it in 0..2 {
            for ih in 0..2 {
                for iw in 0..2 {
                    for j in 0..3 {
                        let mut acc = 0.0f64;
                        for dt in 0..2 {
                            for dh in 0..4 {
                                for dw in 0..4 {
                                    let px = f.at(&[it * 2 + dt, ih * 4 + dh, iw * 4 + dw, 0]) as f64;
                                    acc += px * k.at(&[dt, dh, dw, 0, j]);
                                }
                            }
                        }
                        acc += w.bias.data()[j];
                        let got = out.tokens.at(&[it, ih, iw, j]);
                        assert!((got - acc).abs() < 1e-12, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn unit_tubelet_equals_uniform_sampling_of_every_frame() {
        let clip = random_clip(3, 8, 8, 2, 5);
        let w3 = weights(&[1, 4, 4, 2, 5], 12, 6);
        let w2 = EmbeddingWeights {
            kernel: w3.kernel.reshape([4, 4, 2, 5]).unwrap(),
            ..w3.clone()
        };
        let a = tubelet_embed(&clip, &w3, Tubelet::new(1, 4, 4)).unwrap();
        let b = uniform_frame_embed(&clip, &w2, 3).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn per_frame_embedding_equals_single_image_embedding() {
        let clip = random_clip(4, 8, 8, 1, 9);
        let w = weights(&[4, 4, 1, 2], 16, 10);
        let video = uniform_frame_embed(&clip, &w, 4).unwrap();
        for f in 0..4 {
            let one = clip.crop(f, 1, 0, 0, 8, 8).unwrap();
            let img = uniform_frame_embed(&one, &w, 1).unwrap();
            let per_frame = &video.tokens.data()[f * 8..(f + 1) * 8];
            assert_eq!(per_frame, img.tokens.data());
        }
    }

    #[test]
    fn residual_pixels_are_dropped() {
        let clip = random_clip(5, 9, 10, 1, 3);
        let w = weights(&[2, 4, 4, 1, 2], 8, 4);
        let out = tubelet_embed(&clip, &w, Tubelet::new(2, 4, 4)).unwrap();
        assert_eq!(out.grid, Grid { nt: 2, nh: 2, nw: 2 });
    }

    #[test]
    fn swapping_patches_swaps_tokens() {
        let clip = random_clip(1, 8, 8, 1, 12);
        let w = weights(&[4, 4, 1, 3], 4, 13);
        // swap patch (0,0) with patch (1,1)
        let mut frames = clip.frames().clone();
        for dy in 0..4 {
            for dx in 0..4 {
                let a = dy * 8 + dx;
                let b = (4 + dy) * 8 + 4 + dx;
                frames.data_mut().swap(a, b);
            }
        }
        let swapped = VideoClip::new(frames).unwrap();
        let x = uniform_frame_embed(&clip, &w, 1).unwrap().tokens;
        let y = uniform_frame_embed(&swapped, &w, 1).unwrap().tokens;
        assert_eq!(x.data()[0..3], y.data()[9..12]);
        assert_eq!(x.data()[9..12], y.data()[0..3]);
        assert_eq!(x.data()[3..9], y.data()[3..9]);
    }

    #[test]
    fn assemble_sequence_cases() {
        let clip = random_clip(2, 4, 4, 1, 20);
        let mut w = weights(&[1, 2, 2, 1, 3], 8, 21);
        w.pos = Tensor::zeros([8, 3]);
        let g = tubelet_embed(&clip, &w, Tubelet::new(1, 2, 2)).unwrap();
        let z = assemble_sequence(&g, &w, false).unwrap();
        assert_eq!(z.data(), g.tokens.data());

        let w = weights(&[1, 2, 2, 1, 3], 9, 22);
        let g = tubelet_embed(&clip, &w, Tubelet::new(1, 2, 2)).unwrap();
        let z = assemble_sequence(&g, &w, true).unwrap();
        let cls = w.cls.as_ref().unwrap().data();
        for j in 0..3 {
            assert_eq!(z.data()[j], cls[j] + w.pos.data()[j]);
        }
        assert!(assemble_sequence(&g, &w, false).is_err());
    }
}
