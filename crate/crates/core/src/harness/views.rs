//! Multi-view inference: `x` temporal clips times `y` spatial crops, logits
//! averaged over views.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::models::ViViT;
use crate::tensor::{Scalar, Tensor};
use crate::tokenizer::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewSpec {
    pub temporal: usize,
    pub spatial: usize,
}

impl ViewSpec {
    pub fn new(temporal: usize, spatial: usize) -> Result<Self> {
        if temporal == 0 || spatial == 0 {
            return Err(Error::Config(format!(
                "view counts must be at least 1, got {temporal}x{spatial}"
            )));
        }
        Ok(ViewSpec { temporal, spatial })
    }

    pub fn count(&self) -> usize {
        self.temporal * self.spatial
    }
}

impl Default for ViewSpec {
    fn default() -> Self {
        ViewSpec { temporal: 1, spatial: 1 }
    }
}

impl FromStr for ViewSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| p.trim().parse::<usize>().ok();
        match s.split_once(['x', 'X']) {
            Some((a, b)) => match (parse(a), parse(b)) {
                (Some(x), Some(y)) => ViewSpec::new(x, y),
                _ => Err(Error::Config(format!("views must look like 4x3, got `{s}`"))),
            },
            None => Err(Error::Config(format!("views must look like 4x3, got `{s}`"))),
        }
    }
}

impl fmt::Display for ViewSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.temporal, self.spatial)
    }
}

/// `count` equidistant window starts for a window of `len` in `total`; a
/// single window is centred.
pub fn view_starts(total: usize, len: usize, count: usize) -> Result<Vec<usize>> {
    if len == 0 || len > total || count == 0 {
        return Err(Error::invalid(
            "views",
            format!("cannot place {count} windows of {len} in {total}"),
        ));
    }
    let room = total - len;
    if count == 1 {
        return Ok(vec![room / 2]);
    }
    Ok((0..count).map(|i| i * room / (count - 1)).collect())
}

/// Every view of `video` the model would see, temporal-major.
pub fn extract_views(video: &VideoClip, frames: usize, height: usize, width: usize, views: ViewSpec) -> Result<Vec<VideoClip>> {
    let (t, h, w, _) = video.dims();
    if t < frames || h < height || w < width {
        return Err(Error::invalid(
            "multi-view",
            format!("video {t}×{h}×{w} is smaller than one {frames}×{height}×{width} clip"),
        ));
    }
    let starts = view_starts(t, frames, views.temporal)?;
    let xs = view_starts(w, width, views.spatial)?;
    let y0 = (h - height) / 2;
    let mut out = Vec::with_capacity(views.count());
    for &s in &starts {
        for &x0 in &xs {
            out.push(video.crop(s, frames, y0, x0, height, width)?);
        }
    }
    Ok(out)
}

/// Running mean over views; identical inputs give a bitwise identical mean.
pub fn average_logits<T: Scalar>(views: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = views
        .first()
        .ok_or_else(|| Error::invalid("multi-view", "no views to average"))?;
    let mut mean = first.clone();
    for (k, v) in views.iter().enumerate().skip(1) {
        if v.shape() != mean.shape() {
            return Err(Error::shape("multi-view", mean.shape(), v.shape()));
        }
        let k = T::of((k + 1) as f64);
        for (m, &x) in mean.data_mut().iter_mut().zip(v.data()) {
            *m = *m + (x - *m) / k;
        }
    }
    Ok(mean)
}

/// Averaged logits `[K_h]` per head for one long video.
pub fn multi_view_infer<T: Scalar>(model: &ViViT<T>, video: &VideoClip, views: ViewSpec) -> Result<Vec<Tensor<T>>> {
    let input = model.config().input;
    let clips = extract_views(video, input.frames, input.height, input.width, views)?;
    let logits = model.predict(&clips)?;
    logits
        .into_iter()
        .map(|head| {
            let k = head.shape()[1];
            let rows: Vec<Tensor<T>> = head
                .data()
                .chunks(k)
                .map(|r| Tensor::new([k], r.to_vec()))
                .collect::<Result<_>>()?;
            average_logits(&rows)
        })
        .collect()
}
