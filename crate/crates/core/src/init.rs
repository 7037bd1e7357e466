//! Fresh initialisation and initialisation from an image checkpoint.
//!
//! An image model is a Model 1 configuration with a single input frame and
//! uniform (2D patch) embedding. Its tensors map onto a video model as
//! follows:
//!
//! | image tensor          | video tensor            | transform                     |
//! |-----------------------|-------------------------|-------------------------------|
//! | `embed.kernel [h,w,C,d]` | `embed.kernel [t,h,w,C,d]` | inflate, central frame or fresh |
//! | `embed.kernel [h,w,C,d]` | `embed.kernel [h,w,C,d]`   | copied (uniform sampling)       |
//! | `embed.pos [S(+1),d]` | `embed.pos [nt·S(+1),d]` | spatial rows repeated per frame |
//! | `embed.pos [S(+1),d]` | `embed.pos [S(+1),d]` (Model 2) | copied                  |
//! | `embed.bias`, `embed.cls`, `norm.*` | same name | copied                           |
//! | `layers.{l}.*`        | `layers.{l}.*`          | copied                          |
//!
//! Everything else (Model 3 temporal blocks, the Model 2 temporal encoder,
//! classifier heads) is freshly initialised; Model 3 temporal MSA weights
//! are then zeroed.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::models::{EmbedMethod, ModelConfig, Variant, ViViT};
use crate::tensor::{RngState, Scalar, Tensor};

/// Standard deviation of freshly initialised positional embeddings.
pub const POS_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedInit {
    Inflate,
    Central,
    Random,
}

impl std::str::FromStr for EmbedInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inflate" => Ok(EmbedInit::Inflate),
            "central" => Ok(EmbedInit::Central),
            "random" => Ok(EmbedInit::Random),
            other => Err(Error::Config(format!(
                "unknown embedding initialisation `{other}` (expected inflate, central or random)"
            ))),
        }
    }
}

/// Uniform on `±√(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngState) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::random_uniform(shape.to_vec(), -limit, limit, rng)
}

/// Knobs of fresh initialisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Standard deviation of the positional tables.
    pub pos_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig { pos_std: POS_STD }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pos_std >= 0.0 && self.pos_std.is_finite()) {
            return Err(Error::Config(format!("pos_std must be non-negative, got {}", self.pos_std)));
        }
        Ok(())
    }
}

fn fresh_tensor<T: Scalar>(name: &str, shape: &[usize], init: &InitConfig, rng: &mut RngState) -> Tensor<T> {
    let last = *shape.last().expect("non-empty shape");
    if name.ends_with(".gamma") {
        Tensor::full(shape.to_vec(), T::one())
    } else if name.ends_with(".beta") || name.ends_with(".bias") || name.ends_with(".cls") {
        Tensor::zeros(shape.to_vec())
    } else if name.ends_with(".pos") {
        Tensor::random_normal(shape.to_vec(), init.pos_std, rng)
    } else {
        // weights and the embedding kernel: fan-in is every axis but the last
        let fan_in = shape.iter().product::<usize>() / last;
        glorot_uniform(shape, fan_in, last, rng)
    }
}

/// A freshly initialised model; every tensor draws from its own stream of
/// `seed`, so adding a tensor never perturbs the others.
pub fn random_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ViViT<T>> {
    random_model_with(cfg, seed, &InitConfig::default())
}

pub fn random_model_with<T: Scalar>(cfg: &ModelConfig, seed: u64, init: &InitConfig) -> Result<ViViT<T>> {
    init.validate()?;
    let root = RngState::new(seed);
    let mut params = IndexMap::new();
    for (name, shape) in cfg.param_shapes()? {
        let mut rng = root.fork(name_key(&name));
        params.insert(name.clone(), fresh_tensor(&name, &shape, init, &mut rng));
    }
    ViViT::new(cfg.clone(), params)
}

/// FNV-1a hash of a parameter name.
fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn check_kernel<T: Scalar>(e: &Tensor<T>, t: usize) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("embedding init", "temporal extent must be at least 1"));
    }
    if e.rank() != 4 {
        return Err(Error::invalid(
            "embedding init",
            format!("image kernel must be [h, w, C, d], got {:?}", e.shape()),
        ));
    }
    Ok(())
}

/// `t` copies of `E_img / t` stacked along a new leading axis.
pub fn inflate_embedding<T: Scalar>(e_img: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    check_kernel(e_img, t)?;
    let inv = T::one() / T::of(t as f64);
    let slice = e_img.map(|x| x * inv);
    let mut shape = vec![t];
    shape.extend_from_slice(e_img.shape());
    Tensor::new(shape, slice.data().repeat(t))
}

/// Zeros everywhere except slice `⌊t/2⌋`, which holds `E_img`.
pub fn central_frame_init<T: Scalar>(e_img: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
    check_kernel(e_img, t)?;
    let n = e_img.numel();
    let mut data = vec![T::zero(); t * n];
    let c = t / 2;
    data[c * n..(c + 1) * n].copy_from_slice(e_img.data());
    let mut shape = vec![t];
    shape.extend_from_slice(e_img.shape());
    Tensor::new(shape, data)
}

/// Tile `[S, d]` spatial embeddings over `nt` frames, temporal-major.
pub fn repeat_positional<T: Scalar>(p_img: &Tensor<T>, nt: usize) -> Result<Tensor<T>> {
    if p_img.rank() != 2 || nt == 0 {
        return Err(Error::invalid(
            "repeat_positional",
            format!("need a [S, d] table and nt ≥ 1, got {:?} and {nt}", p_img.shape()),
        ));
    }
    Tensor::new([nt * p_img.shape()[0], p_img.shape()[1]], p_img.data().repeat(nt))
}

fn is_temporal_msa(name: &str) -> bool {
    name.starts_with("layers.") && name.contains(".temporal_msa.")
}

/// Zero every temporal MSA projection of a Model 3 network.
pub fn init_model3_temporal<T: Scalar>(model: &mut ViViT<T>) -> Result<()> {
    if model.config().variant != Variant::FactorisedSelfAttention {
        return Err(Error::Config(format!(
            "temporal MSA zero-initialisation applies to Model 3, not {}",
            model.config().variant
        )));
    }
    for (name, t) in model.params_mut() {
        if is_temporal_msa(name) {
            t.data_mut().fill(T::zero());
        }
    }
    Ok(())
}

fn incompatible(name: &str, expected: &[usize], found: &[usize]) -> Error {
    Error::Incompatible {
        name: name.to_string(),
        expected: format!("{expected:?}"),
        found: format!("{found:?}"),
    }
}

/// Build a video model from an image checkpoint; tensors with no image
/// counterpart are freshly initialised from `seed`.
pub fn load_pretrained<T: Scalar>(
    ckpt: &Checkpoint,
    cfg: &ModelConfig,
    embed_init: EmbedInit,
    seed: u64,
) -> Result<ViViT<T>> {
    let mut model = random_model::<T>(cfg, seed)?;
    let image: IndexMap<String, Tensor<T>> = ckpt.tensors()?;
    let get = |name: &str| {
        image.get(name).ok_or_else(|| Error::Incompatible {
            name: name.to_string(),
            expected: "present in the image checkpoint".into(),
            found: "missing".into(),
        })
    };

    let grid = cfg.grid()?;
    let d = cfg.dim();
    let tb = cfg.tubelet;
    let kernel = get("embed.kernel")?;
    let want = [tb.h, tb.w, cfg.input.channels, d];
    if kernel.shape() != want {
        return Err(incompatible("embed.kernel", &want, kernel.shape()));
    }

    let pos = get("embed.pos")?;
    let image_cls = image.contains_key("embed.cls");
    let s = grid.spatial();
    let want = [s + usize::from(image_cls), d];
    if pos.shape() != want {
        return Err(incompatible("embed.pos", &want, pos.shape()));
    }
    let spatial_pos = Tensor::new([s, d], pos.data()[usize::from(image_cls) * d..].to_vec())?;
    let frames = match cfg.variant {
        Variant::FactorisedEncoder => 1,
        _ => grid.nt,
    };
    let mut video_pos = repeat_positional(&spatial_pos, frames)?;
    if cfg.use_cls {
        let cls_row = if image_cls {
            pos.data()[..d].to_vec()
        } else {
            model.param("embed.pos").expect("pos exists").data()[..d].to_vec()
        };
        let mut data = cls_row;
        data.extend_from_slice(video_pos.data());
        video_pos = Tensor::new([frames * s + 1, d], data)?;
    }
    model.set_param("embed.pos", video_pos)?;

    match (cfg.embed, embed_init) {
        (EmbedMethod::Uniform, _) => model.set_param("embed.kernel", kernel.clone())?,
        (EmbedMethod::Tubelet, EmbedInit::Inflate) => {
            model.set_param("embed.kernel", inflate_embedding(kernel, tb.t)?)?
        }
        (EmbedMethod::Tubelet, EmbedInit::Central) => {
            model.set_param("embed.kernel", central_frame_init(kernel, tb.t)?)?
        }
        (EmbedMethod::Tubelet, EmbedInit::Random) => {}
    }

    let names: Vec<String> = model.params().keys().cloned().collect();
    for name in names {
        let copied = name == "embed.bias"
            || name.starts_with("norm.")
            || (name == "embed.cls" && image_cls)
            || (name.starts_with("layers.") && !name.contains(".temporal_"));
        if !copied {
            continue;
        }
        let src = get(&name)?;
        let dst = model.param(&name).expect("listed above");
        if src.shape() != dst.shape() {
            return Err(incompatible(&name, dst.shape(), src.shape()));
        }
        model.set_param(&name, src.clone())?;
    }
    if cfg.variant == Variant::FactorisedSelfAttention {
        init_model3_temporal(&mut model)?;
    }
    Ok(model)
}
