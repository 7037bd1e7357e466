//! The four video transformer variants, their configuration and the named
//! parameter set shared by initialisation, training and checkpoints.

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::attention::{
    factorised_dot_layer, factorised_sa_layer, transformer_layer, LayerNormWeights, Linear,
    MlpWeights, MsaWeights, TransformerLayerWeights,
};
use crate::error::{Error, Result};
use crate::regularizers::stochastic_depth_gate;
use crate::tensor::{RngState, Scalar, Tape, Tensor, Var};
use crate::tokenizer::{extract_frame_patches, extract_tubelets, tubelet_grid, Grid, Tubelet, VideoClip};

/// MLP hidden width as a multiple of the model width.
pub const MLP_RATIO: usize = 4;

/// Temporal encoder depth of the factorised encoder when not configured.
pub const DEFAULT_TEMPORAL_LAYERS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Variant {
    /// Model 1: every layer attends over all spatio-temporal tokens.
    SpatioTemporal,
    /// Model 2: per-frame spatial encoder followed by a temporal encoder.
    FactorisedEncoder,
    /// Model 3: spatial then temporal MSA inside every layer.
    FactorisedSelfAttention,
    /// Model 4: half the heads spatial, half temporal.
    FactorisedDotProduct,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::SpatioTemporal,
        Variant::FactorisedEncoder,
        Variant::FactorisedSelfAttention,
        Variant::FactorisedDotProduct,
    ];

    pub fn number(self) -> u8 {
        self as u8 + 1
    }
}

impl TryFrom<u8> for Variant {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1..=4 => Ok(Variant::ALL[v as usize - 1]),
            _ => Err(format!("model variant must be 1, 2, 3 or 4, got {v}")),
        }
    }
}

impl From<Variant> for u8 {
    fn from(v: Variant) -> u8 {
        v.number()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Model {}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomBackbone {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
}

/// Encoder size; `"B"`, `"L"`, `"H"` or an explicit `{ layers, heads, dim }`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BackboneRepr", into = "BackboneRepr")]
pub enum Backbone {
    Base,
    Large,
    Huge,
    Custom(CustomBackbone),
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum BackboneRepr {
    Preset(String),
    Custom(CustomBackbone),
}

impl TryFrom<BackboneRepr> for Backbone {
    type Error = String;

    fn try_from(r: BackboneRepr) -> std::result::Result<Self, String> {
        match r {
            BackboneRepr::Preset(s) => match s.as_str() {
                "B" => Ok(Backbone::Base),
                "L" => Ok(Backbone::Large),
                "H" => Ok(Backbone::Huge),
                other => Err(format!("unknown backbone `{other}` (expected B, L, H or a table)")),
            },
            BackboneRepr::Custom(c) => Ok(Backbone::Custom(c)),
        }
    }
}

impl From<Backbone> for BackboneRepr {
    fn from(b: Backbone) -> Self {
        match b {
            Backbone::Base => BackboneRepr::Preset("B".into()),
            Backbone::Large => BackboneRepr::Preset("L".into()),
            Backbone::Huge => BackboneRepr::Preset("H".into()),
            Backbone::Custom(c) => BackboneRepr::Custom(c),
        }
    }
}

impl Backbone {
    /// `(layers, heads, dim)`
    pub fn dims(self) -> (usize, usize, usize) {
        match self {
            Backbone::Base => (12, 12, 768),
            Backbone::Large => (24, 16, 1024),
            Backbone::Huge => (32, 16, 1280),
            Backbone::Custom(c) => (c.layers, c.heads, c.dim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMethod {
    /// 2D patches of uniformly sampled frames; the tubelet's `t` is the
    /// sampling stride, so `nt = ⌊T/t⌋` frames are used.
    Uniform,
    Tubelet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputDims {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: Backbone,
    pub tubelet: Tubelet,
    pub input: InputDims,
    pub embed: EmbedMethod,
    /// Factorised encoder only; defaults to the backbone depth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spatial_layers: Option<usize>,
    /// Factorised encoder only; 0 selects the average-pooling baseline.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temporal_layers: Option<usize>,
    /// One classifier head per entry.
    pub num_classes: Vec<usize>,
    #[serde(default)]
    pub use_cls: bool,
}

/// Token grid of a configuration; `sequence` counts the class tokens that
/// enter the first encoder as well.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCount {
    pub nt: usize,
    pub nh: usize,
    pub nw: usize,
    pub tokens: usize,
    pub sequence: usize,
}

impl ModelConfig {
    pub fn layers(&self) -> usize {
        self.backbone.dims().0
    }

    pub fn heads(&self) -> usize {
        self.backbone.dims().1
    }

    pub fn dim(&self) -> usize {
        self.backbone.dims().2
    }

    pub fn spatial_depth(&self) -> usize {
        self.spatial_layers.unwrap_or(self.layers())
    }

    pub fn temporal_depth(&self) -> usize {
        self.temporal_layers.unwrap_or(DEFAULT_TEMPORAL_LAYERS)
    }

    pub fn grid(&self) -> Result<Grid> {
        let i = self.input;
        let tb = self.tubelet;
        if tb.t == 0 || tb.h == 0 || tb.w == 0 {
            return Err(Error::Config("tubelet dimensions must be positive".into()));
        }
        tubelet_grid((i.frames, i.height, i.width), tb)
            .map_err(|e| Error::Config(format!("token grid: {e}")))
    }

    /// Flattened length of one patch or tubelet.
    pub fn patch_len(&self) -> usize {
        let tb = self.tubelet;
        let t = match self.embed {
            EmbedMethod::Uniform => 1,
            EmbedMethod::Tubelet => tb.t,
        };
        t * tb.h * tb.w * self.input.channels
    }

    pub fn embed_kernel_shape(&self) -> Vec<usize> {
        let tb = self.tubelet;
        let (c, d) = (self.input.channels, self.dim());
        match self.embed {
            EmbedMethod::Uniform => vec![tb.h, tb.w, c, d],
            EmbedMethod::Tubelet => vec![tb.t, tb.h, tb.w, c, d],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (layers, heads, d) = self.backbone.dims();
        let cfg = |msg: String| Err(Error::Config(msg));
        if layers == 0 || heads == 0 || d == 0 {
            return cfg("backbone layers, heads and dim must be positive".into());
        }
        if d % heads != 0 {
            return cfg(format!("model width {d} is not divisible by {heads} heads"));
        }
        let i = self.input;
        if i.frames == 0 || i.height == 0 || i.width == 0 || i.channels == 0 {
            return cfg("input dimensions must be positive".into());
        }
        self.grid()?;
        if self.num_classes.is_empty() || self.num_classes.contains(&0) {
            return cfg("num_classes needs at least one head with a positive class count".into());
        }
        match self.variant {
            Variant::FactorisedEncoder => {
                if self.spatial_layers == Some(0) {
                    return cfg("spatial_layers must be positive".into());
                }
            }
            v => {
                if self.spatial_layers.is_some() || self.temporal_layers.is_some() {
                    return cfg(format!(
                        "spatial_layers/temporal_layers only apply to Model 2, not {v}"
                    ));
                }
            }
        }
        match self.variant {
            Variant::FactorisedSelfAttention | Variant::FactorisedDotProduct if self.use_cls => {
                cfg(format!("{} does not use a classification token", self.variant))
            }
            Variant::FactorisedDotProduct if heads % 2 != 0 => cfg(format!(
                "Model 4 splits heads between space and time and needs an even count, got {heads}"
            )),
            _ => Ok(()),
        }
    }

    pub fn count_tokens(&self) -> Result<TokenCount> {
        let g = self.grid()?;
        let cls = usize::from(self.use_cls);
        let sequence = match self.variant {
            Variant::FactorisedEncoder => g.nt * (g.spatial() + cls),
            _ => g.len() + cls,
        };
        Ok(TokenCount {
            nt: g.nt,
            nh: g.nh,
            nw: g.nw,
            tokens: g.len(),
            sequence,
        })
    }

    /// Every parameter tensor of the model, by name, in canonical order.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let g = self.grid()?;
        let d = self.dim();
        let cls = usize::from(self.use_cls);
        let mut out = Vec::new();
        out.push(("embed.kernel".to_string(), self.embed_kernel_shape()));
        out.push(("embed.bias".to_string(), vec![d]));
        let pos_rows = match self.variant {
            // one table shared by every frame of the spatial encoder
            Variant::FactorisedEncoder => g.spatial() + cls,
            _ => g.len() + cls,
        };
        out.push(("embed.pos".to_string(), vec![pos_rows, d]));
        if self.use_cls {
            out.push(("embed.cls".to_string(), vec![d]));
        }
        let depth = match self.variant {
            Variant::FactorisedEncoder => self.spatial_depth(),
            _ => self.layers(),
        };
        let temporal_msa = self.variant == Variant::FactorisedSelfAttention;
        for l in 0..depth {
            push_layer(&mut out, &format!("layers.{l}"), d, temporal_msa);
        }
        push_norm(&mut out, "norm", d);
        if self.variant == Variant::FactorisedEncoder && self.temporal_depth() > 0 {
            out.push(("temporal.cls".to_string(), vec![d]));
            out.push(("temporal.pos".to_string(), vec![g.nt + 1, d]));
            for l in 0..self.temporal_depth() {
                push_layer(&mut out, &format!("temporal.layers.{l}"), d, false);
            }
            push_norm(&mut out, "temporal.norm", d);
        }
        for (k, &classes) in self.num_classes.iter().enumerate() {
            out.push((format!("heads.{k}.weight"), vec![d, classes]));
            out.push((format!("heads.{k}.bias"), vec![classes]));
        }
        Ok(out)
    }
}

fn push_norm(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    out.push((format!("{prefix}.gamma"), vec![d]));
    out.push((format!("{prefix}.beta"), vec![d]));
}

fn push_linear(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, i: usize, o: usize) {
    out.push((format!("{prefix}.weight"), vec![i, o]));
    out.push((format!("{prefix}.bias"), vec![o]));
}

fn push_msa(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize) {
    for role in ["query", "key", "value", "out"] {
        push_linear(out, &format!("{prefix}.{role}"), d, d);
    }
}

fn push_layer(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, d: usize, temporal: bool) {
    push_norm(out, &format!("{prefix}.ln1"), d);
    push_msa(out, &format!("{prefix}.msa"), d);
    if temporal {
        push_norm(out, &format!("{prefix}.temporal_ln"), d);
        push_msa(out, &format!("{prefix}.temporal_msa"), d);
    }
    push_norm(out, &format!("{prefix}.ln2"), d);
    push_linear(out, &format!("{prefix}.mlp.fc1"), d, MLP_RATIO * d);
    push_linear(out, &format!("{prefix}.mlp.fc2"), MLP_RATIO * d, d);
}

/// A configured model and its named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ViViT<T> {
    config: ModelConfig,
    params: IndexMap<String, Tensor<T>>,
}

/// Whether a forward pass applies stochastic depth.
pub enum Mode<'a> {
    Eval,
    Train { drop_rate: f64, rng: &'a mut RngState },
}

/// The temporal encoder of Model 2 as bound to a tape.
#[derive(Clone, Debug)]
pub struct TemporalEncoder {
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<TransformerLayerWeights>,
    pub norm: LayerNormWeights,
}

/// Model parameters as tape variables.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub kernel: Var,
    pub bias: Var,
    pub pos: Var,
    pub cls: Option<Var>,
    pub layers: Vec<TransformerLayerWeights>,
    pub norm: LayerNormWeights,
    pub temporal: Option<TemporalEncoder>,
    pub heads: Vec<Linear>,
    /// Every bound variable with its parameter name, in parameter order.
    pub vars: Vec<(String, Var)>,
}

impl<T: Scalar> ViViT<T> {
    /// Checks that `params` holds exactly the tensors the config calls for.
    pub fn new(config: ModelConfig, params: IndexMap<String, Tensor<T>>) -> Result<Self> {
        let shapes = config.param_shapes()?;
        if params.len() != shapes.len() {
            if let Some(extra) = params.keys().find(|k| !shapes.iter().any(|(n, _)| n == *k)) {
                return Err(Error::Incompatible {
                    name: extra.clone(),
                    expected: "no such parameter".into(),
                    found: format!("{:?}", params[extra].shape()),
                });
            }
        }
        let mut ordered = IndexMap::with_capacity(shapes.len());
        for (name, shape) in shapes {
            let t = params.get(&name).ok_or_else(|| Error::Incompatible {
                name: name.clone(),
                expected: format!("{shape:?}"),
                found: "missing".into(),
            })?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Incompatible {
                    name,
                    expected: format!("{shape:?}"),
                    found: format!("{:?}", t.shape()),
                });
            }
            t.ensure_finite("model parameter")?;
            ordered.insert(name, t.clone());
        }
        Ok(ViViT {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<T>> {
        &self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Replace one tensor, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::Incompatible {
            name: name.to_string(),
            expected: "existing parameter".into(),
            found: "missing".into(),
        })?;
        if slot.shape() != value.shape() {
            return Err(Error::Incompatible {
                name: name.to_string(),
                expected: format!("{:?}", slot.shape()),
                found: format!("{:?}", value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ViViT<U> {
        ViViT {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Put every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundModel {
        let vars: Vec<Var> = self
            .params
            .values()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        self.bind_vars(&vars).expect("one variable per parameter")
    }

    /// Interpret `vars`, already on a tape, as this model's parameters in
    /// parameter order.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        if vars.len() != self.params.len() {
            return Err(Error::invalid(
                "bind",
                format!("{} variables for {} parameters", vars.len(), self.params.len()),
            ));
        }
        let mut map = IndexMap::with_capacity(self.params.len());
        for (name, &v) in self.params.keys().zip(vars) {
            map.insert(name.as_str(), v);
        }
        let get = |n: &str| map[n];
        let norm = |p: &str| LayerNormWeights {
            gamma: get(&format!("{p}.gamma")),
            beta: get(&format!("{p}.beta")),
        };
        let linear = |p: &str| Linear {
            weight: get(&format!("{p}.weight")),
            bias: get(&format!("{p}.bias")),
        };
        let heads = self.config.heads();
        let msa = |p: &str| MsaWeights {
            query: linear(&format!("{p}.query")),
            key: linear(&format!("{p}.key")),
            value: linear(&format!("{p}.value")),
            out: linear(&format!("{p}.out")),
            heads,
        };
        let layer = |p: &str| TransformerLayerWeights {
            ln1: norm(&format!("{p}.ln1")),
            msa: msa(&format!("{p}.msa")),
            temporal: map
                .contains_key(format!("{p}.temporal_ln.gamma").as_str())
                .then(|| (norm(&format!("{p}.temporal_ln")), msa(&format!("{p}.temporal_msa")))),
            ln2: norm(&format!("{p}.ln2")),
            mlp: MlpWeights {
                fc1: linear(&format!("{p}.mlp.fc1")),
                fc2: linear(&format!("{p}.mlp.fc2")),
            },
        };
        let count = |prefix: &str| {
            (0..)
                .take_while(|l| map.contains_key(format!("{prefix}.{l}.ln1.gamma").as_str()))
                .count()
        };
        let layers = (0..count("layers")).map(|l| layer(&format!("layers.{l}"))).collect();
        let temporal = map.contains_key("temporal.cls").then(|| TemporalEncoder {
            cls: get("temporal.cls"),
            pos: get("temporal.pos"),
            layers: (0..count("temporal.layers"))
                .map(|l| layer(&format!("temporal.layers.{l}")))
                .collect(),
            norm: norm("temporal.norm"),
        });
        let vars = self.params.keys().cloned().zip(vars.iter().copied()).collect();
        Ok(BoundModel {
            kernel: get("embed.kernel"),
            bias: get("embed.bias"),
            pos: get("embed.pos"),
            cls: map.get("embed.cls").copied(),
            layers,
            norm: norm("norm"),
            temporal,
            heads: (0..self.config.num_classes.len())
                .map(|k| linear(&format!("heads.{k}")))
                .collect(),
            vars,
        })
    }

    /// Patches of every clip stacked into `[B, N, patch_len]`.
    pub fn patches(&self, clips: &[VideoClip]) -> Result<Tensor<T>> {
        let cfg = &self.config;
        let i = cfg.input;
        let grid = cfg.grid()?;
        if clips.is_empty() {
            return Err(Error::invalid("forward", "empty batch"));
        }
        let mut data = Vec::with_capacity(clips.len() * grid.len() * cfg.patch_len());
        for clip in clips {
            if clip.dims() != (i.frames, i.height, i.width, i.channels) {
                return Err(Error::shape(
                    "forward",
                    clip.frames().shape(),
                    &[i.frames, i.height, i.width, i.channels],
                ));
            }
            let (_, p) = match cfg.embed {
                EmbedMethod::Uniform => {
                    extract_frame_patches::<T>(clip, grid.nt, (cfg.tubelet.h, cfg.tubelet.w))?
                }
                EmbedMethod::Tubelet => extract_tubelets::<T>(clip, cfg.tubelet)?,
            };
            data.extend_from_slice(p.data());
        }
        Tensor::new([clips.len(), grid.len(), cfg.patch_len()], data)
    }

    /// Logits `[B, K_h]` for every head.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        clips: &[VideoClip],
        mode: Mode<'_>,
    ) -> Result<Vec<Var>> {
        self.forward_with(tape, bound, clips, mode, false)
    }

    /// As [`ViViT::forward`]; `skip_temporal_msa` bypasses the temporal
    /// sub-block of every Model 3 layer.
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        clips: &[VideoClip],
        mut mode: Mode<'_>,
        skip_temporal_msa: bool,
    ) -> Result<Vec<Var>> {
        let patches = self.patches(clips)?;
        let tokens = tape.constant(patches);
        let tokens = self.embed(tape, bound, tokens)?;
        let features = self.encode(tape, bound, tokens, &mut mode, skip_temporal_msa)?;
        bound
            .heads
            .iter()
            .map(|h| h.apply(tape, features))
            .collect()
    }

    /// `[B, N, P]` patches to `[B, N, d]` tokens (no positions yet).
    pub fn embed(&self, tape: &mut Tape<T>, bound: &BoundModel, patches: Var) -> Result<Var> {
        let kernel = tape.reshape(bound.kernel, &[self.config.patch_len(), self.config.dim()])?;
        let x = tape.matmul(patches, kernel)?;
        tape.add(x, bound.bias)
    }

    /// Token sequence `[B, N, d]` to pooled features `[B, d]`.
    fn encode(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel,
        tokens: Var,
        mode: &mut Mode<'_>,
        skip_temporal_msa: bool,
    ) -> Result<Var> {
        let cfg = &self.config;
        let grid = cfg.grid()?;
        let d = cfg.dim();
        let b = tape.shape(tokens)[0];
        match cfg.variant {
            Variant::SpatioTemporal => {
                let x = prepend_cls(tape, tokens, bound.cls, &[b])?;
                let mut x = tape.add(x, bound.pos)?;
                let depth = bound.layers.len();
                for (l, w) in bound.layers.iter().enumerate() {
                    x = drop_path(tape, x, mode, l + 1, depth, |tape, x| {
                        transformer_layer(tape, x, w)
                    })?;
                }
                let x = bound.norm.apply(tape, x)?;
                readout(tape, x, bound.cls.is_some(), &[b, d])
            }
            Variant::FactorisedEncoder => {
                let x = tape.reshape(tokens, &[b, grid.nt, grid.spatial(), d])?;
                let x = prepend_cls(tape, x, bound.cls, &[b, grid.nt])?;
                let mut x = tape.add(x, bound.pos)?;
                let lt = bound.temporal.as_ref().map_or(0, |t| t.layers.len());
                let depth = bound.layers.len() + lt;
                for (l, w) in bound.layers.iter().enumerate() {
                    x = drop_path(tape, x, mode, l + 1, depth, |tape, x| {
                        transformer_layer(tape, x, w)
                    })?;
                }
                let x = bound.norm.apply(tape, x)?;
                let frames = readout(tape, x, bound.cls.is_some(), &[b, grid.nt, d])?;
                let Some(temporal) = &bound.temporal else {
                    return tape.mean(frames, 1);
                };
                let x = prepend_cls(tape, frames, Some(temporal.cls), &[b])?;
                let mut x = tape.add(x, temporal.pos)?;
                let offset = bound.layers.len();
                for (l, w) in temporal.layers.iter().enumerate() {
                    x = drop_path(tape, x, mode, offset + l + 1, depth, |tape, x| {
                        transformer_layer(tape, x, w)
                    })?;
                }
                let x = temporal.norm.apply(tape, x)?;
                readout(tape, x, true, &[b, d])
            }
            Variant::FactorisedSelfAttention => {
                let x = tape.add(tokens, bound.pos)?;
                let mut x = tape.reshape(x, &[b, grid.nt, grid.spatial(), d])?;
                let depth = bound.layers.len();
                for (l, w) in bound.layers.iter().enumerate() {
                    x = drop_path(tape, x, mode, l + 1, depth, |tape, x| {
                        factorised_sa_layer(tape, x, w, skip_temporal_msa)
                    })?;
                }
                let x = bound.norm.apply(tape, x)?;
                let x = tape.reshape(x, &[b, grid.len(), d])?;
                tape.mean(x, 1)
            }
            Variant::FactorisedDotProduct => {
                let mut x = tape.add(tokens, bound.pos)?;
                let depth = bound.layers.len();
                for (l, w) in bound.layers.iter().enumerate() {
                    x = drop_path(tape, x, mode, l + 1, depth, |tape, x| {
                        factorised_dot_layer(tape, x, grid, w)
                    })?;
                }
                let x = bound.norm.apply(tape, x)?;
                tape.mean(x, 1)
            }
        }
    }

    /// Eval-mode logits of a batch as plain tensors, one `[B, K_h]` per head.
    pub fn predict(&self, clips: &[VideoClip]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let logits = self.forward(&mut tape, &bound, clips, Mode::Eval)?;
        Ok(logits.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// Prepend `cls` (shape `[d]`) to the second-to-last axis of `x`, whose
/// leading axes are `lead`.
fn prepend_cls<T: Scalar>(tape: &mut Tape<T>, x: Var, cls: Option<Var>, lead: &[usize]) -> Result<Var> {
    let Some(cls) = cls else { return Ok(x) };
    let d = tape.shape(cls)[0];
    let mut c = tape.reshape(cls, &[1, d])?;
    for &n in lead.iter().rev() {
        c = tape.expand(c, n)?;
    }
    tape.concat(&[c, x], lead.len())
}

/// Class token state or the mean over tokens, giving shape `out`.
fn readout<T: Scalar>(tape: &mut Tape<T>, x: Var, cls: bool, out: &[usize]) -> Result<Var> {
    let axis = tape.shape(x).len() - 2;
    if cls {
        let first = tape.slice(x, axis, 0, 1)?;
        tape.reshape(first, out)
    } else {
        tape.mean(x, axis)
    }
}

/// Run `layer`; in training, samples whose gate drops layer `index` of
/// `depth` keep their input instead.
fn drop_path<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mode: &mut Mode<'_>,
    index: usize,
    depth: usize,
    layer: impl FnOnce(&mut Tape<T>, Var) -> Result<Var>,
) -> Result<Var> {
    let y = layer(tape, x)?;
    match mode {
        Mode::Train { drop_rate, rng } if *drop_rate > 0.0 => {
            let b = tape.shape(x)[0];
            let keep = (0..b)
                .map(|_| stochastic_depth_gate(index, depth, *drop_rate, rng))
                .collect::<Result<Vec<bool>>>()?;
            if keep.iter().all(|&k| k) {
                Ok(y)
            } else {
                tape.select_rows(x, y, &keep)
            }
        }
        _ => Ok(y),
    }
}
