//! Closed-form parameter and FLOP counts.
//!
//! FLOP conventions: a multiply-add is 2 FLOPs; softmax costs 5 FLOPs per
//! element (the `1/√d_k` scaling included), layer norm 8 and GELU 10.
//! Bias and residual additions, positional additions and pooling are not
//! counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelConfig, TokenCount, Variant, MLP_RATIO};

pub const SOFTMAX_FLOPS: u64 = 5;
pub const LAYERNORM_FLOPS: u64 = 8;
pub const GELU_FLOPS: u64 = 10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub embedding: u64,
    /// Query, key, value and output projections.
    pub attention_proj: u64,
    /// `QKᵀ`, softmax and the product with `V`; the part quadratic in
    /// sequence length.
    pub attention_scores: u64,
    /// Both MLP matmuls and the GELU.
    pub mlp: u64,
    pub norms: u64,
    pub heads: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding + self.attention_proj + self.attention_scores + self.mlp + self.norms + self.heads
    }

    fn add(&mut self, o: FlopBreakdown) {
        self.embedding += o.embedding;
        self.attention_proj += o.attention_proj;
        self.attention_scores += o.attention_scores;
        self.mlp += o.mlp;
        self.norms += o.norms;
        self.heads += o.heads;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub variant: Variant,
    pub tokens: TokenCount,
    pub params: u64,
    /// Single forward pass of one view.
    pub flops: u64,
    pub breakdown: FlopBreakdown,
    /// The part of `flops` spent in the Model 2 temporal encoder.
    pub temporal_encoder_flops: u64,
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Parameters of one pre-norm encoder layer of width `d`.
fn layer_params(d: u64) -> u64 {
    let m = u(MLP_RATIO) * d;
    let norms = 2 * 2 * d;
    let msa = 4 * (d * d + d);
    let mlp = (d * m + m) + (m * d + d);
    norms + msa + mlp
}

pub fn count_params(cfg: &ModelConfig) -> Result<u64> {
    cfg.validate()?;
    let g = cfg.grid()?;
    let d = u(cfg.dim());
    let cls = u(usize::from(cfg.use_cls));
    let (nt, s) = (u(g.nt), u(g.spatial()));
    let embed = u(cfg.patch_len()) * d + d;
    let heads: u64 = cfg.num_classes.iter().map(|&k| d * u(k) + u(k)).sum();
    let final_norm = 2 * d;
    let body = match cfg.variant {
        Variant::SpatioTemporal | Variant::FactorisedDotProduct => {
            (nt * s + cls) * d + cls * d + u(cfg.layers()) * layer_params(d)
        }
        Variant::FactorisedSelfAttention => {
            let temporal_block = 2 * d + 4 * (d * d + d);
            nt * s * d + u(cfg.layers()) * (layer_params(d) + temporal_block)
        }
        Variant::FactorisedEncoder => {
            let spatial = (s + cls) * d + cls * d + u(cfg.spatial_depth()) * layer_params(d);
            let lt = u(cfg.temporal_depth());
            let temporal = if lt == 0 {
                0
            } else {
                d + (nt + 1) * d + lt * layer_params(d) + 2 * d
            };
            spatial + temporal
        }
    };
    Ok(embed + body + final_norm + heads)
}

/// FLOPs of `m` independent sequences of length `n` through one layer's
/// norms, projections and MLP (everything but the token mixing).
fn token_wise(m: u64, n: u64, d: u64) -> FlopBreakdown {
    let h = u(MLP_RATIO) * d;
    let tokens = m * n;
    FlopBreakdown {
        attention_proj: tokens * 4 * 2 * d * d,
        mlp: tokens * (2 * 2 * d * h + GELU_FLOPS * h),
        norms: tokens * 2 * LAYERNORM_FLOPS * d,
        ..FlopBreakdown::default()
    }
}

/// Token mixing of `heads` heads of width `dk` over `m` sequences of length `n`.
fn mixing(m: u64, n: u64, heads: u64, dk: u64) -> u64 {
    m * heads * (2 * n * n * dk + SOFTMAX_FLOPS * n * n + 2 * n * n * dk)
}

fn encoder(layers: u64, m: u64, n: u64, d: u64, heads: u64) -> FlopBreakdown {
    let mut b = token_wise(m, n, d);
    b.attention_scores = mixing(m, n, heads, d / heads);
    let mut total = FlopBreakdown::default();
    for _ in 0..layers {
        total.add(b);
    }
    total.norms += m * n * LAYERNORM_FLOPS * d;
    total
}

pub fn count_flops(cfg: &ModelConfig) -> Result<CostReport> {
    let params = count_params(cfg)?;
    let tokens = cfg.count_tokens()?;
    let g = cfg.grid()?;
    let d = u(cfg.dim());
    let heads = u(cfg.heads());
    let dk = d / heads;
    let cls = u(usize::from(cfg.use_cls));
    let (nt, s) = (u(g.nt), u(g.spatial()));
    let layers = u(cfg.layers());
    let classes: u64 = cfg.num_classes.iter().map(|&k| u(k)).sum();

    let mut b = FlopBreakdown {
        embedding: 2 * nt * s * u(cfg.patch_len()) * d,
        heads: 2 * d * classes,
        ..FlopBreakdown::default()
    };
    let mut temporal_encoder_flops = 0;
    match cfg.variant {
        Variant::SpatioTemporal => b.add(encoder(layers, 1, nt * s + cls, d, heads)),
        Variant::FactorisedEncoder => {
            b.add(encoder(u(cfg.spatial_depth()), nt, s + cls, d, heads));
            let lt = u(cfg.temporal_depth());
            if lt > 0 {
                let t = encoder(lt, 1, nt + 1, d, heads);
                temporal_encoder_flops = t.total();
                b.add(t);
            }
        }
        Variant::FactorisedSelfAttention => {
            let n = nt * s;
            let mut per_layer = token_wise(1, n, d);
            // second norm and projection set for the temporal block
            per_layer.norms += n * LAYERNORM_FLOPS * d;
            per_layer.attention_proj += n * 4 * 2 * d * d;
            per_layer.attention_scores = mixing(nt, s, heads, dk) + mixing(s, nt, heads, dk);
            for _ in 0..layers {
                b.add(per_layer);
            }
            b.norms += n * LAYERNORM_FLOPS * d;
        }
        Variant::FactorisedDotProduct => {
            let n = nt * s;
            let mut per_layer = token_wise(1, n, d);
            per_layer.attention_scores = mixing(nt, s, heads / 2, dk) + mixing(s, nt, heads / 2, dk);
            for _ in 0..layers {
                b.add(per_layer);
            }
            b.norms += n * LAYERNORM_FLOPS * d;
        }
    }
    Ok(CostReport {
        variant: cfg.variant,
        tokens,
        params,
        flops: b.total(),
        breakdown: b,
        temporal_encoder_flops,
    })
}

/// One row per configuration, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CostReport>,
}

pub const COLUMNS: [&str; 11] = [
    "variant",
    "tokens",
    "params",
    "gflops",
    "flops",
    "embedding",
    "attention_proj",
    "attention_scores",
    "mlp",
    "norms",
    "heads",
];

pub fn emit_comparison(cfgs: &[ModelConfig]) -> Result<Comparison> {
    Ok(Comparison {
        rows: cfgs.iter().map(count_flops).collect::<Result<_>>()?,
    })
}

impl Comparison {
    fn fields(r: &CostReport) -> [String; 11] {
        let b = r.breakdown;
        [
            r.variant.number().to_string(),
            r.tokens.sequence.to_string(),
            r.params.to_string(),
            (r.flops as f64 / 1e9).to_string(),
            r.flops.to_string(),
            b.embedding.to_string(),
            b.attention_proj.to_string(),
            b.attention_scores.to_string(),
            b.mlp.to_string(),
            b.norms.to_string(),
            b.heads.to_string(),
        ]
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::invalid("csv", e.to_string());
        w.write_record(COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(Self::fields(r)).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::invalid("csv", e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// Human-readable table with params in millions and GFLOPs.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:<8} {:>7} {:>12} {:>10} {:>10} {:>10} {:>10} {:>10}\n",
            "variant", "tokens", "params(M)", "GFLOPs", "attn-mix", "attn-proj", "mlp", "embed"
        );
        let g = |x: u64| x as f64 / 1e9;
        for r in &self.rows {
            let b = r.breakdown;
            let _ = writeln!(
                out,
                "{:<8} {:>7} {:>12.3} {:>10.1} {:>10.1} {:>10.1} {:>10.1} {:>10.1}",
                r.variant,
                r.tokens.sequence,
                r.params as f64 / 1e6,
                g(r.flops),
                g(b.attention_scores),
                g(b.attention_proj),
                g(b.mlp),
                g(b.embedding)
            );
        }
        out
    }
}

/// The configuration re-targeted to another variant: class tokens are
/// dropped where unsupported and the Model 2 depths reset to defaults.
pub fn as_variant(cfg: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut c = cfg.clone();
    if c.variant == Variant::FactorisedEncoder && variant != Variant::FactorisedEncoder {
        c.spatial_layers = None;
        c.temporal_layers = None;
    }
    c.variant = variant;
    if matches!(variant, Variant::FactorisedSelfAttention | Variant::FactorisedDotProduct) {
        c.use_cls = false;
    }
    c
}
