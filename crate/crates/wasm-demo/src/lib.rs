//! Browser bindings: the variant cost table, per-variant attention
//! neighbourhoods of a token, and synthetic motion clips.

use wasm_bindgen::prelude::*;

use vivit::analysis::{as_variant, emit_comparison};
use vivit::harness::{DatasetSpec, Direction};
use vivit::models::{Backbone, EmbedMethod, InputDims, ModelConfig, Variant};
use vivit::tokenizer::{Grid, Tubelet};
use vivit::RngState;

fn js_err(e: vivit::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn backbone(name: &str) -> Result<Backbone, JsValue> {
    match name {
        "B" => Ok(Backbone::Base),
        "L" => Ok(Backbone::Large),
        "H" => Ok(Backbone::Huge),
        other => Err(JsValue::from_str(&format!("unknown backbone `{other}`"))),
    }
}

/// CSV of parameters and FLOPs for all four variants of one input setting.
#[wasm_bindgen]
pub fn cost_table(
    backbone_name: &str,
    frames: usize,
    size: usize,
    tubelet_t: usize,
    patch: usize,
    classes: usize,
) -> Result<String, JsValue> {
    let base = ModelConfig {
        variant: Variant::SpatioTemporal,
        backbone: backbone(backbone_name)?,
        tubelet: Tubelet::new(tubelet_t, patch, patch),
        input: InputDims { frames, height: size, width: size, channels: 3 },
        embed: EmbedMethod::Tubelet,
        spatial_layers: None,
        temporal_layers: None,
        num_classes: vec![classes],
        use_cls: true,
    };
    let cfgs: Vec<ModelConfig> = Variant::ALL.iter().map(|&v| as_variant(&base, v)).collect();
    emit_comparison(&cfgs).and_then(|c| c.to_csv()).map_err(js_err)
}

/// For the token at `(t, h, w)` of an `nt × nh × nw` grid, one byte per
/// token: bit 0 set if it is attended in the spatial stage of `variant`,
/// bit 1 in the temporal stage. Model 1 sets both bits for every token.
#[wasm_bindgen]
pub fn neighbourhood(variant: u8, nt: usize, nh: usize, nw: usize, t: usize, h: usize, w: usize) -> Result<Vec<u8>, JsValue> {
    let grid = Grid { nt, nh, nw };
    if t >= nt || h >= nh || w >= nw {
        return Err(JsValue::from_str("query token lies outside the grid"));
    }
    let mut out = vec![0u8; grid.len()];
    for tt in 0..nt {
        for hh in 0..nh {
            for ww in 0..nw {
                let same_frame = tt == t;
                let same_site = hh == h && ww == w;
                out[grid.index(tt, hh, ww)] = match variant {
                    1 => 3,
                    // the temporal encoder sees summaries of whole frames
                    2 => u8::from(same_frame) | 2,
                    3 | 4 => u8::from(same_frame) | (u8::from(same_site) << 1),
                    _ => return Err(JsValue::from_str("variant must be 1 to 4")),
                };
            }
        }
    }
    Ok(out)
}

/// A `frames × 32 × 32` motion clip as row-major grey levels in [0, 1];
/// `direction` is 0 left, 1 right, 2 up, 3 down.
#[wasm_bindgen]
pub fn motion_clip(direction: usize, seed: u64, reversed: bool) -> Result<Vec<f32>, JsValue> {
    let dir = Direction::from_label(direction).ok_or_else(|| JsValue::from_str("direction must be 0 to 3"))?;
    let spec = DatasetSpec::default();
    let mut rng = RngState::new(seed);
    let clip = spec
        .render(dir, spec.frames, spec.height, spec.width, &mut rng)
        .map_err(js_err)?;
    let clip = if reversed { clip.reversed() } else { clip };
    Ok(clip.frames().data().to_vec())
}

/// Label of the class a time-reversed clip of `direction` belongs to.
#[wasm_bindgen]
pub fn reversed_label(direction: usize) -> Result<usize, JsValue> {
    Direction::from_label(direction)
        .map(|d| d.opposite().label())
        .ok_or_else(|| JsValue::from_str("direction must be 0 to 3"))
}
