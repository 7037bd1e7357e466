//! Finite-difference checks of every tape primitive and of the four model
//! variants at a tiny size, in f64.

use crate::error::Result;
use crate::init::random_model;
use crate::models::{Backbone, CustomBackbone, EmbedMethod, InputDims, Mode, ModelConfig, Variant};
use crate::tensor::{grad_check_many, GradCheckReport, Probe, RngState, Tape, Tensor, Var};
use crate::tokenizer::{Tubelet, VideoClip};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
const STEP: f64 = 1e-5;
const MODEL_COORDS_PER_TENSOR: usize = 8;

#[derive(Clone, Debug)]
pub struct GradCheckCase {
    pub name: String,
    pub report: GradCheckReport,
}

impl GradCheckCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

fn rand(shape: &[usize], rng: &mut RngState) -> Tensor<f64> {
    Tensor::random_uniform(shape.to_vec(), -1.0, 1.0, rng)
}

/// `Σ w ⊙ y` with fixed random `w`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, rng: &mut RngState) -> Result<Var> {
    let w = tape.constant(rand(tape.shape(y), rng));
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

type OpFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("matmul", vec![vec![2, 3, 4], vec![4, 5]], |t, v| t.matmul(v[0], v[1])),
        ("matmul_nt", vec![vec![2, 3, 4], vec![2, 5, 4]], |t, v| t.matmul_nt(v[0], v[1])),
        ("add", vec![vec![3, 4], vec![4]], |t, v| t.add(v[0], v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |t, v| t.mul(v[0], v[1])),
        ("scale", vec![vec![3, 4]], |t, v| t.scale(v[0], -1.7)),
        ("select_rows", vec![vec![3, 4], vec![3, 4]], |t, v| {
            t.select_rows(v[0], v[1], &[true, false, true])
        }),
        ("softmax", vec![vec![3, 5]], |t, v| t.softmax(v[0])),
        ("layernorm", vec![vec![3, 6], vec![6], vec![6]], |t, v| {
            t.layernorm(v[0], v[1], v[2], crate::tensor::ops::LAYERNORM_EPS)
        }),
        ("gelu", vec![vec![4, 5]], |t, v| t.gelu(v[0])),
        ("reshape", vec![vec![2, 6]], |t, v| t.reshape(v[0], &[3, 4])),
        ("permute", vec![vec![2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        ("slice", vec![vec![3, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
        ("concat", vec![vec![2, 3], vec![2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        ("expand", vec![vec![2, 3]], |t, v| t.expand(v[0], 3)),
        ("mean", vec![vec![3, 4, 2]], |t, v| t.mean(v[0], 1)),
        ("sum", vec![vec![3, 4]], |t, v| t.sum(v[0])),
    ]
}

fn check_primitives(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut out = Vec::new();
    for (i, (name, shapes, op)) in primitive_cases().into_iter().enumerate() {
        let root = RngState::new(seed).fork(i as u64);
        let mut rng = root.fork(0);
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand(s, &mut rng)).collect();
        let report = grad_check_many(
            |tape, vars| {
                let y = op(tape, vars)?;
                let mut w = root.fork(1);
                project(tape, y, &mut w)
            },
            &inputs,
            STEP,
            Probe::All,
        )?;
        out.push(GradCheckCase { name: name.to_string(), report });
    }

    let mut rng = RngState::new(seed).fork(100);
    let logits = rand(&[3, 4], &mut rng);
    let targets = Tensor::<f64>::from_fn([3, 4], |i| [0.7, 0.1, 0.1, 0.1][i % 4]);
    let report = grad_check_many(
        |tape, vars| tape.soft_cross_entropy(vars[0], &targets),
        &[logits],
        STEP,
        Probe::All,
    )?;
    out.push(GradCheckCase { name: "soft_cross_entropy".into(), report });
    Ok(out)
}

/// The tiny configuration used for model-level checks: two layers, width 16.
pub fn tiny_model_config(variant: Variant) -> ModelConfig {
    let m2 = variant == Variant::FactorisedEncoder;
    ModelConfig {
        variant,
        backbone: Backbone::Custom(CustomBackbone { layers: 2, heads: 2, dim: 16 }),
        tubelet: Tubelet::new(2, 4, 4),
        input: InputDims { frames: 4, height: 8, width: 8, channels: 1 },
        embed: EmbedMethod::Tubelet,
        spatial_layers: m2.then_some(2),
        temporal_layers: m2.then_some(2),
        num_classes: vec![3],
        use_cls: matches!(variant, Variant::SpatioTemporal | Variant::FactorisedEncoder),
    }
}

fn check_model(variant: Variant, seed: u64) -> Result<GradCheckCase> {
    let cfg = tiny_model_config(variant);
    // away from the initial point, where zero biases and class tokens with
    // near-constant LayerNorm inputs make finite differences unreliable
    let mut model = random_model::<f64>(&cfg, seed)?;
    let mut jitter = RngState::new(seed).fork(11);
    for (_, p) in model.params_mut() {
        let noise = rand(p.shape(), &mut jitter);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += 0.3 * n;
        }
    }
    let mut rng = RngState::new(seed).fork(7);
    let clips: Vec<VideoClip> = (0..2)
        .map(|_| VideoClip::new(Tensor::<f32>::random_uniform([4, 8, 8, 1], 0.0, 1.0, &mut rng)))
        .collect::<Result<_>>()?;
    let targets = Tensor::<f64>::from_f64([2, 3], &[0.8, 0.1, 0.1, 0.2, 0.2, 0.6])?;
    let inputs: Vec<Tensor<f64>> = model.params().values().cloned().collect();
    let report = grad_check_many(
        |tape, vars| {
            let bound = model.bind_vars(vars)?;
            let logits = model.forward(tape, &bound, &clips, Mode::Eval)?;
            tape.soft_cross_entropy(logits[0], &targets)
        },
        &inputs,
        STEP,
        Probe::Sample {
            per_tensor: MODEL_COORDS_PER_TENSOR,
            seed,
        },
    )?;
    Ok(GradCheckCase {
        name: variant.to_string(),
        report,
    })
}

/// Every primitive followed by the four tiny models.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckCase>> {
    let mut cases = check_primitives(seed)?;
    for v in Variant::ALL {
        cases.push(check_model(v, seed)?);
    }
    Ok(cases)
}
