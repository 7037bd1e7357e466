//! The ten acceptance criteria, one PASS/FAIL line each. Runs without the
//! libtest harness so every line reaches stdout; exits nonzero on any FAIL.

mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use vivit::analysis::{count_flops, count_params};
use vivit::checkpoint::{load_model, save_model, Checkpoint};
use vivit::harness::{gradcheck_suite, multi_view_infer, train, RunConfig, ViewSpec};
use vivit::init::{central_frame_init, inflate_embedding, init_model3_temporal, load_pretrained, random_model, EmbedInit};
use vivit::models::{Backbone, CustomBackbone, EmbedMethod, InputDims, Mode, ModelConfig, Variant, ViViT};
use vivit::regularizers::{label_smooth, mix, one_hot, stochastic_depth_gate};
use vivit::tokenizer::{tubelet_embed, uniform_frame_embed, EmbeddingWeights, Tubelet, VideoClip};
use vivit::{RngState, Tape, Tensor};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn b16x2(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        backbone: Backbone::Base,
        tubelet: Tubelet::new(2, 16, 16),
        input: InputDims { frames: 32, height: 224, width: 224, channels: 3 },
        embed: EmbedMethod::Tubelet,
        spatial_layers: None,
        temporal_layers: None,
        num_classes: vec![400],
        use_cls: matches!(variant, Variant::SpatioTemporal | Variant::FactorisedEncoder),
    }
}

fn within(x: f64, target: f64, frac: f64) -> bool {
    (x - target).abs() <= frac * target
}

fn parameter_parity() -> Outcome {
    let p = |v| count_params(&b16x2(v)).map_err(|e| e.to_string());
    let (m1, m2, m3, m4) = (
        p(Variant::SpatioTemporal)?,
        p(Variant::FactorisedEncoder)?,
        p(Variant::FactorisedSelfAttention)?,
        p(Variant::FactorisedDotProduct)?,
    );
    // Model 4 reads out by pooling, so parity is against Model 1 with the same readout
    let m1_pooled = count_params(&ModelConfig { use_cls: false, ..b16x2(Variant::SpatioTemporal) })
        .map_err(|e| e.to_string())?;
    let ok = m4 == m1_pooled
        && within(m1 as f64, 88.9e6, 0.02)
        && within(m2 as f64, 115.1e6, 0.02)
        && within(m3 as f64, 117.3e6, 0.02);
    check(ok, format!("M1 {m1} (pooled {m1_pooled}), M2 {m2}, M3 {m3}, M4 {m4}"))
}

fn flop_ordering() -> Outcome {
    let f = |v| count_flops(&b16x2(v)).map(|r| r.flops as f64).map_err(|e| e.to_string());
    let (m1, m2, m3, m4) = (
        f(Variant::SpatioTemporal)?,
        f(Variant::FactorisedEncoder)?,
        f(Variant::FactorisedSelfAttention)?,
        f(Variant::FactorisedDotProduct)?,
    );
    let (r2, r4) = (m1 / m2, m1 / m4);
    let ok = m1 > m3 && m3 > m2 && m2 > m4 && within(r2, 455.2 / 284.4, 0.2) && within(r4, 455.2 / 277.1, 0.2);
    check(
        ok,
        format!(
            "GFLOPs M1 {:.1} M3 {:.1} M2 {:.1} M4 {:.1}; M1/M2 {r2:.3} M1/M4 {r4:.3}",
            m1 / 1e9,
            m3 / 1e9,
            m2 / 1e9,
            m4 / 1e9
        ),
    )
}

fn token_arithmetic() -> Outcome {
    let t = b16x2(Variant::SpatioTemporal).count_tokens().map_err(|e| e.to_string())?;
    let tube4 = ModelConfig { tubelet: Tubelet::new(4, 16, 16), ..b16x2(Variant::SpatioTemporal) };
    let uniform8 = ModelConfig { embed: EmbedMethod::Uniform, ..tube4.clone() };
    let a = tube4.count_tokens().map_err(|e| e.to_string())?.tokens;
    let b = uniform8.count_tokens().map_err(|e| e.to_string())?.tokens;
    let nt = uniform8.grid().map_err(|e| e.to_string())?.nt;
    let ok = (t.nt, t.nh, t.nw, t.tokens) == (16, 14, 14, 3136) && a == b && nt == 8;
    check(
        ok,
        format!(
            "grid {}×{}×{} = {}; 8 sampled frames {b} tokens, t=4 tubelets {a}",
            t.nt, t.nh, t.nw, t.tokens
        ),
    )
}

fn rand_clip(shape: [usize; 4], rng: &mut RngState) -> VideoClip {
    VideoClip::new(Tensor::random_uniform(shape, 0.0, 1.0, rng)).expect("valid clip")
}

fn image_config(d: usize) -> ModelConfig {
    ModelConfig {
        variant: Variant::SpatioTemporal,
        backbone: Backbone::Custom(CustomBackbone { layers: 2, heads: 2, dim: d }),
        tubelet: Tubelet::new(1, 4, 4),
        input: InputDims { frames: 1, height: 8, width: 8, channels: 2 },
        embed: EmbedMethod::Uniform,
        spatial_layers: None,
        temporal_layers: None,
        num_classes: vec![3],
        use_cls: true,
    }
}

fn video_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        variant,
        tubelet: Tubelet::new(2, 4, 4),
        input: InputDims { frames: 6, height: 8, width: 8, channels: 2 },
        embed: EmbedMethod::Tubelet,
        use_cls: matches!(variant, Variant::SpatioTemporal | Variant::FactorisedEncoder),
        ..image_config(8)
    }
}

fn init_identities() -> Outcome {
    let err = |e: vivit::Error| e.to_string();
    let mut rng = RngState::new(4);
    let (t, d) = (3, 8);
    let e_img = Tensor::<f64>::random_uniform([4, 4, 2, d], -1.0, 1.0, &mut rng);
    let bias = Tensor::<f64>::random_uniform([d], -1.0, 1.0, &mut rng);
    let weights = |kernel: Tensor<f64>| EmbeddingWeights {
        kernel,
        bias: bias.clone(),
        pos: Tensor::zeros([1, d]),
        cls: None,
    };
    let tb = Tubelet::new(t, 4, 4);

    // (a) central frame init against the 2D embedding of each tubelet's centre frame
    let clip = rand_clip([2 * t, 8, 8, 2], &mut rng);
    let video = tubelet_embed(&clip, &weights(central_frame_init(&e_img, t).map_err(err)?), tb).map_err(err)?;
    let centres: Vec<f32> = (0..2).flat_map(|i| clip.frame(i * t + t / 2).to_vec()).collect();
    let centre_clip = VideoClip::new(Tensor::new([2, 8, 8, 2], centres).map_err(err)?).map_err(err)?;
    let image = uniform_frame_embed(&centre_clip, &weights(e_img.clone()), 2).map_err(err)?;
    let a = video.tokens.max_abs_diff(&image.tokens);

    // (b) inflation on a temporally constant clip
    let still = rand_clip([1, 8, 8, 2], &mut rng).frames().data().repeat(2 * t);
    let still = VideoClip::new(Tensor::new([2 * t, 8, 8, 2], still).map_err(err)?).map_err(err)?;
    let video = tubelet_embed(&still, &weights(inflate_embedding(&e_img, t).map_err(err)?), tb).map_err(err)?;
    let image = uniform_frame_embed(&still, &weights(e_img.clone()), 2).map_err(err)?;
    let b = video.tokens.max_abs_diff(&image.tokens);

    // (c) Model 3 with zeroed temporal MSA against the same network without it
    let cfg = video_config(Variant::FactorisedSelfAttention);
    let mut model = random_model::<f64>(&cfg, 9).map_err(err)?;
    for (_, p) in model.params_mut() {
        let noise = Tensor::<f64>::random_uniform(p.shape().to_vec(), -0.3, 0.3, &mut rng);
        for (x, n) in p.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    init_model3_temporal(&mut model).map_err(err)?;
    let clips = vec![rand_clip([6, 8, 8, 2], &mut rng), rand_clip([6, 8, 8, 2], &mut rng)];
    let run = |skip: bool| -> vivit::Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let out = model.forward_with(&mut tape, &bound, &clips, Mode::Eval, skip)?;
        Ok(tape.value(out[0]).clone())
    };
    let c = run(false).map_err(err)?.max_abs_diff(&run(true).map_err(err)?);

    // (d) pretrained positional rows repeated per frame
    let image_model = random_model::<f64>(&image_config(8), 2).map_err(err)?;
    let ckpt = Checkpoint::from_tensors(image_model.params());
    let video = load_pretrained::<f64>(&ckpt, &video_config(Variant::SpatioTemporal), EmbedInit::Inflate, 3)
        .map_err(err)?;
    let pos = video.param("embed.pos").expect("pos");
    let s = 4;
    let rows: Vec<&[f64]> = pos.data()[d..].chunks(d).collect();
    let repeated = rows.len() == 3 * s
        && (0..3).all(|ti| (0..s).all(|si| rows[ti * s + si].iter().zip(rows[si]).all(|(x, y)| x.to_bits() == y.to_bits())));

    let ok = a < 1e-6 && b < 1e-6 && c < 1e-6 && repeated;
    check(
        ok,
        format!("central {a:.1e}, inflate {b:.1e}, model 3 {c:.1e}, positions repeated bitwise {repeated}"),
    )
}

fn factorisation_oracles() -> Outcome {
    let grids = 24;
    let sa = (0..grids).map(common::factorised_sa_error).fold(0.0, f64::max);
    let dot = (0..grids).map(common::factorised_dot_error).fold(0.0, f64::max);
    check(
        sa < 1e-6 && dot < 1e-6,
        format!("{grids} grids: factorised self-attention {sa:.1e}, factorised dot-product {dot:.1e}"),
    )
}

fn gradient_checks() -> Outcome {
    let start = Instant::now();
    let cases = gradcheck_suite(0).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = cases
        .iter()
        .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
        .expect("non-empty suite");
    let failed: Vec<&str> = cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    check(
        failed.is_empty() && secs < 120.0,
        format!(
            "{} cases in {secs:.1}s, worst {} at {:.2e}, failing {failed:?}",
            cases.len(),
            worst.name,
            worst.report.max_rel_error
        ),
    )
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn temporal_separation() -> Outcome {
    let err = |e: vivit::Error| e.to_string();
    let start = Instant::now();
    let temporal = RunConfig::load(&config_path("desk.toml")).map_err(err)?;
    let pooled = RunConfig::load(&config_path("desk-avgpool.toml")).map_err(err)?;
    let data = temporal.dataset.generate().map_err(err)?;

    // A time-reversed clip is a clip of the opposite class, so an encoder
    // blind to frame order cannot separate opposite directions.
    let reversal_ok = data.test.iter().all(|s| {
        let r = s.clip.reversed();
        let mut a: Vec<&[f32]> = (0..8).map(|t| s.clip.frame(t)).collect();
        let mut b: Vec<&[f32]> = (0..8).map(|t| r.frame(t)).collect();
        a.sort_by(|x, y| x.partial_cmp(y).unwrap());
        b.sort_by(|x, y| x.partial_cmp(y).unwrap());
        a == b
    });

    let best = |log: &vivit::harness::MetricsLog| log.epochs().iter().map(|e| e.2).fold(0.0, f64::max);
    let with_time = train::<f32>(&temporal, &data).map_err(err)?;
    let without = train::<f32>(&pooled, &data).map_err(err)?;
    let (a, b) = (best(&with_time.log), best(&without.log));
    let epochs = with_time.log.epochs().len();

    let sample = &data.test[..16];
    let order_blind = sample.iter().all(|s| {
        let f = without.model.predict(&[s.clip.clone()]).expect("forward");
        let r = without.model.predict(&[s.clip.reversed()]).expect("forward");
        f[0].max_abs_diff(&r[0]) < 1e-4
    });
    let secs = start.elapsed().as_secs_f64();
    check(
        reversal_ok && order_blind && a >= 0.95 && b <= 0.60 && epochs <= 20 && secs < 600.0,
        format!(
            "Lt=2 best {a:.3} in {epochs} epochs, Lt=0 best {b:.3}, reversal oracle {reversal_ok}, \
             pooled model order-blind {order_blind}, {secs:.0}s"
        ),
    )
}

fn regularizer_statistics() -> Outcome {
    let (depth, p_drop, trials) = (12, 0.3, 10_000u32);
    let mut worst_sigma: f64 = 0.0;
    for layer in 1..=depth {
        let p = layer as f64 / depth as f64 * p_drop;
        let mut rng = RngState::new(100 + layer as u64);
        let mut dropped = 0u32;
        for _ in 0..trials {
            if !stochastic_depth_gate(layer, depth, p_drop, &mut rng).map_err(|e| e.to_string())? {
                dropped += 1;
            }
        }
        let n = trials as f64;
        let sigma = (n * p * (1.0 - p)).sqrt();
        worst_sigma = worst_sigma.max((dropped as f64 - n * p).abs() / sigma);
    }

    let mut rng = RngState::new(1);
    let mut worst_sum: f64 = 0.0;
    let mut identities = true;
    for k in [2, 4, 10, 400] {
        let y = one_hot(rng.below(k), k);
        let lambda = rng.uniform();
        let smooth = label_smooth(&y, lambda).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((smooth.iter().sum::<f64>() - 1.0).abs());
        let a = rand_clip([2, 4, 4, 1], &mut rng);
        let b = rand_clip([2, 4, 4, 1], &mut rng);
        let yb = one_hot(rng.below(k), k);
        let (_, mixed) = mix(&a, &smooth, &b, &yb, rng.uniform()).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((mixed.iter().sum::<f64>() - 1.0).abs());
        identities &= label_smooth(&y, 0.0).map_err(|e| e.to_string())? == y;
        let (clip, labels) = mix(&a, &smooth, &b, &yb, 1.0).map_err(|e| e.to_string())?;
        identities &= clip == a && labels == smooth;
    }
    check(
        worst_sigma <= 3.0 && worst_sum <= 1e-6 && identities,
        format!("worst drop deviation {worst_sigma:.2}σ, worst sum error {worst_sum:.1e}, identities exact {identities}"),
    )
}

fn multi_view() -> Outcome {
    let err = |e: vivit::Error| e.to_string();
    let model: ViViT<f32> = random_model(&video_config(Variant::FactorisedEncoder), 5).map_err(err)?;
    let mut rng = RngState::new(6);
    let clip = rand_clip([6, 8, 8, 2], &mut rng);
    let plain = model.predict(&[clip.clone()]).map_err(err)?;
    let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    // a video exactly one clip long yields identical views
    let single = multi_view_infer(&model, &clip, ViewSpec::new(1, 1).map_err(err)?).map_err(err)?;
    let many = multi_view_infer(&model, &clip, ViewSpec::new(4, 3).map_err(err)?).map_err(err)?;
    let one_by_one = bits(&single[0]) == bits(&plain[0]);
    let identical = bits(&many[0]) == bits(&single[0]);
    check(
        one_by_one && identical,
        format!("1x1 equals forward bitwise {one_by_one}, 12 identical views equal one bitwise {identical}"),
    )
}

fn determinism_and_io() -> Outcome {
    let err = |e: vivit::Error| e.to_string();
    let mut cfg = RunConfig::load(&config_path("desk.toml")).map_err(err)?;
    cfg.dataset.num_train = 64;
    cfg.dataset.num_test = 32;
    cfg.train.epochs = 2;
    cfg.train.warmup_epochs = 0.5;
    cfg.train.batch_size = 16;
    cfg.train.seed = 7;
    let data = cfg.dataset.generate().map_err(err)?;
    let first = train::<f32>(&cfg, &data).map_err(err)?;
    let second = train::<f32>(&cfg, &data).map_err(err)?;
    let logs_equal = first.log.to_text() == second.log.to_text();

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("model.tsv");
    save_model(&first.model, &path).map_err(err)?;
    let loaded: ViViT<f32> = load_model(&path).map_err(err)?;
    let round_trip = loaded.config() == first.model.config()
        && loaded.params().iter().zip(first.model.params()).all(|((na, a), (nb, b))| {
            na == nb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let image_path = dir.path().join("image.tsv");
    let image: ViViT<f32> = random_model(&image_config(8), 11).map_err(err)?;
    save_model(&image, &image_path).map_err(err)?;
    let video_cfg = dir.path().join("video.toml");
    let cfg_text = toml::to_string(&video_config(Variant::SpatioTemporal)).map_err(|e| e.to_string())?;
    std::fs::write(&video_cfg, cfg_text).map_err(|e| e.to_string())?;
    let out = dir.path().join("video.tsv");
    let status = Command::new(env!("CARGO_BIN_EXE_vivit"))
        .arg("inflate")
        .arg("--image-ckpt")
        .arg(&image_path)
        .arg("--config")
        .arg(&video_cfg)
        .args(["--method", "inflate", "--out"])
        .arg(&out)
        .output()
        .map_err(|e| e.to_string())?;
    let cli_ok = status.status.success();
    let inflated_ok = cli_ok && {
        let video: ViViT<f32> = load_model(&out).map_err(err)?;
        let want = inflate_embedding(image.param("embed.kernel").expect("kernel"), 2).map_err(err)?;
        video.param("embed.kernel") == Some(&want) && video.param("layers.0.mlp.fc1.weight") == image.param("layers.0.mlp.fc1.weight")
    };
    check(
        logs_equal && round_trip && inflated_ok,
        format!("metrics log reproduced {logs_equal}, checkpoint round trip {round_trip}, CLI inflation {inflated_ok}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("parameter parity", parameter_parity),
        ("FLOP ordering and ratios", flop_ordering),
        ("token arithmetic", token_arithmetic),
        ("initialisation identities", init_identities),
        ("factorisation oracles", factorisation_oracles),
        ("gradient checks", gradient_checks),
        ("temporal-modelling separation", temporal_separation),
        ("regularizer statistics", regularizer_statistics),
        ("multi-view inference", multi_view),
        ("determinism and IO", determinism_and_io),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
