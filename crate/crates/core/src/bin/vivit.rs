use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use vivit::analysis::{as_variant, emit_comparison};
use vivit::checkpoint::{load_model, save_model, Checkpoint};
use vivit::harness::{
    gradcheck_suite, multi_view_infer, train_to_dir, DatasetSpec, RunConfig, ViewSpec, GRADCHECK_TOLERANCE,
};
use vivit::init::{load_pretrained, EmbedInit};
use vivit::models::{ModelConfig, Variant, ViViT};
use vivit::{Error, Result};

#[derive(Parser)]
#[command(name = "vivit", about = "Video vision transformers at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Inflate,
    Central,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the synthetic motion dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `train.seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multi-view accuracy of a checkpoint on long test videos.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Temporal views x spatial crops, e.g. 4x3.
        #[arg(long, default_value = "1x1")]
        views: String,
        /// Run config whose `[dataset]` section describes the test videos.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Parameter and FLOP table of the four variants.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Initialise a video model from an image-model checkpoint.
    Inflate {
        #[arg(long)]
        image_ckpt: PathBuf,
        /// Run config or bare model config of the video model.
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        method: Method,
        /// Output manifest; defaults to `<image-ckpt stem>-video.tsv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference checks of the primitives and the tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// A model config from either a full run config or a bare `ModelConfig`.
fn model_config(path: &Path) -> Result<ModelConfig> {
    let text = read(path)?;
    if let Ok(run) = RunConfig::parse(&text) {
        return Ok(run.model);
    }
    let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg: ModelConfig = if let Some(model) = table.get("model") {
        model.clone().try_into()
    } else {
        toml::Value::Table(table).try_into()
    }
    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let data = cfg.dataset.generate()?;
            let outcome = train_to_dir(&cfg, &data, &out)?;
            for (epoch, loss, acc) in outcome.log.epochs() {
                println!("epoch {epoch}: loss {loss:.4} accuracy {acc:.4}");
            }
            println!("wrote {}", out.join("model.tsv").display());
        }
        Command::Eval { checkpoint, views, config } => {
            let views: ViewSpec = views.parse()?;
            let model: ViViT<f32> = load_model(&checkpoint)?;
            let spec = match config {
                Some(p) => RunConfig::load(&p)?.dataset,
                None => DatasetSpec::default(),
            };
            let i = model.config().input;
            let width = if views.spatial > 1 { i.width + i.width / 4 } else { i.width };
            let frames = (i.frames * views.temporal).min(spec.max_frames(i.height, width));
            let frames = frames.max(i.frames);
            let videos = spec.long_test_videos(frames, i.height, width)?;
            let mut correct = 0;
            for s in &videos {
                let logits = multi_view_infer(&model, &s.clip, views)?;
                if vivit::harness::train::argmax(logits[0].data()) == s.label {
                    correct += 1;
                }
            }
            let acc = correct as f64 / videos.len().max(1) as f64;
            println!(
                "views {views} on {} videos of {frames}×{}×{width}: accuracy {acc:.4}",
                videos.len(),
                i.height
            );
        }
        Command::Analyze { config, csv } => {
            let base = model_config(&config)?;
            let cfgs: Vec<ModelConfig> = Variant::ALL.iter().map(|&v| as_variant(&base, v)).collect();
            let table = emit_comparison(&cfgs)?;
            print!("{}", table.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, table.to_csv()?).map_err(|e| Error::Io { path: path.clone(), source: e })?;
                println!("wrote {}", path.display());
            }
        }
        Command::Inflate { image_ckpt, config, method, out, seed } => {
            let cfg = model_config(&config)?;
            let ckpt = Checkpoint::read(&image_ckpt)?;
            let init = match method {
                Method::Inflate => EmbedInit::Inflate,
                Method::Central => EmbedInit::Central,
            };
            let model = load_pretrained::<f32>(&ckpt, &cfg, init, seed)?;
            let out = out.unwrap_or_else(|| {
                let stem = image_ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                image_ckpt.with_file_name(format!("{stem}-video.tsv"))
            });
            save_model(&model, &out)?;
            println!("{} parameters written to {}", model.num_params(), out.display());
        }
        Command::Gradcheck { seed } => {
            let cases = gradcheck_suite(seed)?;
            let mut failed = 0;
            for c in &cases {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:4} {:20} rel {:.3e} abs {:.3e} ({} coords)",
                    c.name, c.report.max_rel_error, c.report.max_abs_error, c.report.checked
                );
                failed += usize::from(!c.passed());
            }
            if failed > 0 {
                return Err(Error::Config(format!(
                    "{failed} gradient checks exceed relative error {GRADCHECK_TOLERANCE:e}"
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
