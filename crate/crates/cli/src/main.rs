use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hiformer::audit::run_audit;
use hiformer::gradcheck::model_gradcheck;
use hiformer::io::{load_checkpoint, load_image, load_model, save_mask, DatasetManifest, LoadMode};
use hiformer::metrics::MetricsAccumulator;
use hiformer::train::{argmax_labels, evaluate, synth_dataset, thread_cap, train, Sample, TrainConfig};
use hiformer::{build_config, CnnBackboneKind, HiFormerF32, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

#[derive(Parser)]
#[command(name = "hiformer", version, about = "Hybrid CNN/transformer segmentation: audit, train, evaluate, infer")]
struct Cli {
    /// Print machine-readable JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    /// Seed for initialization, data synthesis and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// hiformer-s, hiformer-b, hiformer-l, hiformer-tiny or a JSON config file.
    #[arg(long, default_value = "hiformer-b")]
    model: String,
    /// Replace the CNN backbone.
    #[arg(long)]
    backbone: Option<CnnBackboneKind>,
    /// Remove the fusion module (both token pyramids go straight to the decoder).
    #[arg(long)]
    no_dlf: bool,
    /// Input size as H,W.
    #[arg(long, value_delimiter = ',', num_args = 1..=2)]
    hw: Option<Vec<usize>>,
    /// Number of classes including background.
    #[arg(long)]
    classes: Option<usize>,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig> {
        let mut cfg = build_config(&self.model)?;
        if let Some(b) = self.backbone {
            cfg.cnn = b;
        }
        if self.no_dlf {
            cfg.use_dlf = false;
        }
        if let Some(hw) = &self.hw {
            cfg.input_hw = [hw[0], *hw.get(1).unwrap_or(&hw[0])];
        }
        if let Some(k) = self.classes {
            cfg.num_classes = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset directory (images/ and masks/) or `synth`.
    #[arg(long)]
    data: String,
    /// Number of synthetic samples when `--data synth`.
    #[arg(long, default_value_t = 200)]
    synth_n: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Print learnable parameter counts per module.
    Params {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train with SGD; writes the best checkpoint and a JSON-lines log.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 10)]
        batch_size: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        /// Polynomial learning-rate decay exponent.
        #[arg(long)]
        poly: Option<f64>,
        #[arg(long)]
        no_augment: bool,
        /// Best-Dice checkpoint path (config sidecar written next to it).
        #[arg(long, default_value = "hiformer.ckpt")]
        out: PathBuf,
        /// JSON-lines log; defaults to the checkpoint path with `.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Initialize from a checkpoint, loading only tensors under this
        /// prefix (e.g. `cnn.`) when given with `--partial`.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, requires = "init")]
        partial: Option<String>,
    },
    /// Print segmentation metrics per class and their mean.
    Eval {
        /// Model name or config; optional when the checkpoint has a sidecar.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, required_unless_present = "oracle")]
        ckpt: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Score the ground truth against itself (no model).
        #[arg(long)]
        oracle: bool,
        /// Classes for `--oracle`.
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Synthetic image size for `--oracle` with `--data synth`.
        #[arg(long, default_value_t = 64)]
        hw: usize,
    },
    /// Write the per-pixel argmax mask of one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        /// P6 or P5 image.
        #[arg(long)]
        image: PathBuf,
        /// P5 output mask.
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every parameter group.
    Gradcheck {
        #[arg(long, default_value = "hiformer-tiny")]
        model: String,
        /// Entries sampled per tensor.
        #[arg(long, default_value_t = 8)]
        entries: usize,
        /// Also check with batch statistics (batch of two).
        #[arg(long)]
        training: bool,
    },
    /// Materialize a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        hw: usize,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare parameter counts against published totals.
    Audit,
}

fn load_data(data: &DataArgs, hw: [usize; 2], classes: usize, seed: u64) -> Result<Vec<Sample>> {
    if data.data == "synth" {
        if hw[0] != hw[1] {
            bail!("synthetic data is square; got input size {}x{}", hw[0], hw[1]);
        }
        return Ok(synth_dataset(data.synth_n, hw[0], classes, &mut ChaCha8Rng::seed_from_u64(seed)));
    }
    let manifest = DatasetManifest::scan(&data.data, classes).with_context(|| format!("dataset {}", data.data))?;
    Ok(manifest.load()?)
}

fn load_trained(model: Option<&str>, ckpt: &Path) -> Result<HiFormerF32> {
    match model {
        Some(name) => {
            let cfg = build_config(name)?;
            let mut m = HiFormerF32::new(&cfg, 0)?;
            load_checkpoint(&mut m.store, ckpt, &LoadMode::Strict)?;
            Ok(m)
        }
        None => load_model(ckpt).with_context(|| format!("checkpoint {}", ckpt.display())),
    }
}

fn print(json: bool, value: serde_json::Value, text: impl std::fmt::Display) {
    if json {
        println!("{value}");
    } else {
        println!("{text}");
    }
}

fn run(cli: Cli) -> Result<bool> {
    let json = cli.json;
    match cli.command {
        Command::Params { model } => {
            let cfg = model.config()?;
            let report = hiformer::count_parameters(&cfg)?;
            print(json, json!({ "model": cfg.name, "report": report }), format!("{}\n{report}", cfg.name));
        }
        Command::Train { model, data, epochs, batch_size, lr, poly, no_augment, out, log, init, partial } => {
            let cfg = model.config()?;
            let samples = load_data(&data, cfg.input_hw, cfg.num_classes, cli.seed)?;
            let mut net = HiFormerF32::new(&cfg, cli.seed)?;
            if let Some(init) = &init {
                let mode = match partial {
                    Some(prefix) => LoadMode::Partial(Some(prefix)),
                    None => LoadMode::Strict,
                };
                let report = load_checkpoint(&mut net.store, init, &mode)?;
                log::info!("initialized from {}: {report}", init.display());
            }
            let log_path = log.unwrap_or_else(|| out.with_extension("jsonl"));
            let tc = TrainConfig {
                batch_size,
                lr,
                epochs,
                seed: cli.seed,
                poly_power: poly,
                augment: !no_augment,
                threads: thread_cap(),
                log_path: Some(log_path.clone()),
                checkpoint: Some(out.clone()),
                ..TrainConfig::default()
            };
            let outcome = train(&mut net, &samples, &tc, None)?;
            let best = outcome.state.best;
            let text = format!(
                "{} epochs on {} samples; best validation Dice {}; checkpoint {}, log {}\n{}",
                outcome.state.epoch,
                samples.len(),
                best.map_or("n/a".into(), |b| format!("{:.4} (epoch {})", b.dsc, b.epoch)),
                out.display(),
                log_path.display(),
                outcome.report
            );
            let value = json!({
                "model": cfg.name,
                "epochs": outcome.state.epoch,
                "steps": outcome.state.step,
                "best": best,
                "checkpoint": out,
                "log": log_path,
                "report": outcome.report,
            });
            print(json, value, text);
        }
        Command::Eval { model, ckpt, data, oracle, classes, hw } => {
            let report = if oracle {
                let samples = load_data(&data, [hw, hw], classes, cli.seed)?;
                let mut acc = MetricsAccumulator::new(classes);
                for s in &samples {
                    acc.add(&s.mask, &s.mask, s.height, s.width);
                }
                acc.finish()
            } else {
                let ckpt = ckpt.context("--ckpt is required")?;
                let net = load_trained(model.as_deref(), &ckpt)?;
                let samples = load_data(&data, net.config.input_hw, net.config.num_classes, cli.seed)?;
                let refs: Vec<&Sample> = samples.iter().collect();
                evaluate(&net, &refs, 4)?
            };
            print(json, serde_json::to_value(&report)?, &report);
        }
        Command::Infer { ckpt, image, out } => {
            let net = load_trained(None, &ckpt)?;
            let img = load_image::<f32>(&image)?;
            let shape = img.shape().to_vec();
            let x = img.reshape(vec![1, shape[0], shape[1], shape[2]])?;
            let logits = net.predict(&x)?;
            let labels = argmax_labels(&logits).remove(0);
            save_mask(&out, &labels, shape[1], shape[2])?;
            let counts: Vec<usize> =
                (0..net.config.num_classes).map(|k| labels.iter().filter(|&&l| l as usize == k).count()).collect();
            print(
                json,
                json!({ "mask": out, "height": shape[1], "width": shape[2], "class_pixels": counts }),
                format!("wrote {} ({}x{}); pixels per class {counts:?}", out.display(), shape[1], shape[2]),
            );
        }
        Command::Gradcheck { model, entries, training } => {
            let cfg = build_config(&model)?;
            let mut runs = vec![model_gradcheck(&cfg, cli.seed, 1, entries, false)?];
            if training {
                runs.push(model_gradcheck(&cfg, cli.seed, 2, entries, true)?);
            }
            let passed = runs.iter().all(|r| r.passed());
            let text: Vec<String> = runs.iter().map(|r| r.to_string()).collect();
            print(json, json!({ "passed": passed, "runs": runs }), text.join("\n"));
            return Ok(passed);
        }
        Command::Synth { n, hw, k, out } => {
            let samples = synth_dataset(n, hw, k, &mut ChaCha8Rng::seed_from_u64(cli.seed));
            let manifest = DatasetManifest::write(&out, &samples, k)?;
            print(
                json,
                json!({ "root": out, "samples": manifest.len(), "hw": hw, "classes": k }),
                format!("wrote {} samples ({hw}x{hw}, {k} classes) to {}", manifest.len(), out.display()),
            );
        }
        Command::Audit => {
            let report = run_audit()?;
            print(json, serde_json::to_value(&report)?, &report);
            return Ok(report.passed());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            eprintln!("{}", msg.lines().next().unwrap_or("error: invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
