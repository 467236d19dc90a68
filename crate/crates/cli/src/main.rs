//! Batch command-line interface. Every command resolves its full
//! configuration, emits a manifest next to its outputs, and is byte-exactly
//! reproducible from that manifest (the manifest's wall-clock field aside).
//!
//! Exit codes: 0 success, 2 usage error, 3 input/format error, 4 numerical
//! failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use tokenguide::checkpoint::{load_checkpoint, save_checkpoint};
use tokenguide::gradcheck::{standard_suite, SUITE_TOLERANCE};
use tokenguide::metrics::evaluate_dataset;
use tokenguide::model::TrainMode;
use tokenguide::synth::{generate_dataset, read_dataset, write_dataset, SynthConfig, TextureProfile};
use tokenguide::train::{train, TrainConfig};
use tokenguide::{Error, Result};

#[derive(Parser)]
#[command(name = "tokenguide", version, about = "Token-prototype guide masks for gated segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Baseline,
    Guided,
    GuidedLora,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> TrainMode {
        match m {
            ModeArg::Baseline => TrainMode::Baseline,
            ModeArg::Guided => TrainMode::GuidedFrozen,
            ModeArg::GuidedLora => TrainMode::GuidedLora,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SimArg {
    Cosine,
    Dot,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic GDS1 dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.25)]
        contrast: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 4)]
        blob_complexity: usize,
        #[arg(long, default_value_t = 0.05)]
        area_frac_lo: f64,
        #[arg(long, default_value_t = 0.35)]
        area_frac_hi: f64,
        /// Use the texture-shifted evaluation profile (same shapes).
        #[arg(long, default_value_t = false)]
        shifted: bool,
    },
    /// Train a model and save the best-on-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 0.5)]
        lambda: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        lr_main: f64,
        #[arg(long, default_value_t = 5e-4)]
        lr_lora: f64,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 1e-2)]
        weight_decay: f64,
        /// Enable the boundary hinge term.
        #[arg(long, default_value_t = false)]
        hinge: bool,
        #[arg(long, default_value_t = 0.2)]
        hinge_margin: f64,
        #[arg(long, default_value_t = 2)]
        band_radius: usize,
        #[arg(long, default_value_t = 8)]
        patch: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 4)]
        depth: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 16)]
        book_k: usize,
        #[arg(long, value_enum, default_value_t = SimArg::Cosine)]
        sim: SimArg,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 16)]
        base_channels: usize,
        #[arg(long, default_value_t = 3)]
        unet_depth: usize,
        #[arg(long, default_value_t = 4)]
        lora_rank: usize,
        #[arg(long, default_value_t = 2.0)]
        lora_scale: f64,
    },
    /// Evaluate a checkpoint on a dataset, writing a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Average sigmoid outputs over the four flip variants.
        #[arg(long, default_value_t = false)]
        tta: bool,
    },
    /// Write one 8-bit PGM guide mask per sample.
    GuideDump {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check suite; nonzero exit if any row exceeds 1e-4.
    Gradcheck {
        /// Also check every trainable parameter of the 16x16 end-to-end pipeline.
        #[arg(long, default_value_t = false)]
        full: bool,
    },
}

#[derive(serde::Serialize)]
struct RunManifest {
    artifact_version: String,
    command: String,
    argv: Vec<String>,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    /// Wall-clock stamp; the only field excluded from rerun byte-identity.
    created_unix_ms: u128,
}

fn write_manifest(
    path: &Path,
    command: &str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<()> {
    let manifest = RunManifest {
        artifact_version: tokenguide::ARTIFACT_VERSION.to_string(),
        command: command.to_string(),
        argv: std::env::args().collect(),
        config,
        seeds,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
        created_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Format { .. } | Error::Input(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn read_dataset_cli(path: &Path) -> Result<Vec<tokenguide::synth::SegSample>> {
    read_dataset(path).map_err(|e| match e {
        Error::Io(io) => Error::Input(format!("cannot read {}: {io}", path.display())),
        other => other,
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            size,
            contrast,
            seed,
            noise_sigma,
            blob_complexity,
            area_frac_lo,
            area_frac_hi,
            shifted,
        } => {
            let cfg = SynthConfig {
                size,
                n_samples: n,
                contrast,
                noise_sigma,
                blob_complexity,
                area_frac: (area_frac_lo, area_frac_hi),
                texture: if shifted { TextureProfile::Shifted } else { TextureProfile::Default },
                seed,
            };
            let (samples, warnings) = generate_dataset(&cfg);
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            write_dataset(&samples, &out)?;
            write_manifest(
                &manifest_path(&out),
                "gen-data",
                serde_json::to_value(&cfg)?,
                vec![seed],
                &[],
                &[&out],
            )?;
            println!("wrote {} samples ({}x{}) to {}", samples.len(), size, size, out.display());
            Ok(())
        }
        Command::Train {
            data,
            val,
            mode,
            out,
            epochs,
            lambda,
            seed,
            lr_main,
            lr_lora,
            batch,
            weight_decay,
            hinge,
            hinge_margin,
            band_radius,
            patch,
            dim,
            depth,
            heads,
            book_k,
            sim,
            temperature,
            base_channels,
            unet_depth,
            lora_rank,
            lora_scale,
        } => {
            let mode: TrainMode = mode.into();
            let mut cfg = TrainConfig {
                lr_main,
                lr_lora,
                batch,
                epochs,
                weight_decay,
                seeds: vec![seed],
                ..Default::default()
            };
            cfg.loss.lambda = lambda;
            cfg.loss.hinge_enabled = hinge;
            cfg.loss.hinge_margin = hinge_margin;
            cfg.loss.band_radius = band_radius;
            cfg.encoder.patch = patch;
            cfg.encoder.dim = dim;
            cfg.encoder.depth = depth;
            cfg.encoder.heads = heads;
            cfg.book.k = book_k;
            cfg.book.sim = match sim {
                SimArg::Cosine => tokenguide::tokenbook::SimKind::Cosine,
                SimArg::Dot => tokenguide::tokenbook::SimKind::Dot,
            };
            cfg.book.temperature = temperature;
            cfg.unet.base_channels = base_channels;
            cfg.unet.depth = unet_depth;
            cfg.unet.gate_stages = (0..unet_depth).collect();
            cfg.lora.rank = lora_rank;
            cfg.lora.scale = lora_scale;

            let train_set = read_dataset_cli(&data)?;
            let val_set = read_dataset_cli(&val)?;
            let result = train(mode, &cfg, &train_set, &val_set)?;
            println!(
                "trained {} for {} epochs; best val DSC {:.4} at epoch {}",
                mode.as_str(),
                epochs,
                result.best_val_dsc,
                result.best_epoch
            );
            let history_path = {
                let mut name = out.file_name().map(|s| s.to_os_string()).unwrap_or_default();
                name.push(".history.jsonl");
                out.with_file_name(name)
            };
            std::fs::write(&history_path, result.history_jsonl())?;
            let config_json = serde_json::json!({
                "mode": mode,
                "train": &cfg,
            });
            let ckpt = result.into_checkpoint(&cfg);
            save_checkpoint(&ckpt, &out)?;
            write_manifest(
                &manifest_path(&out),
                "train",
                config_json,
                vec![seed],
                &[&data, &val],
                &[&out, &history_path],
            )?;
            Ok(())
        }
        Command::Eval { ckpt, data, out, tta } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let model = checkpoint.build_model()?;
            let samples = read_dataset_cli(&data)?;
            let report = evaluate_dataset(&model, &samples, tta, vec![checkpoint.meta.seed])?;
            let mut text = serde_json::to_string_pretty(&report)?;
            text.push('\n');
            std::fs::write(&out, text)?;
            write_manifest(
                &manifest_path(&out),
                "eval",
                serde_json::json!({ "ckpt": ckpt.display().to_string(), "tta": tta }),
                vec![checkpoint.meta.seed],
                &[&ckpt, &data],
                &[&out],
            )?;
            println!(
                "evaluated {} samples: IoU {:.4} DSC {:.4} HD95 {:.3}",
                report.n_samples, report.iou_mean, report.dsc_mean, report.hd95_mean
            );
            Ok(())
        }
        Command::GuideDump { ckpt, data, out } => {
            let checkpoint = load_checkpoint(&ckpt)?;
            let model = checkpoint.build_model()?;
            if model.book.is_none() {
                return Err(Error::Input(
                    "checkpoint has no guide components (baseline mode)".into(),
                ));
            }
            let samples = read_dataset_cli(&data)?;
            std::fs::create_dir_all(&out)?;
            let mut outputs = Vec::new();
            for s in &samples {
                let (_, guide) = model.forward_logits(&s.image)?;
                let guide = guide.expect("guided model yields a guide");
                let path = out.join(format!("guide_{:04}.pgm", s.sample_id));
                write_pgm(&path, guide.h, guide.w, guide.values.data())?;
                outputs.push(path);
            }
            let output_refs: Vec<&Path> = outputs.iter().map(|p| p.as_path()).collect();
            write_manifest(
                &out.join("manifest.json"),
                "guide-dump",
                serde_json::json!({ "ckpt": ckpt.display().to_string() }),
                vec![checkpoint.meta.seed],
                &[&ckpt, &data],
                &output_refs,
            )?;
            println!("wrote {} guide masks to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Gradcheck { full } => {
            let reports = standard_suite(full)?;
            println!(
                "{:<24} {:>8} {:>14} {:>14}   status",
                "operation", "n", "max_rel_err", "max_abs_err"
            );
            let mut failed = false;
            for r in &reports {
                let ok = r.passes(SUITE_TOLERANCE);
                failed |= !ok;
                println!(
                    "{:<24} {:>8} {:>14.3e} {:>14.3e}   {}",
                    r.op_name,
                    r.n_params_checked,
                    r.max_rel_err,
                    r.max_abs_err,
                    if ok { "ok" } else { "FAIL" }
                );
            }
            if failed {
                return Err(Error::Numerical(format!(
                    "gradient check exceeded tolerance {SUITE_TOLERANCE}"
                )));
            }
            Ok(())
        }
    }
}

/// Binary PGM (P5), values rounded from 255 * g.
fn write_pgm(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", w, h).into_bytes();
    bytes.extend(values.iter().map(|&v| (255.0 * v as f64).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
