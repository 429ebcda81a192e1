//! `cfanet` command line. Every subcommand is a thin call into the library.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfanet::adapters::{RandomProjectionFeatures, SpriteAttributeClassifier, SpriteDetector};
use cfanet::anonymizer::{anonymize_encoded, sweep, AnonymizerModel};
use cfanet::config::ExperimentConfig;
use cfanet::data::{load_png, save_png, toy_dataset, write_toy_dataset, IdentityDataset, ToyDataConfig};
use cfanet::evaluation::{evaluate, Adapters};
use cfanet::geometry::AngleSpec;
use cfanet::recognizer::load_or_pretrain;
use cfanet::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cfanet", version, about = "Controllable face anonymization on the identity hypersphere")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config override, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let cfg = ExperimentConfig::resolve(self.config.as_deref(), &self.overrides)?;
        Ok(match self.seed {
            Some(s) => cfg.with_seed(s),
            None => cfg,
        })
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the generator; writes checkpoints, logs and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Recognizer checkpoint, pretrained and cached here when missing.
        #[arg(long)]
        recognizer: Option<PathBuf>,
    },
    /// Anonymize one image.
    Anonymize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Rotation angle in radians; must exceed the model's theta.
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a grid of (seed, alpha) cells and the identity curve.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        alphas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Also decode angles at or below theta (not anonymous; for plotting).
        #[arg(long)]
        allow_below_theta: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every evaluation protocol and write the report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset manifest; the configured toy set is used when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Render the procedural sprite dataset with a manifest.
    MakeToyData {
        /// Total identities, validation ones included.
        #[arg(long, default_value_t = 25)]
        identities: usize,
        #[arg(long, default_value_t = 50)]
        per_identity: usize,
        #[arg(long, default_value_t = 5)]
        val_identities: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingFile(_) => 2,
        Error::FatalDivergence { .. } => 4,
        Error::Config(_)
        | Error::Invalid(_)
        | Error::Shape(_)
        | Error::AnonymityViolation { .. }
        | Error::EmptySweep(_)
        | Error::IncompatibleCheckpoint(_)
        | Error::Image(_)
        | Error::Json(_)
        | Error::DegenerateVector
        | Error::AmbiguousPath(_) => 3,
        _ => 1,
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn dataset(cfg: &ExperimentConfig, manifest: Option<&Path>) -> Result<IdentityDataset> {
    match manifest.or(cfg.data.manifest.as_deref()) {
        Some(m) => IdentityDataset::from_manifest(m),
        None => Ok(toy_dataset(&cfg.data.toy)),
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { common, out, recognizer } => {
            let cfg = common.resolve()?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let ds = dataset(&cfg, None)?;
            let rpath = recognizer.unwrap_or_else(|| out.join("recognizer.ckpt"));
            let r = load_or_pretrain(&rpath, &cfg.recognizer)?;
            let outcome = cfanet::training::train(&ds, &cfg.train, r, &out)?;
            println!("{}", outcome.checkpoint.display());
        }
        Cmd::Anonymize { checkpoint, image, alpha, seed, out } => {
            let model = AnonymizerModel::load(&checkpoint)?;
            let req = model.request(alpha, seed);
            AngleSpec::new(req.theta, req.alpha, req.direction_seed)?;
            let enc = model.encode_chw(&load_png(&image, model.image_size())?)?;
            let a = anonymize_encoded(&model, &enc, &req)?;
            std::fs::create_dir_all(&out)?;
            save_png(&out.join("anonymized.png"), &a.image, model.image_size())?;
            let summary = serde_json::json!({
                "alpha": alpha, "seed": seed, "theta": req.theta,
                "threshold": model.threshold(), "cosine": a.cosine,
            });
            write_json(&out.join("anonymized.json"), &summary)?;
            println!("{summary}");
        }
        Cmd::Sweep { checkpoint, image, alphas, seeds, allow_below_theta, out } => {
            let model = AnonymizerModel::load(&checkpoint)?;
            if !allow_below_theta {
                for &a in &alphas {
                    AngleSpec::new(model.theta(), a, 0)?;
                }
            }
            let enc = model.encode_chw(&load_png(&image, model.image_size())?)?;
            let r = sweep(&model, &enc, &alphas, &seeds)?;
            std::fs::create_dir_all(&out)?;
            let mut csv = String::from("seed,alpha,cosine,threshold\n");
            for (row, imgs) in r.images.iter().enumerate() {
                for (col, img) in imgs.iter().enumerate() {
                    save_png(&out.join(format!("cell_r{row}_c{col}.png")), img, model.image_size())?;
                    csv.push_str(&format!("{},{},{},{}\n", r.seeds[row], r.alphas[col], r.cosines[row][col], r.threshold));
                }
            }
            std::fs::write(out.join("curve.csv"), csv)?;
            write_json(&out.join("sweep.json"), &r)?;
        }
        Cmd::Evaluate { common, checkpoint, manifest, out } => {
            let cfg = common.resolve()?;
            let model = AnonymizerModel::load(&checkpoint)?;
            let ds = dataset(&cfg, manifest.as_deref())?;
            let (det, attr, feat) = (SpriteDetector::default(), SpriteAttributeClassifier, RandomProjectionFeatures::default());
            let adapters = Adapters { detectors: vec![&det], attributes: Some(&attr), features: Some(&feat) };
            let report = evaluate(&model, &ds, &cfg.eval, &adapters)?;
            std::fs::create_dir_all(&out)?;
            write_json(&out.join("eval_report.json"), &report)?;
            let mut csv = String::from("source,seed,alpha,cosine,threshold\n");
            for c in &report.curves {
                for (a, v) in c.curve.alphas.iter().zip(&c.curve.cosines) {
                    csv.push_str(&format!("{},{},{a},{v},{}\n", c.source, c.curve.seed, c.curve.threshold));
                }
            }
            std::fs::write(out.join("curves.csv"), csv)?;
            println!("{}", serde_json::to_string(&serde_json::json!({
                "after_tpr": report.verification.after_tpr,
                "anonymization_success": report.anonymization_success,
                "reconstruction_l1": report.reconstruction_l1,
                "median_post_rank": report.ranking.median_post_rank,
            }))?);
        }
        Cmd::Serve { common, port, model } => {
            let mut cfg = common.resolve()?.service;
            cfg.apply_env()?;
            if let Some(p) = port {
                cfg.port = p;
            }
            if model.is_some() {
                cfg.model = model;
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cfanet::service::serve(cfg))?;
        }
        Cmd::MakeToyData { identities, per_identity, val_identities, image_size, seed, out } => {
            if val_identities >= identities {
                return Err(Error::Config(format!("{val_identities} validation identities leave none of {identities} for training")));
            }
            let cfg = ToyDataConfig { train_identities: identities - val_identities, val_identities, per_identity, image_size, seed };
            let manifest = write_toy_dataset(&cfg, &out)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(exit_code(&e))
        }
    }
}
