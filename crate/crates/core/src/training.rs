//! Pair sampling, the optimisation loop, probes and model checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::nn::{self, OptimizerConfig};
use tch::Tensor;

use crate::checkpoint::{check_fields, Checkpoint};
use crate::data::{two_distinct, IdentityDataset, IdentityImages, ImageTensor, Split};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_loss, content_loss, gradient_penalty, identity_consistency_loss, identity_smoothing_loss,
    overall_loss, reconstruction_loss, scalar, LossReport, LossTerms, LossWeights, PairLabel, PatchSpec,
    SmoothingConfig,
};
use crate::model::{normalize_rows, seeded, Generator, ModelConfig, PairDiscriminator, RecognizerAdapter};

pub const CHECKPOINT_KIND: &str = "cfanet";

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub disable_content_loss: bool,
    pub disable_identity_loss: bool,
}

/// Zero-centred gradient penalty on the global discriminator, applied every
/// `interval` steps and scaled up by `interval`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub gamma: f64,
    pub interval: usize,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self { gamma: 1.0, interval: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub weights: LossWeights,
    pub patches: PatchSpec,
    pub smoothing: SmoothingConfig,
    pub ablation: Ablation,
    pub penalty: PenaltyConfig,
    pub seed: u64,
    /// 0 disables intermediate checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    /// 0 disables intermediate probes; a final probe always runs.
    pub probe_every: usize,
    /// Validation images used by each probe.
    pub probe_images: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            iterations: 2000,
            batch_size: 8,
            weights: LossWeights::default(),
            patches: PatchSpec::default(),
            smoothing: SmoothingConfig::default(),
            ablation: Ablation::default(),
            penalty: PenaltyConfig::default(),
            seed: 0,
            checkpoint_every: 500,
            probe_every: 250,
            probe_images: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        self.patches.validate()?;
        self.smoothing.validate()?;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.penalty.interval == 0 || self.penalty.gamma < 0.0 {
            return Err(Error::Config("penalty.interval must be positive and gamma >= 0".into()));
        }
        Ok(())
    }

    /// Loss weights after the ablation switches.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if self.ablation.disable_content_loss {
            w.lambda_con = 0.0;
        }
        if self.ablation.disable_identity_loss {
            w.lambda_id = 0.0;
        }
        w
    }
}

/// One batch of pairs; every row shares the label.
#[derive(Debug)]
pub struct TrainingPair {
    /// Provides content.
    pub x: ImageTensor,
    /// Provides identity.
    pub y: ImageTensor,
    pub label: PairLabel,
    pub x_tags: Vec<String>,
    pub y_tags: Vec<String>,
}

/// Even steps draw same-identity pairs, odd steps different-identity pairs.
pub fn label_for_step(step: usize) -> PairLabel {
    if step % 2 == 0 {
        PairLabel::SAME
    } else {
        PairLabel::DIFFERENT
    }
}

pub fn sample_pair<R: Rng + ?Sized>(
    ds: &IdentityDataset,
    split: Split,
    step: usize,
    batch: usize,
    rng: &mut R,
) -> Result<TrainingPair> {
    let groups = ds.split(split);
    let label = label_for_step(step);
    let eligible: Vec<&IdentityImages> = groups.iter().filter(|g| g.len() >= 2).collect();
    if label.is_same() && eligible.is_empty() {
        return Err(Error::Invalid("no identity has two images for a same-identity pair".into()));
    }
    if !label.is_same() && groups.len() < 2 {
        return Err(Error::Invalid("different-identity pairs need two identities".into()));
    }
    let (mut xs, mut ys, mut x_tags, mut y_tags) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for _ in 0..batch {
        let (gx, gy, ix, iy) = if label.is_same() {
            // identities with a single image are never picked here
            let g = eligible[rng.gen_range(0..eligible.len())];
            let (a, b) = two_distinct(rng, g.len());
            (g, g, a, b)
        } else {
            let (a, b) = two_distinct(rng, groups.len());
            let (ga, gb) = (&groups[a], &groups[b]);
            (ga, gb, rng.gen_range(0..ga.len()), rng.gen_range(0..gb.len()))
        };
        xs.push(gx.image(ix));
        ys.push(gy.image(iy));
        x_tags.push(gx.tag.clone());
        y_tags.push(gy.tag.clone());
    }
    Ok(TrainingPair {
        x: ImageTensor::new(Tensor::cat(&xs, 0))?,
        y: ImageTensor::new(Tensor::cat(&ys, 0))?,
        label,
        x_tags,
        y_tags,
    })
}

/// Validation probe written to `probes.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub step: usize,
    /// Mean absolute reconstruction error on the [0, 1] pixel scale.
    pub reconstruction_l1: f64,
    /// Recognizer cosine between reconstructions and their sources.
    pub same_identity_cosine: f64,
    /// Recognizer cosine between `G(content(x), identity(y))` and `y`.
    pub transfer_cosine: f64,
    /// Recognizer cosine between `G(content(x), identity(y))` and `x`.
    pub leak_cosine: f64,
}

/// All networks plus optimiser state of a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub g_vs: nn::VarStore,
    pub generator: Generator,
    pub d_vs: nn::VarStore,
    pub disc: PairDiscriminator,
    pub dl_vs: nn::VarStore,
    pub disc_local: PairDiscriminator,
    pub recognizer: RecognizerAdapter,
    opt_g: nn::Optimizer,
    opt_d: nn::Optimizer,
    opt_dl: nn::Optimizer,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, recognizer: RecognizerAdapter) -> Result<Self> {
        cfg.validate()?;
        if recognizer.d_id() != cfg.model.d_id {
            return Err(Error::Config(format!(
                "recognizer embeds to {} dims but model.d_id is {}",
                recognizer.d_id(),
                cfg.model.d_id
            )));
        }
        let (g_vs, generator, d_vs, disc, dl_vs, disc_local) = seeded(cfg.seed, || -> Result<_> {
            let g_vs = nn::VarStore::new(tch::Device::Cpu);
            let generator = Generator::new(&g_vs.root(), &cfg.model)?;
            let d_vs = nn::VarStore::new(tch::Device::Cpu);
            let disc = PairDiscriminator::global(&d_vs.root(), &cfg.model);
            let dl_vs = nn::VarStore::new(tch::Device::Cpu);
            let disc_local = PairDiscriminator::local(&dl_vs.root(), &cfg.model);
            Ok((g_vs, generator, d_vs, disc, dl_vs, disc_local))
        })?;
        let adam = nn::Adam { beta1: cfg.beta1, beta2: cfg.beta2, wd: 0.0, eps: 1e-8, amsgrad: false };
        let opt_g = adam.build(&g_vs, cfg.lr)?;
        let opt_d = adam.build(&d_vs, cfg.lr)?;
        let opt_dl = adam.build(&dl_vs, cfg.lr)?;
        Ok(Self {
            cfg: cfg.clone(),
            g_vs,
            generator,
            d_vs,
            disc,
            dl_vs,
            disc_local,
            recognizer,
            opt_g,
            opt_d,
            opt_dl,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            step: 0,
        })
    }

    /// One generator update followed by one update of each discriminator.
    pub fn train_step(&mut self, pair: &TrainingPair) -> Result<LossReport> {
        let cfg = &self.cfg;
        let w = cfg.effective_weights();
        let x = pair.x.tensor();
        let y = pair.y.tensor();
        let b = pair.x.batch();

        let (z_con, z_id) = self.generator.encode_tensors(&Tensor::cat(&[x, y], 0))?;
        let z_x_con = z_con.narrow(0, 0, b);
        let (z_x_id, z_y_id) = (z_id.narrow(0, 0, b), z_id.narrow(0, b, b));
        let out = self
            .generator
            .decode_tensors(&Tensor::cat(&[&z_x_con, &z_x_con], 0), &Tensor::cat(&[&z_y_id, &z_x_id], 0))?;
        let (x_cross, x_rec) = (out.narrow(0, 0, b), out.narrow(0, b, b));

        let zero = || Tensor::zeros([], (tch::Kind::Float, tch::Device::Cpu));
        let (content, disc_local_loss) = if w.lambda_con > 0.0 {
            content_loss(
                pair.label,
                &x_cross,
                x,
                &self.disc_local,
                &cfg.patches,
                cfg.model.patch_size,
                &mut self.rng,
            )?
        } else {
            (zero(), None)
        };
        let (id_consistency, id_smoothing, path_length) = if w.lambda_id > 0.0 {
            let consistency = identity_consistency_loss(&x_cross, y, &z_y_id, &self.recognizer)?;
            if w.lambda_smooth > 0.0 {
                let rows = (b / cfg.smoothing.batch_shrink as i64).max(1);
                let s = identity_smoothing_loss(
                    &z_x_con.narrow(0, 0, rows),
                    &z_x_id.narrow(0, 0, rows),
                    &z_y_id.narrow(0, 0, rows),
                    &self.generator,
                    &self.recognizer,
                    &cfg.smoothing,
                    &mut self.rng,
                )?;
                (consistency, s.loss, s.path_length)
            } else {
                (consistency, zero(), 0.0)
            }
        } else {
            (zero(), zero(), 0.0)
        };
        let adv = if w.lambda_adv > 0.0 { Some(adversarial_loss(x, y, &x_rec, &x_cross, &self.disc)?) } else { None };
        let reconstruction = reconstruction_loss(x, &x_rec)?;
        let terms = LossTerms {
            content,
            id_consistency,
            id_smoothing,
            adversarial: adv.as_ref().map(|a| a.generator.shallow_clone()).unwrap_or_else(zero),
            reconstruction,
        };
        let (total, mut report) = overall_loss(&terms, &w);
        report.step = self.step;
        report.c = pair.label.c();
        report.smoothing_path_length = path_length;
        if let Some(a) = &adv {
            report.disc = scalar(&a.discriminator);
        }
        if let Some(d) = &disc_local_loss {
            report.disc_local = scalar(d);
        }
        if !report.is_finite() {
            return Err(Error::FatalDivergence {
                step: self.step,
                detail: format!("non-finite loss: {}", serde_json::to_string(&report)?),
            });
        }

        if total.requires_grad() {
            self.opt_g.backward_step(&total);
        }
        if let Some(a) = adv {
            let mut d_loss = a.discriminator;
            if cfg.penalty.gamma > 0.0 && self.step % cfg.penalty.interval == 0 {
                let p = gradient_penalty(&self.disc, x, y)?;
                report.penalty = scalar(&p);
                d_loss = d_loss + p * (cfg.penalty.gamma * 0.5 * cfg.penalty.interval as f64);
            }
            self.opt_d.backward_step(&d_loss);
        }
        if let Some(d) = disc_local_loss {
            self.opt_dl.backward_step(&d);
        }
        if !report.penalty.is_finite() {
            return Err(Error::FatalDivergence { step: self.step, detail: "non-finite gradient penalty".into() });
        }
        self.step += 1;
        Ok(report)
    }

    /// Reconstruction and identity-transfer statistics on validation pairs.
    pub fn probe(&self, ds: &IdentityDataset) -> Result<ProbeReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9B0B);
        let split = if ds.val.len() >= 2 { Split::Val } else { Split::Train };
        let n = self.cfg.probe_images.max(2);
        let pair = sample_pair(ds, split, 1, n, &mut rng)?;
        probe_pair(&self.generator, &self.recognizer, &pair, self.step)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, self.step, serde_json::to_value(&self.cfg)?);
        ck.header.rng = Some(serde_json::to_value(&self.rng).map_err(Error::Json)?);
        ck.add_var_store("generator", &self.g_vs);
        ck.add_var_store("disc", &self.d_vs);
        ck.add_var_store("disc_local", &self.dl_vs);
        let r = crate::recognizer::to_checkpoint(&self.recognizer, None)?;
        ck.header.extra = serde_json::json!({ "recognizer": { "config": r.header.config, "extra": r.header.extra } });
        for (k, v) in r.blobs {
            ck.blobs.insert(format!("recognizer/{k}"), v);
        }
        Ok(ck)
    }

    /// Restores parameters, step and RNG. Optimiser moments start fresh.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let want = serde_json::to_value(&self.cfg.model)?;
        check_fields(&ck.header.config["model"], &want, MODEL_FIELDS)?;
        let rng: ChaCha8Rng = match &ck.header.rng {
            Some(v) => serde_json::from_value(v.clone())
                .map_err(|e| Error::IncompatibleCheckpoint(format!("rng state: {e}")))?,
            None => return Err(Error::IncompatibleCheckpoint("rng state missing".into())),
        };
        // validate every set before writing any of them
        let staging = Trainer::new(&self.cfg, seeded(0, || RecognizerAdapter::new(self.recognizer.net.config())))?;
        ck.load_var_store("generator", &staging.g_vs)?;
        ck.load_var_store("disc", &staging.d_vs)?;
        ck.load_var_store("disc_local", &staging.dl_vs)?;
        ck.load_var_store("generator", &self.g_vs)?;
        ck.load_var_store("disc", &self.d_vs)?;
        ck.load_var_store("disc_local", &self.dl_vs)?;
        self.rng = rng;
        self.step = ck.header.step;
        Ok(())
    }
}

/// Fields of `ModelConfig` that change parameter shapes.
pub const MODEL_FIELDS: &[&str] = &[
    "id_map_channels",
    "image_size",
    "d_id",
    "c_con",
    "stride",
    "stem_channels",
    "id_channels",
    "decoder_channels",
    "disc_channels",
    "patch_size",
    "local_channels",
];

pub fn probe_pair(
    generator: &Generator,
    recognizer: &RecognizerAdapter,
    pair: &TrainingPair,
    step: usize,
) -> Result<ProbeReport> {
    tch::no_grad(|| {
        let (x, y) = (pair.x.tensor(), pair.y.tensor());
        let b = pair.x.batch();
        let (z_con, z_id) = generator.encode_tensors(&Tensor::cat(&[x, y], 0))?;
        let zc = z_con.narrow(0, 0, b);
        let out =
            generator.decode_tensors(&Tensor::cat(&[&zc, &zc], 0), &Tensor::cat(&[z_id.narrow(0, b, b), z_id.narrow(0, 0, b)], 0))?;
        let (x_cross, x_rec) = (out.narrow(0, 0, b), out.narrow(0, b, b));
        let e = normalize_rows(&recognizer.embed(&Tensor::cat(&[x, y, &x_cross, &x_rec], 0)));
        let part = |i: i64| e.narrow(0, i * b, b);
        let mean_cos = |a: &Tensor, c: &Tensor| scalar(&(a * c).sum_dim_intlist([1i64].as_slice(), false, tch::Kind::Float).mean(tch::Kind::Float));
        Ok(ProbeReport {
            step,
            reconstruction_l1: scalar(&(x - &x_rec).abs().mean(tch::Kind::Float)) / 2.0,
            same_identity_cosine: mean_cos(&part(3), &part(0)),
            transfer_cosine: mean_cos(&part(2), &part(1)),
            leak_cosine: mean_cos(&part(2), &part(0)),
        })
    })
}

/// Outcome of [`train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub history: Vec<LossReport>,
    pub probes: Vec<ProbeReport>,
}

fn write_line<T: Serialize>(w: &mut impl Write, v: &T) -> Result<()> {
    serde_json::to_writer(&mut *w, v)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Runs `cfg.iterations` steps, writing `train_log.jsonl`, `probes.jsonl`,
/// periodic `step_XXXXXX.ckpt` files and `model.ckpt` under `out`.
///
/// On divergence the error names the last checkpoint written, which is left
/// untouched.
pub fn train(ds: &IdentityDataset, cfg: &TrainConfig, recognizer: RecognizerAdapter, out: &Path) -> Result<TrainOutcome> {
    ds.validate()?;
    if ds.image_size as i64 != cfg.model.image_size {
        return Err(Error::Config(format!(
            "dataset is {}px but model.image_size is {}",
            ds.image_size, cfg.model.image_size
        )));
    }
    fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(cfg, recognizer)?;
    let mut log = BufWriter::new(File::create(out.join("train_log.jsonl"))?);
    let mut probe_log = BufWriter::new(File::create(out.join("probes.jsonl"))?);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut probes = Vec::new();
    let mut last_good: Option<PathBuf> = None;
    let started = std::time::Instant::now();
    while trainer.step < cfg.iterations {
        let pair = sample_pair(ds, Split::Train, trainer.step, cfg.batch_size, &mut trainer.rng)?;
        let report = match trainer.train_step(&pair) {
            Ok(r) => r,
            Err(Error::FatalDivergence { step, detail }) => {
                log.flush()?;
                let kept = last_good.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into());
                return Err(Error::FatalDivergence { step, detail: format!("{detail}; last good checkpoint: {kept}") });
            }
            Err(e) => return Err(e),
        };
        write_line(&mut log, &report)?;
        history.push(report);
        let step = trainer.step;
        if cfg.probe_every > 0 && step % cfg.probe_every == 0 && step < cfg.iterations {
            let p = trainer.probe(ds)?;
            log::info!(
                "step {step} ({:.0}s): rec L1 {:.4}, same {:.3}, transfer {:.3}, leak {:.3}",
                started.elapsed().as_secs_f64(),
                p.reconstruction_l1,
                p.same_identity_cosine,
                p.transfer_cosine,
                p.leak_cosine
            );
            write_line(&mut probe_log, &p)?;
            probes.push(p);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && step < cfg.iterations {
            let path = out.join(format!("step_{step:06}.ckpt"));
            trainer.checkpoint()?.save(&path)?;
            last_good = Some(path);
        }
    }
    let p = trainer.probe(ds)?;
    log::info!("final probe: {}", serde_json::to_string(&p)?);
    write_line(&mut probe_log, &p)?;
    probes.push(p);
    log.flush()?;
    probe_log.flush()?;
    let path = out.join("model.ckpt");
    trainer.checkpoint()?.save(&path)?;
    Ok(TrainOutcome { checkpoint: path, history, probes })
}
