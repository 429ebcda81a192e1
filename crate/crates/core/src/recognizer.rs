//! Toy face recognizer: pretraining on a sprite pool disjoint from the
//! anonymizer's data, and threshold calibration at a target false-accept rate.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use tch::nn::{self, OptimizerConfig};
use tch::{Kind, Tensor};

use crate::checkpoint::{check_fields, Checkpoint};
use crate::data::{toy_identity, Split};
use crate::error::{Error, Result};
use crate::evaluation::tpr_at_far;
use crate::model::{seeded, RecognizerAdapter, RecognizerConfig};

pub const CHECKPOINT_KIND: &str = "recognizer";

/// Identity pools are drawn from this namespace so they never coincide with
/// the anonymizer's toy identities.
const POOL_NAMESPACE: u64 = 0x5EC0_9A11;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognizerTrainConfig {
    pub net: RecognizerConfig,
    pub identities: usize,
    pub per_identity: usize,
    pub calib_identities: usize,
    pub calib_per_identity: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-classifier scale and additive margin.
    pub scale: f64,
    pub margin: f64,
    pub far: f64,
    pub seed: u64,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            net: RecognizerConfig::default(),
            identities: 120,
            per_identity: 20,
            calib_identities: 40,
            calib_per_identity: 10,
            steps: 1500,
            batch_size: 48,
            lr: 0.002,
            scale: 16.0,
            margin: 0.2,
            far: 0.001,
            seed: 11,
        }
    }
}

impl RecognizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.per_identity < 1 || self.calib_identities < 2 || self.calib_per_identity < 2 {
            return Err(Error::Config("recognizer pools need at least two identities".into()));
        }
        if !(self.lr >= 0.0 && self.far > 0.0 && self.far < 1.0 && self.batch_size > 0) {
            return Err(Error::Config(format!("invalid recognizer training settings: {self:?}")));
        }
        Ok(())
    }
}

fn pool(seed: u64, first: usize, count: usize, per: usize, size: usize) -> (Tensor, Vec<i64>) {
    let mut pixels = Vec::with_capacity(count * per * 3 * size * size);
    let mut labels = Vec::with_capacity(count * per);
    for i in 0..count {
        let id = toy_identity(seed ^ POOL_NAMESPACE, first + i, per, size, Split::Train);
        for p in &id.pixels {
            pixels.extend_from_slice(p);
        }
        labels.extend(std::iter::repeat(i as i64).take(per));
    }
    let n = labels.len() as i64;
    (Tensor::from_slice(&pixels).view([n, 3, size as i64, size as i64]), labels)
}

/// Trains a recognizer and calibrates its threshold; the result is frozen.
pub fn pretrain(cfg: &RecognizerTrainConfig) -> Result<RecognizerAdapter> {
    cfg.validate()?;
    let size = cfg.net.image_size as usize;
    let (images, labels) = pool(cfg.seed, 0, cfg.identities, cfg.per_identity, size);
    let (adapter, classes) = seeded(cfg.seed, || {
        let adapter = RecognizerAdapter::new(&cfg.net);
        let classes = adapter.vs.root().var(
            "classifier",
            &[cfg.identities as i64, cfg.net.d_id],
            nn::Init::Randn { mean: 0.0, stdev: 1.0 },
        );
        (adapter, classes)
    });
    let mut opt = nn::Adam::default().build(&adapter.vs, cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<i64> = (0..labels.len() as i64).collect();
    let mut cursor = order.len();
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        while idx.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let index = Tensor::from_slice(&idx);
        let x = augment(&images.index_select(0, &index), &mut rng);
        let y = Tensor::from_slice(&idx.iter().map(|&i| labels[i as usize]).collect::<Vec<_>>());
        let e = crate::model::normalize_rows(&adapter.embed(&x));
        let w = crate::model::normalize_rows(&classes);
        let cos = e.matmul(&w.tr());
        let margin = y.one_hot(cfg.identities as i64).to_kind(Kind::Float) * cfg.margin;
        let loss = ((cos - margin) * cfg.scale).cross_entropy_for_logits(&y);
        opt.backward_step(&loss);
        if step % 250 == 0 {
            log::debug!("recognizer step {step} loss {:.4}", loss.double_value(&[]));
        }
    }
    let mut adapter = strip_classifier(adapter, &cfg.net)?;
    calibrate(&mut adapter, cfg)?;
    Ok(adapter.frozen())
}

/// Small random shifts so the embedding does not key on exact pixel positions.
fn augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Tensor {
    let dx = rng.gen_range(-2..=2i64);
    let dy = rng.gen_range(-2..=2i64);
    x.roll([dy, dx], [2, 3])
}

fn strip_classifier(trained: RecognizerAdapter, net: &RecognizerConfig) -> Result<RecognizerAdapter> {
    let mut ck = Checkpoint::new(CHECKPOINT_KIND, 0, serde_json::Value::Null);
    ck.add_var_store("net", &trained.vs);
    ck.blobs.remove("net/classifier");
    let fresh = seeded(0, || RecognizerAdapter::new(net));
    ck.load_var_store("net", &fresh.vs)?;
    Ok(fresh)
}

/// Sets `threshold` to the cosine that meets `cfg.far` on impostor pairs of a
/// held-out identity pool.
pub fn calibrate(adapter: &mut RecognizerAdapter, cfg: &RecognizerTrainConfig) -> Result<()> {
    let size = cfg.net.image_size as usize;
    let (images, labels) = pool(cfg.seed, cfg.identities, cfg.calib_identities, cfg.calib_per_identity, size);
    let e = tch::no_grad(|| crate::model::normalize_rows(&adapter.embed(&images)));
    let sims = crate::data::tensor_to_vec_f64(&e.matmul(&e.tr()));
    let n = labels.len();
    let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            let s = sims[i * n + j];
            if labels[i] == labels[j] {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    let r = tpr_at_far(&genuine, &impostor, cfg.far)?;
    log::info!(
        "recognizer calibrated: threshold {:.4} at FAR {} (calibration TPR {:.3})",
        r.threshold,
        cfg.far,
        r.tpr
    );
    adapter.threshold = r.threshold;
    adapter.far = cfg.far;
    Ok(())
}

/// `trained_with` is recorded so cached recognizers can be matched to the
/// settings that produced them.
pub fn to_checkpoint(adapter: &RecognizerAdapter, trained_with: Option<&RecognizerTrainConfig>) -> Result<Checkpoint> {
    let mut ck = Checkpoint::new(CHECKPOINT_KIND, 0, serde_json::to_value(adapter.net.config())?);
    ck.header.extra = serde_json::json!({
        "threshold": adapter.threshold,
        "far": adapter.far,
        "trained_with": trained_with,
    });
    ck.add_var_store("net", &adapter.vs);
    Ok(ck)
}

pub fn from_checkpoint(ck: &Checkpoint) -> Result<RecognizerAdapter> {
    let cfg: RecognizerConfig = serde_json::from_value(ck.header.config.clone())
        .map_err(|e| Error::IncompatibleCheckpoint(format!("recognizer config: {e}")))?;
    let mut adapter = seeded(0, || RecognizerAdapter::new(&cfg));
    ck.load_var_store("net", &adapter.vs)?;
    let extra = &ck.header.extra;
    adapter.threshold = extra["threshold"]
        .as_f64()
        .ok_or_else(|| Error::IncompatibleCheckpoint("recognizer threshold missing".into()))?;
    adapter.far = extra["far"].as_f64().unwrap_or(0.001);
    Ok(adapter.frozen())
}

pub fn save(adapter: &RecognizerAdapter, trained_with: Option<&RecognizerTrainConfig>, path: &Path) -> Result<()> {
    to_checkpoint(adapter, trained_with)?.save(path)
}

pub fn load(path: &Path) -> Result<RecognizerAdapter> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(CHECKPOINT_KIND)?;
    from_checkpoint(&ck)
}

/// Loads `path` if it was trained with exactly `cfg`, otherwise trains and
/// overwrites it.
pub fn load_or_pretrain(path: &Path, cfg: &RecognizerTrainConfig) -> Result<RecognizerAdapter> {
    if path.exists() {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(CHECKPOINT_KIND)?;
        let want = serde_json::json!({ "trained_with": cfg });
        if check_fields(&ck.header.extra, &want, &["trained_with"]).is_ok() {
            return from_checkpoint(&ck);
        }
        log::info!("cached recognizer at {} was trained with other settings; retraining", path.display());
    }
    let adapter = pretrain(cfg)?;
    save(&adapter, Some(cfg), path)?;
    Ok(adapter)
}
