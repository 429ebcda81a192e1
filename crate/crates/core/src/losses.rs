//! Training objectives.
//!
//! Every function is a pure map from model outputs to scalar tensors, so the
//! same code serves the training loop, the finite-difference checks and the
//! closed-form unit tests.

use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::model::{Generator, PairDiscriminator, RecognizerAdapter};

/// Logits are clamped to this magnitude before any log-sigmoid.
pub const LOGIT_CLAMP: f64 = 15.0;

/// Same-identity flag of a training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct PairLabel(u8);

impl PairLabel {
    pub const SAME: PairLabel = PairLabel(1);
    pub const DIFFERENT: PairLabel = PairLabel(0);

    pub fn new(c: u8) -> Result<Self> {
        match c {
            0 | 1 => Ok(Self(c)),
            _ => Err(Error::Invalid(format!("pair label must be 0 or 1, got {c}"))),
        }
    }

    pub fn c(self) -> u8 {
        self.0
    }

    pub fn is_same(self) -> bool {
        self.0 == 1
    }
}

impl TryFrom<u8> for PairLabel {
    type Error = Error;
    fn try_from(c: u8) -> Result<Self> {
        Self::new(c)
    }
}

impl From<PairLabel> for u8 {
    fn from(l: PairLabel) -> u8 {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_con: f64,
    pub lambda_id: f64,
    pub lambda_adv: f64,
    pub lambda_rec: f64,
    /// Weight of the smoothing term inside the identity loss.
    pub lambda_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_con: 1.0, lambda_id: 1.0, lambda_adv: 1.0, lambda_rec: 1.0, lambda_smooth: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_con, self.lambda_id, self.lambda_adv, self.lambda_rec, self.lambda_smooth];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SmoothingConfig {
    pub epsilon: f64,
    /// The term is evaluated on `batch / batch_shrink` rows.
    pub batch_shrink: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { epsilon: 1e-4, batch_shrink: 2 }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.01) {
            return Err(Error::Config(format!("epsilon {} must be in (0, 0.01)", self.epsilon)));
        }
        if self.batch_shrink == 0 {
            return Err(Error::Config("batch_shrink must be at least 1".into()));
        }
        Ok(())
    }
}

/// Random patch sizes as fractions of the image side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSpec {
    pub min_frac: f64,
    pub max_frac: f64,
    pub count: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { min_frac: 0.125, max_frac: 0.25, count: 4 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_frac > 0.0 && self.min_frac <= self.max_frac && self.max_frac < 1.0) {
            return Err(Error::Config(format!(
                "patch fractions need 0 < min <= max < 1, got {} and {}",
                self.min_frac, self.max_frac
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("patch count must be positive".into()));
        }
        Ok(())
    }

    /// Inclusive range of patch sides in pixels for an image of side `size`.
    pub fn side_range(&self, size: i64) -> Result<(i64, i64)> {
        self.validate()?;
        let lo = ((self.min_frac * size as f64).ceil() as i64).max(1);
        let hi = (self.max_frac * size as f64).floor() as i64;
        if hi < lo || hi > size {
            return Err(Error::Config(format!("no integer patch side fits in {size}px for {self:?}")));
        }
        Ok((lo, hi))
    }
}

/// Square crop location: image index in the batch, top-left corner, side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchBox {
    pub image: i64,
    pub top: i64,
    pub left: i64,
    pub side: i64,
}

/// Draws `spec.count` boxes per image.
pub fn patch_boxes<R: Rng + ?Sized>(
    batch: i64,
    size: i64,
    spec: &PatchSpec,
    rng: &mut R,
) -> Result<Vec<PatchBox>> {
    let (lo, hi) = spec.side_range(size)?;
    let mut boxes = Vec::with_capacity(batch as usize * spec.count);
    for image in 0..batch {
        for _ in 0..spec.count {
            let side = rng.gen_range(lo..=hi);
            let top = rng.gen_range(0..=size - side);
            let left = rng.gen_range(0..=size - side);
            boxes.push(PatchBox { image, top, left, side });
        }
    }
    Ok(boxes)
}

/// Crops every box and resizes it to `out x out`.
pub fn crop_patches(x: &Tensor, boxes: &[PatchBox], out: i64) -> Result<Tensor> {
    let s = x.size();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected an image batch, got {s:?}")));
    }
    let crops: Vec<Tensor> = boxes
        .iter()
        .map(|b| {
            let p = x.narrow(0, b.image, 1).narrow(2, b.top, b.side).narrow(3, b.left, b.side);
            if b.side == out {
                p
            } else {
                p.upsample_bilinear2d([out, out], false, None, None)
            }
        })
        .collect();
    Ok(Tensor::cat(&crops, 0))
}

/// Draws boxes and crops them; calling it with the same RNG state on two
/// images of a pair crops both at identical coordinates.
pub fn extract_patches<R: Rng + ?Sized>(
    x: &Tensor,
    spec: &PatchSpec,
    out: i64,
    rng: &mut R,
) -> Result<(Tensor, Vec<PatchBox>)> {
    let s = x.size();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Shape(format!("expected a square image batch, got {s:?}")));
    }
    let boxes = patch_boxes(s[0], s[2], spec, rng)?;
    Ok((crop_patches(x, &boxes, out)?, boxes))
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.size(), b.size())));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b)?;
    Ok((a - b).abs().mean(a.kind()))
}

/// Content loss for a same-identity pair.
pub fn content_loss_same(x_cross: &Tensor, x_id1: &Tensor) -> Result<Tensor> {
    l1(x_cross, x_id1)
}

pub fn reconstruction_loss(x_id1: &Tensor, x_rec: &Tensor) -> Result<Tensor> {
    l1(x_id1, x_rec)
}

fn clamp_logits(l: &Tensor) -> Tensor {
    l.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// `-log sigmoid(l)` averaged, the generator side of a logistic GAN.
pub fn generator_logistic(fake: &Tensor) -> Tensor {
    (-clamp_logits(fake)).softplus().mean(fake.kind())
}

/// `-log sigmoid(real) - log(1 - sigmoid(fake))` averaged over pairs.
pub fn discriminator_logistic(real: &Tensor, fake: &Tensor) -> Tensor {
    let r = (-clamp_logits(real)).softplus().mean(real.kind());
    let f = clamp_logits(fake).softplus().mean(fake.kind());
    r + f
}

/// Generator and discriminator terms of a loss that has both.
#[derive(Debug)]
pub struct AdversarialTerms {
    pub generator: Tensor,
    pub discriminator: Tensor,
}

/// Local patch loss for a different-identity pair.
///
/// Boxes `A` are drawn first and shared by `x_cross` and the real content
/// image; reference boxes `B` come from `x_id1` only. The discriminator sees
/// `(A(x_id1), B(x_id1))` as real and `(A(x_cross), B(x_id1))` as fake, so it
/// learns whether a patch is consistent with the content image's texture.
pub fn content_loss_diff<R: Rng + ?Sized>(
    x_cross: &Tensor,
    x_id1: &Tensor,
    d_local: &PairDiscriminator,
    spec: &PatchSpec,
    patch_size: i64,
    rng: &mut R,
) -> Result<AdversarialTerms> {
    same_shape(x_cross, x_id1)?;
    let s = x_cross.size();
    let boxes_a = patch_boxes(s[0], s[2], spec, rng)?;
    let boxes_b = patch_boxes(s[0], s[2], spec, rng)?;
    let reference = crop_patches(x_id1, &boxes_b, patch_size)?;
    let fake_patch = crop_patches(x_cross, &boxes_a, patch_size)?;
    let real_patch = crop_patches(x_id1, &boxes_a, patch_size)?;

    let generator = generator_logistic(&d_local.forward(&fake_patch, &reference)?);
    let fake = d_local.forward(&fake_patch.detach(), &reference)?;
    let real = d_local.forward(&real_patch, &reference)?;
    Ok(AdversarialTerms { generator, discriminator: discriminator_logistic(&real, &fake) })
}

/// Content loss of one pair: L1 for same-identity pairs, the local patch
/// loss otherwise. Only the selected branch is evaluated; the discriminator
/// term is present for different-identity pairs only.
pub fn content_loss<R: Rng + ?Sized>(
    label: PairLabel,
    x_cross: &Tensor,
    x_id1: &Tensor,
    d_local: &PairDiscriminator,
    spec: &PatchSpec,
    patch_size: i64,
    rng: &mut R,
) -> Result<(Tensor, Option<Tensor>)> {
    if label.is_same() {
        Ok((content_loss_same(x_cross, x_id1)?, None))
    } else {
        let terms = content_loss_diff(x_cross, x_id1, d_local, spec, patch_size, rng)?;
        Ok((terms.generator, Some(terms.discriminator)))
    }
}

/// Row-wise cosine similarity of raw embeddings.
pub fn row_cosine(a: &Tensor, b: &Tensor) -> Tensor {
    let k = a.kind();
    let dot = (a * b).sum_dim_intlist([1i64].as_slice(), false, k);
    let na = a.square().sum_dim_intlist([1i64].as_slice(), false, k).sqrt();
    let nb = b.square().sum_dim_intlist([1i64].as_slice(), false, k).sqrt();
    dot / (na * nb).clamp_min(1e-12)
}

/// `1 - cos(a, b)` computed as half the squared distance of the normalized
/// rows, which keeps precision when the vectors are nearly parallel.
pub fn row_cosine_distance(a: &Tensor, b: &Tensor) -> Tensor {
    let k = a.kind();
    let an = crate::model::normalize_rows(a);
    let bn = crate::model::normalize_rows(b);
    (an - bn).square().sum_dim_intlist([1i64].as_slice(), false, k) * 0.5
}

/// Identity consistency from precomputed embeddings.
pub fn identity_consistency_from_embeddings(r_cross: &Tensor, r_y: &Tensor, z_y_id: &Tensor) -> Result<Tensor> {
    same_shape(r_cross, r_y)?;
    same_shape(z_y_id, r_y)?;
    let k = r_y.kind();
    let term = (1.0f64 - row_cosine(r_cross, r_y)) + (1.0f64 - row_cosine(z_y_id, r_y));
    Ok(term.mean(k))
}

/// `1 - cos(R(x_cross), R(y)) + 1 - cos(z_y, R(y))`, batch mean.
pub fn identity_consistency_loss(
    x_cross: &Tensor,
    y_id: &Tensor,
    z_y_id: &Tensor,
    r: &RecognizerAdapter,
) -> Result<Tensor> {
    let r_cross = r.embed(x_cross);
    let r_y = r.embed(y_id).detach();
    identity_consistency_from_embeddings(&r_cross, &r_y, &z_y_id.to_kind(r_y.kind()))
}

/// Batched spherical interpolation of unit rows; `t` has one entry per row.
///
/// Uses `omega = 2 atan2(|a - b|, |a + b|)` with a tiny floor under the
/// square roots so gradients stay finite when `a == b`.
pub fn slerp_rows(a: &Tensor, b: &Tensor, t: &Tensor) -> Tensor {
    let k = a.kind();
    let d = (a - b).square().sum_dim_intlist([1i64].as_slice(), true, k);
    let s = (a + b).square().sum_dim_intlist([1i64].as_slice(), true, k);
    let omega = (d + 1e-20).sqrt().atan2(&(s + 1e-20).sqrt()) * 2.0;
    let t = t.view([-1, 1]).to_kind(k);
    let sin_o = omega.sin();
    let wa = ((1.0f64 - &t) * &omega).sin() / &sin_o;
    let wb = (&t * &omega).sin() / &sin_o;
    wa * a + wb * b
}

/// Smoothing term value plus its `epsilon^2`-normalized counterpart.
#[derive(Debug)]
pub struct SmoothingTerm {
    pub loss: Tensor,
    /// `loss / epsilon^2`: the perceptual-path-length scale, logged only.
    pub path_length: f64,
}

/// Decodes at `slerp(z_x, z_y; t)` and `t + epsilon` and compares the
/// recognizer embeddings. `t` is drawn per row from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn identity_smoothing_loss<R: Rng + ?Sized>(
    z_x_con: &Tensor,
    z_x_id: &Tensor,
    z_y_id: &Tensor,
    generator: &Generator,
    r: &RecognizerAdapter,
    cfg: &SmoothingConfig,
    rng: &mut R,
) -> Result<SmoothingTerm> {
    cfg.validate()?;
    same_shape(z_x_id, z_y_id)?;
    let b = z_x_id.size()[0];
    let k = z_x_id.kind();
    let cos = row_cosine(z_x_id, z_y_id).detach();
    let min_cos = cos.min().double_value(&[]);
    if min_cos <= -1.0 + crate::geometry::ANTIPODAL_TOLERANCE {
        return Err(Error::AmbiguousPath(1.0 + min_cos));
    }
    let ts: Vec<f64> = (0..b).map(|_| rng.gen::<f64>()).collect();
    let t = Tensor::from_slice(&ts).to_kind(k);
    let z0 = slerp_rows(z_x_id, z_y_id, &t);
    let z1 = slerp_rows(z_x_id, z_y_id, &(&t + cfg.epsilon));
    let decoded = generator.decode_tensors(&Tensor::cat(&[z_x_con, z_x_con], 0), &Tensor::cat(&[z0, z1], 0))?;
    let e = r.embed(&decoded);
    let (e0, e1) = (e.narrow(0, 0, b), e.narrow(0, b, b));
    let loss = row_cosine_distance(&e0, &e1).mean(e.kind());
    let path_length = loss.double_value(&[]) / (cfg.epsilon * cfg.epsilon);
    Ok(SmoothingTerm { loss, path_length })
}

pub fn identity_loss(consistency: &Tensor, smoothing: &Tensor, lambda_smooth: f64) -> Tensor {
    consistency + smoothing * lambda_smooth
}

/// Pair adversarial loss: `(x_id1, y_id)` real, `(x_rec, x_cross)` fake.
pub fn adversarial_loss(
    x_id1: &Tensor,
    y_id: &Tensor,
    x_rec: &Tensor,
    x_cross: &Tensor,
    d: &PairDiscriminator,
) -> Result<AdversarialTerms> {
    let generator = generator_logistic(&d.forward(x_rec, x_cross)?);
    let real = d.forward(x_id1, y_id)?;
    let fake = d.forward(&x_rec.detach(), &x_cross.detach())?;
    Ok(AdversarialTerms { generator, discriminator: discriminator_logistic(&real, &fake) })
}

/// Zero-centred gradient penalty on real pairs: mean squared input-gradient norm.
/// Grad mode is forced on, since the term needs its own backward pass.
pub fn gradient_penalty(d: &PairDiscriminator, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    tch::with_grad(|| penalty_inner(d, a, b))
}

fn penalty_inner(d: &PairDiscriminator, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let a = a.detach().set_requires_grad(true);
    let b = b.detach().set_requires_grad(true);
    let logits = d.forward(&a, &b)?;
    let grads = Tensor::run_backward(&[logits.sum(logits.kind())], &[&a, &b], true, true);
    let k = a.kind();
    let per_sample = grads
        .iter()
        .map(|g| g.square().sum_dim_intlist([1i64, 2, 3].as_slice(), false, k))
        .reduce(|x, y| x + y)
        .expect("two gradients");
    Ok(per_sample.mean(k))
}

/// Unweighted loss terms of one generator step.
#[derive(Debug)]
pub struct LossTerms {
    pub content: Tensor,
    pub id_consistency: Tensor,
    pub id_smoothing: Tensor,
    pub adversarial: Tensor,
    pub reconstruction: Tensor,
}

/// Per-term values of one step, written as one JSON line of the training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub c: u8,
    pub content: f64,
    pub id_consistency: f64,
    pub id_smoothing: f64,
    pub identity: f64,
    pub adversarial: f64,
    pub reconstruction: f64,
    /// Weighted contributions; they sum to `total`.
    pub weighted: [f64; 4],
    pub total: f64,
    pub smoothing_path_length: f64,
    pub disc: f64,
    pub disc_local: f64,
    pub penalty: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.content,
            self.id_consistency,
            self.id_smoothing,
            self.adversarial,
            self.reconstruction,
            self.total,
            self.disc,
            self.disc_local,
            self.penalty,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Weighted sum of the generator terms. Terms with zero weight are left out
/// of the graph entirely, so they cannot reach any gradient.
pub fn overall_loss(terms: &LossTerms, w: &LossWeights) -> (Tensor, LossReport) {
    let id = identity_loss(&terms.id_consistency, &terms.id_smoothing, w.lambda_smooth);
    let parts = [
        (w.lambda_con, &terms.content),
        (w.lambda_id, &id),
        (w.lambda_adv, &terms.adversarial),
        (w.lambda_rec, &terms.reconstruction),
    ];
    let mut total: Option<Tensor> = None;
    let mut weighted = [0.0; 4];
    for (i, (lambda, term)) in parts.iter().enumerate() {
        if *lambda == 0.0 {
            continue;
        }
        let contrib = *term * *lambda;
        weighted[i] = contrib.double_value(&[]);
        total = Some(match total {
            Some(t) => t + contrib,
            None => contrib,
        });
    }
    let total = total.unwrap_or_else(|| Tensor::zeros([], (terms.content.kind(), terms.content.device())));
    let v = |t: &Tensor| t.double_value(&[]);
    let report = LossReport {
        content: v(&terms.content),
        id_consistency: v(&terms.id_consistency),
        id_smoothing: v(&terms.id_smoothing),
        identity: v(&id),
        adversarial: v(&terms.adversarial),
        reconstruction: v(&terms.reconstruction),
        weighted,
        total: weighted.iter().sum(),
        ..Default::default()
    };
    (total, report)
}

/// Mean of `t` as `f64`.
pub fn scalar(t: &Tensor) -> f64 {
    t.to_kind(Kind::Double).double_value(&[])
}
