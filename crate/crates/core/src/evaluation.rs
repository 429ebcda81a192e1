//! Verification, ranking, image-quality and retention protocols.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize, Serializer};
use tch::Tensor;

use crate::adapters::{perceptual_distance, pooled_features, AttributeClassifier, FaceDetector, FeatureExtractor};
use crate::anonymizer::{sweep, AnonymizationRequest, AnonymizerModel};
use crate::data::{tensor_to_vec, IdentityDataset, IdentityImages, ImageTensor};
use crate::error::{Error, Result};
use crate::frames::{CropBox, Frame};
use crate::model::{cosine, RecognizerAdapter};

/// Result of a threshold search on impostor scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TprAtFar {
    pub tpr: f64,
    pub threshold: f64,
    /// True when no impostor score met the FAR target and the threshold was
    /// placed just above the highest impostor score instead.
    pub fallback: bool,
}

/// Threshold = smallest impostor score whose empirical FAR (fraction of
/// impostors scoring `>=` it) is at most `far`; scores equal to the threshold
/// are accepted. When no impostor score qualifies, the threshold is the next
/// float above the highest impostor score.
pub fn tpr_at_far(genuine: &[f64], impostor: &[f64], far: f64) -> Result<TprAtFar> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(Error::Invalid("tpr_at_far needs non-empty genuine and impostor scores".into()));
    }
    if genuine.iter().chain(impostor).any(|s| !s.is_finite()) || !(0.0..=1.0).contains(&far) {
        return Err(Error::Invalid("scores must be finite and far in [0, 1]".into()));
    }
    let mut imp = impostor.to_vec();
    imp.sort_by(f64::total_cmp);
    let n = imp.len();
    let mut threshold = None;
    let mut i = 0;
    while i < n {
        // imp[i] starts a run of equal scores; n - i impostors score >= it
        if (n - i) as f64 / n as f64 <= far {
            threshold = Some(imp[i]);
            break;
        }
        let v = imp[i];
        while i < n && imp[i] == v {
            i += 1;
        }
    }
    let fallback = threshold.is_none();
    let threshold = threshold.unwrap_or_else(|| {
        log::warn!("far {far} is below 1/{n}; threshold placed above the highest impostor score");
        imp[n - 1].next_up()
    });
    let accepted = genuine.iter().filter(|&&s| s >= threshold).count();
    Ok(TprAtFar { tpr: accepted as f64 / genuine.len() as f64, threshold, fallback })
}


/// Maps one image to its anonymized version. `index` identifies the image
/// within a protocol run and seeds per-image randomness.
pub trait Anonymize {
    fn name(&self) -> &str;
    fn anonymize(&self, chw: &[f32], index: usize) -> Result<Vec<f32>>;
}

/// Null method: returns the input.
#[derive(Debug, Clone, Copy, Default)]
pub struct Passthrough;

impl Anonymize for Passthrough {
    fn name(&self) -> &str {
        "passthrough"
    }

    fn anonymize(&self, chw: &[f32], _index: usize) -> Result<Vec<f32>> {
        Ok(chw.to_vec())
    }
}

/// The trained model at a fixed angle; image `i` uses direction seed `seed + i`.
pub struct ModelAnonymizer<'a> {
    pub model: &'a AnonymizerModel,
    pub alpha: f64,
    pub seed: u64,
}

impl Anonymize for ModelAnonymizer<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn anonymize(&self, chw: &[f32], index: usize) -> Result<Vec<f32>> {
        let req = AnonymizationRequest {
            alpha: self.alpha,
            direction_seed: self.seed.wrapping_add(index as u64),
            theta: self.model.theta(),
        };
        let enc = self.model.encode_chw(chw)?;
        Ok(crate::anonymizer::anonymize_encoded(self.model, &enc, &req)?.image)
    }
}

/// Embeds images in batches; rows are raw recognizer embeddings.
pub fn embed_all(r: &RecognizerAdapter, images: &[Vec<f32>], size: usize) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let flat: Vec<f32> = chunk.concat();
        let t = Tensor::from_slice(&flat).view([chunk.len() as i64, 3, size as i64, size as i64]);
        out.extend(r.recognize(&ImageTensor::new(t)?)?);
    }
    Ok(out)
}

fn chw_of(group: &IdentityImages, i: usize) -> Vec<f32> {
    tensor_to_vec(&group.image(i))
}

/// Image pairs for verification. The second image of each pair is the one
/// that gets anonymized.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationProtocol {
    #[serde(skip)]
    pub images: Vec<Vec<f32>>,
    pub image_size: usize,
    pub genuine: Vec<(usize, usize)>,
    pub impostor: Vec<(usize, usize)>,
    pub far: f64,
    pub folds: usize,
}

impl VerificationProtocol {
    /// Every genuine pair of `groups` and every impostor pair, each image
    /// appearing once in the image list.
    pub fn all_pairs(groups: &[IdentityImages], image_size: usize, far: f64, folds: usize) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::Invalid("verification needs at least two identities".into()));
        }
        let mut images = Vec::new();
        let mut owner = Vec::new();
        for (g, group) in groups.iter().enumerate() {
            for i in 0..group.len() {
                images.push(chw_of(group, i));
                owner.push(g);
            }
        }
        let (mut genuine, mut impostor) = (Vec::new(), Vec::new());
        for a in 0..images.len() {
            for b in a + 1..images.len() {
                if owner[a] == owner[b] {
                    genuine.push((a, b));
                } else {
                    impostor.push((a, b));
                }
            }
        }
        Ok(Self { images, image_size, genuine, impostor, far, folds })
    }

    /// Subsamples genuine pairs to at most `n`, reproducibly.
    pub fn limit_genuine(mut self, n: usize, seed: u64) -> Self {
        if self.genuine.len() > n {
            self.genuine.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            self.genuine.truncate(n);
            self.genuine.sort();
        }
        self
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    pub method: String,
    pub before: TprAtFar,
    /// Original genuine pairs at the recognizer's calibrated threshold.
    pub before_tpr_calibrated: f64,
    /// Anonymized genuine pairs scored against the threshold of `before`.
    pub after_tpr: f64,
    /// Anonymized genuine pairs scored against the recognizer's own calibrated threshold.
    pub after_tpr_calibrated: f64,
    pub fold_after_tpr: Vec<f64>,
    pub fold_mean: f64,
    pub fold_std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Verification before and after anonymizing the second image of each pair.
pub fn verification_protocol(
    anon: &dyn Anonymize,
    r: &RecognizerAdapter,
    p: &VerificationProtocol,
) -> Result<VerificationReport> {
    if p.genuine.is_empty() || p.impostor.is_empty() || p.folds == 0 {
        return Err(Error::Invalid("verification needs genuine pairs, impostor pairs and folds".into()));
    }
    let emb = embed_all(r, &p.images, p.image_size)?;
    let score = |pairs: &[(usize, usize)], e2: &dyn Fn(usize) -> Vec<f32>| -> Vec<f64> {
        pairs.iter().map(|&(a, b)| cosine(&emb[a], &e2(b))).collect()
    };
    let genuine = score(&p.genuine, &|b| emb[b].clone());
    let impostor = score(&p.impostor, &|b| emb[b].clone());
    let before = tpr_at_far(&genuine, &impostor, p.far)?;

    let mut second: Vec<usize> = p.genuine.iter().map(|&(_, b)| b).collect();
    second.sort_unstable();
    second.dedup();
    let anonymized: Vec<Vec<f32>> =
        second.iter().map(|&b| anon.anonymize(&p.images[b], b)).collect::<Result<_>>()?;
    let anon_emb: BTreeMap<usize, Vec<f32>> =
        second.iter().copied().zip(embed_all(r, &anonymized, p.image_size)?).collect();
    let after = score(&p.genuine, &|b| anon_emb[&b].clone());
    let rate = |s: &[f64], t: f64| s.iter().filter(|&&v| v >= t).count() as f64 / s.len() as f64;

    let fold_len = after.len().div_ceil(p.folds);
    let folds: Vec<f64> = after.chunks(fold_len.max(1)).map(|c| rate(c, before.threshold)).collect();
    let (fold_mean, fold_std) = mean_std(&folds);
    Ok(VerificationReport {
        method: anon.name().to_string(),
        before_tpr_calibrated: rate(&genuine, r.threshold),
        before,
        after_tpr: rate(&after, before.threshold),
        after_tpr_calibrated: rate(&after, r.threshold),
        fold_after_tpr: folds,
        fold_mean,
        fold_std,
    })
}

/// A probe image; `gallery_image` names its own copy in the gallery so it can
/// be left out of the comparison.
#[derive(Debug, Clone)]
pub struct Probe {
    pub identity: usize,
    pub gallery_image: Option<usize>,
    pub image: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankResult {
    pub identity: String,
    pub pre_rank: usize,
    pub post_rank: usize,
    /// Best gallery cosine of the anonymized probe, over all identities.
    pub top1_cosine: f64,
    pub top1_identity: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RankingSummary {
    pub gallery_size: usize,
    pub median_pre_rank: f64,
    pub median_post_rank: f64,
    pub max_top1_cosine: f64,
    pub median_top1_cosine: f64,
    pub threshold: f64,
    /// A one-identity gallery ranks everything first.
    pub degenerate: bool,
    pub results: Vec<RankResult>,
}

/// Rank of `truth` among per-identity scores: 1 + identities scoring higher,
/// with equal scores ordered by gallery position.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores.iter().enumerate().filter(|&(i, &s)| s > t || (s == t && i < truth)).count()
}

fn identity_scores(probe: &[f32], gallery: &[Vec<Vec<f32>>], skip: Option<(usize, usize)>) -> Vec<f64> {
    gallery
        .iter()
        .enumerate()
        .map(|(g, imgs)| {
            imgs.iter()
                .enumerate()
                .filter(|&(i, _)| skip != Some((g, i)))
                .map(|(_, e)| cosine(probe, e))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}

/// Closed-set identification before and after anonymization. Identity
/// scores are the maximum cosine over that identity's gallery images; the
/// probe's own gallery copy is excluded.
pub fn ranking_protocol(
    anon: &dyn Anonymize,
    r: &RecognizerAdapter,
    gallery: &[IdentityImages],
    probes: &[Probe],
    image_size: usize,
) -> Result<RankingSummary> {
    if gallery.is_empty() {
        return Err(Error::Invalid("empty gallery".into()));
    }
    let emb: Vec<Vec<Vec<f32>>> = gallery
        .iter()
        .map(|g| embed_all(r, &(0..g.len()).map(|i| chw_of(g, i)).collect::<Vec<_>>(), image_size))
        .collect::<Result<_>>()?;
    let mut results = Vec::with_capacity(probes.len());
    for (k, p) in probes.iter().enumerate() {
        if p.identity >= gallery.len() {
            return Err(Error::Invalid(format!("probe {k} names identity {} outside the gallery", p.identity)));
        }
        let skip = p.gallery_image.map(|i| (p.identity, i));
        if gallery[p.identity].len() <= usize::from(skip.is_some()) {
            return Err(Error::Invalid(format!("probe {k}: its identity has no other gallery image")));
        }
        let e = embed_all(r, std::slice::from_ref(&p.image), image_size)?.remove(0);
        let pre = identity_scores(&e, &emb, skip);
        let a = anon.anonymize(&p.image, k)?;
        let ea = embed_all(r, std::slice::from_ref(&a), image_size)?.remove(0);
        let post = identity_scores(&ea, &emb, skip);
        let top = (0..post.len()).min_by_key(|&i| rank_of(&post, i)).unwrap_or(0);
        results.push(RankResult {
            identity: gallery[p.identity].tag.clone(),
            pre_rank: rank_of(&pre, p.identity),
            post_rank: rank_of(&post, p.identity),
            top1_cosine: post[top],
            top1_identity: gallery[top].tag.clone(),
        });
    }
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            f64::NAN
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        }
    };
    Ok(RankingSummary {
        gallery_size: gallery.len(),
        median_pre_rank: median(results.iter().map(|r| r.pre_rank as f64).collect()),
        median_post_rank: median(results.iter().map(|r| r.post_rank as f64).collect()),
        max_top1_cosine: results.iter().map(|r| r.top1_cosine).fold(f64::NEG_INFINITY, f64::max),
        median_top1_cosine: median(results.iter().map(|r| r.top1_cosine).collect()),
        threshold: r.threshold,
        degenerate: gallery.len() == 1,
        results,
    })
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

/// Pixel metrics on [0, 1] (L1) and [0, 255] (PSNR) scales.
#[derive(Debug, Clone, Serialize)]
pub struct ImageMetrics {
    pub count: usize,
    pub l1: f64,
    /// Infinite for identical inputs, written as the string `"inf"`.
    #[serde(serialize_with = "ser_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
    /// "detector" when a face region adapter chose the region, else "whole-image".
    pub region: String,
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - h).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn filter_valid(img: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|j| g[j] * img[r * w + c + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|j| g[j] * rows[(r + j) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of one channel pair on the [0, 255] scale with an 11x11 Gaussian
/// window (sigma 1.5), K1 = 0.01, K2 = 0.03, valid windows only.
pub fn ssim_channel(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW || a.len() != h * w || b.len() != h * w {
        return Err(Error::Shape(format!("SSIM needs matching planes of at least {SSIM_WINDOW}px")));
    }
    let g = gaussian_window();
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, oh, ow) = filter_valid(a, h, w, &g);
    let (mu_b, _, _) = filter_valid(b, h, w, &g);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &g);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &g);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &g);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / (oh * ow) as f64)
}

fn to_255(v: f32) -> f64 {
    ((v as f64).clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0
}

fn region_planes(chw: &[f32], size: usize, b: CropBox) -> Vec<Vec<f64>> {
    (0..3)
        .map(|k| {
            let mut p = Vec::with_capacity(b.side * b.side);
            for r in b.top..b.top + b.side {
                for c in b.left..b.left + b.side {
                    p.push(to_255(chw[k * size * size + r * size + c]));
                }
            }
            p
        })
        .collect()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Invalid("Fréchet distance needs at least two samples per set".into()));
    }
    let d = a[0].len();
    let fit = |x: &[Vec<f64>]| {
        let n = x.len();
        let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
        let mean = m.row_mean();
        let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
        let cov = centred.transpose() * &centred / (n as f64 - 1.0);
        (mean, cov)
    };
    let (ma, ca) = fit(a);
    let (mb, cb) = fit(b);
    let sqrt_psd = |m: DMatrix<f64>| {
        let sym = (&m + m.transpose()) * 0.5;
        let e = SymmetricEigen::new(sym);
        let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
        &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
    };
    let sa = sqrt_psd(ca.clone());
    let cross = sqrt_psd(&sa * &cb * &sa);
    let diff = (&ma - &mb).norm_squared();
    Ok((diff + ca.trace() + cb.trace() - 2.0 * cross.trace()).max(0.0))
}

/// L1, PSNR and SSIM inside the face region the detector finds on each
/// original (the whole image without a detector), plus perceptual distance
/// and FID when a feature extractor is supplied.
pub fn image_metrics(
    originals: &[Vec<f32>],
    anonymized: &[Vec<f32>],
    size: usize,
    region: Option<&dyn FaceDetector>,
    features: Option<&dyn FeatureExtractor>,
) -> Result<ImageMetrics> {
    if originals.len() != anonymized.len() {
        return Err(Error::Shape(format!("{} originals vs {} anonymized", originals.len(), anonymized.len())));
    }
    if originals.is_empty() {
        return Err(Error::Invalid("no images to compare".into()));
    }
    let full = CropBox { top: 0, left: 0, side: size };
    let (mut abs, mut sq, mut n, mut ssim) = (0.0, 0.0, 0usize, 0.0);
    for (o, a) in originals.iter().zip(anonymized) {
        if o.len() != 3 * size * size || a.len() != o.len() {
            return Err(Error::Shape("image buffers do not match the stated size".into()));
        }
        let b = match region {
            Some(d) => d
                .detect(&Frame::new(size, size, o.clone())?)
                .first()
                .copied()
                .filter(|b| b.side >= SSIM_WINDOW)
                .unwrap_or(full),
            None => full,
        };
        let (po, pa) = (region_planes(o, size, b), region_planes(a, size, b));
        for k in 0..3 {
            for (x, y) in po[k].iter().zip(&pa[k]) {
                abs += (x - y).abs() / 255.0;
                sq += (x - y).powi(2);
                n += 1;
            }
            ssim += ssim_channel(&po[k], &pa[k], b.side, b.side)? / 3.0;
        }
    }
    let mse = sq / n as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (255.0f64 * 255.0 / mse).log10() };
    let (lpips, fid) = match features {
        Some(f) => {
            let stack = |v: &[Vec<f32>]| Tensor::from_slice(&v.concat()).view([v.len() as i64, 3, size as i64, size as i64]);
            let (to, ta) = (stack(originals), stack(anonymized));
            let d = perceptual_distance(f, &to, &ta)?;
            let fid = if originals.len() >= 2 {
                Some(frechet_distance(&pooled_features(f, &to)?, &pooled_features(f, &ta)?)?)
            } else {
                None
            };
            (Some(d.iter().sum::<f64>() / d.len() as f64), fid)
        }
        None => (None, None),
    };
    Ok(ImageMetrics {
        count: originals.len(),
        l1: abs / n as f64,
        psnr,
        ssim: ssim / originals.len() as f64,
        lpips,
        fid,
        region: if region.is_some() { "detector" } else { "whole-image" }.into(),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("spearman needs two equal-length series of length >= 2".into()));
    }
    let ranks = |v: &[f64]| {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdentityCurve {
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub cosines: Vec<f64>,
    pub threshold: f64,
    pub theta: f64,
}

impl IdentityCurve {
    pub fn spearman(&self) -> Result<f64> {
        spearman(&self.alphas, &self.cosines)
    }

    /// `alpha,cosine,threshold` rows for plotting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha,cosine,threshold\n");
        for (a, c) in self.alphas.iter().zip(&self.cosines) {
            s.push_str(&format!("{a},{c},{}\n", self.threshold));
        }
        s
    }
}

/// Recognizer cosine between the source and each decoded point of one sweep row.
pub fn identity_curve(model: &AnonymizerModel, source: &[f32], seed: u64, alphas: &[f64]) -> Result<IdentityCurve> {
    let enc = model.encode_chw(source)?;
    let s = sweep(model, &enc, alphas, &[seed])?;
    Ok(IdentityCurve {
        seed,
        alphas: alphas.to_vec(),
        cosines: s.cosines.into_iter().next().unwrap_or_default(),
        threshold: model.threshold(),
        theta: model.theta(),
    })
}

/// Fraction of images with at least one detection, per detector.
pub fn detection_rate(images: &[Vec<f32>], size: usize, detectors: &[&dyn FaceDetector]) -> Result<BTreeMap<String, f64>> {
    if detectors.is_empty() {
        return Err(Error::AdapterUnavailable("no face detector supplied".into()));
    }
    if images.is_empty() {
        return Err(Error::Invalid("no images to run detectors on".into()));
    }
    let frames: Vec<Frame> = images.iter().map(|i| Frame::new(size, size, i.clone())).collect::<Result<_>>()?;
    Ok(detectors
        .iter()
        .map(|d| {
            let hits = frames.iter().filter(|f| !d.detect(f).is_empty()).count();
            (d.name().to_string(), hits as f64 / frames.len() as f64)
        })
        .collect())
}

/// Per-attribute fraction of images whose predicted attribute is unchanged.
pub fn attribute_retention(
    originals: &[Vec<f32>],
    anonymized: &[Vec<f32>],
    size: usize,
    classifier: Option<&dyn AttributeClassifier>,
) -> Result<BTreeMap<String, f64>> {
    let clf = classifier.ok_or_else(|| Error::AdapterUnavailable("no attribute classifier supplied".into()))?;
    if originals.len() != anonymized.len() {
        return Err(Error::Shape(format!("{} originals vs {} anonymized", originals.len(), anonymized.len())));
    }
    if originals.is_empty() {
        return Err(Error::Invalid("no images to compare".into()));
    }
    let names = clf.names();
    let mut same = vec![0usize; names.len()];
    for (o, a) in originals.iter().zip(anonymized) {
        let (po, pa) = (clf.classify(o, size), clf.classify(a, size));
        for (k, s) in same.iter_mut().enumerate() {
            if po[k] == pa[k] {
                *s += 1;
            }
        }
    }
    Ok(names.iter().zip(same).map(|(n, s)| (n.to_string(), s as f64 / originals.len() as f64)).collect())
}

/// Settings of [`evaluate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Anonymization angle is `theta + alpha_margin`.
    pub alpha_margin: f64,
    pub far: f64,
    pub folds: usize,
    pub max_genuine_pairs: usize,
    /// Validation images per identity used as anonymization sources.
    pub sources_per_identity: usize,
    /// Gallery images per identity in the ranking protocol.
    pub gallery_per_identity: usize,
    pub curve_seeds: Vec<u64>,
    pub curve_alphas: Vec<f64>,
    /// Sources per identity that get identity curves.
    pub curve_sources: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            alpha_margin: 0.3,
            far: 0.001,
            folds: 5,
            max_genuine_pairs: 2000,
            sources_per_identity: 20,
            gallery_per_identity: 20,
            curve_seeds: vec![1, 2, 3],
            curve_alphas: vec![0.0, 0.3, 0.6, 0.9, 1.2, 1.5],
            curve_sources: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveSummary {
    pub source: String,
    pub curve: IdentityCurve,
    pub spearman: f64,
}

/// Everything `evaluate` measures. Optional parts are `None` when their
/// adapter was not supplied.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub model_digest: String,
    pub alpha: f64,
    pub theta: f64,
    pub threshold: f64,
    pub verification: VerificationReport,
    pub ranking: RankingSummary,
    pub image: ImageMetrics,
    /// Recognizer cosine between anonymized images and their sources.
    pub mean_cosine_to_source: f64,
    /// Fraction of anonymized images whose cosine to the source is below the threshold.
    pub anonymization_success: f64,
    /// Mean perceptual distance between anonymized images and sources.
    pub content_distance: Option<f64>,
    pub reconstruction_l1: f64,
    pub detection_rate: Option<BTreeMap<String, f64>>,
    pub attribute_retention: Option<BTreeMap<String, f64>>,
    pub curves: Vec<CurveSummary>,
}

/// Adapters available to [`evaluate`].
#[derive(Default)]
pub struct Adapters<'a> {
    pub detectors: Vec<&'a dyn FaceDetector>,
    pub attributes: Option<&'a dyn AttributeClassifier>,
    pub features: Option<&'a dyn FeatureExtractor>,
}

/// Runs every protocol on the validation identities of `ds`. The ranking
/// gallery holds every identity of `ds`.
pub fn evaluate(model: &AnonymizerModel, ds: &IdentityDataset, cfg: &EvalConfig, adapters: &Adapters) -> Result<EvalReport> {
    let size = model.image_size();
    if ds.val.len() < 2 {
        return Err(Error::Invalid("evaluation needs at least two validation identities".into()));
    }
    let alpha = model.theta() + cfg.alpha_margin;
    let anon = ModelAnonymizer { model, alpha, seed: cfg.seed };
    let r = &model.recognizer;

    let protocol = VerificationProtocol::all_pairs(&ds.val, size, cfg.far, cfg.folds)?
        .limit_genuine(cfg.max_genuine_pairs, cfg.seed);
    let verification = verification_protocol(&anon, r, &protocol)?;

    // sources: the first images of each validation identity
    let mut sources = Vec::new();
    let mut source_ids = Vec::new();
    for g in &ds.val {
        for i in 0..cfg.sources_per_identity.min(g.len()) {
            sources.push(chw_of(g, i));
            source_ids.push((g.tag.clone(), i));
        }
    }
    let anonymized: Vec<Vec<f32>> =
        sources.iter().enumerate().map(|(i, s)| anon.anonymize(s, i)).collect::<Result<_>>()?;
    let e_src = embed_all(r, &sources, size)?;
    let e_anon = embed_all(r, &anonymized, size)?;
    let cosines: Vec<f64> = e_src.iter().zip(&e_anon).map(|(a, b)| cosine(a, b)).collect();
    let mean_cosine_to_source = cosines.iter().sum::<f64>() / cosines.len() as f64;
    let anonymization_success =
        cosines.iter().filter(|&&c| c < r.threshold).count() as f64 / cosines.len() as f64;

    let mut rec_abs = 0.0;
    for s in &sources {
        let enc = model.encode_chw(s)?;
        let rec = model.reconstruct(&enc)?;
        rec_abs += rec.iter().zip(s).map(|(a, b)| (a - b).abs() as f64).sum::<f64>() / s.len() as f64 / 2.0;
    }
    let reconstruction_l1 = rec_abs / sources.len() as f64;

    let region = adapters.detectors.first().copied();
    let image = image_metrics(&sources, &anonymized, size, region, adapters.features)?;
    let detection_rate = if adapters.detectors.is_empty() {
        None
    } else {
        Some(detection_rate(&anonymized, size, &adapters.detectors)?)
    };
    let attribute_retention = match adapters.attributes {
        Some(a) => Some(attribute_retention(&sources, &anonymized, size, Some(a))?),
        None => None,
    };

    // gallery: every identity, first `gallery_per_identity` images
    let gallery: Vec<IdentityImages> = ds
        .train
        .iter()
        .chain(&ds.val)
        .map(|g| {
            let n = cfg.gallery_per_identity.min(g.len()).max(1);
            IdentityImages {
                tag: g.tag.clone(),
                images: g.images.narrow(0, 0, n as i64),
                attributes: g.attributes[..n].to_vec(),
            }
        })
        .collect();
    let offset = ds.train.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7A11);
    let probes: Vec<Probe> = ds
        .val
        .iter()
        .enumerate()
        .flat_map(|(v, g)| {
            let n = cfg.gallery_per_identity.min(g.len()).max(1);
            let pick: Vec<usize> = (0..cfg.sources_per_identity.min(g.len())).map(|_| rng.gen_range(0..n)).collect();
            pick.into_iter().map(move |i| Probe { identity: offset + v, gallery_image: Some(i), image: chw_of(g, i) })
        })
        .collect();
    let ranking = ranking_protocol(&anon, r, &gallery, &probes, size)?;

    let mut curves = Vec::new();
    for g in &ds.val {
        for i in 0..cfg.curve_sources.min(g.len()) {
            for &seed in &cfg.curve_seeds {
                let curve = identity_curve(model, &chw_of(g, i), seed, &cfg.curve_alphas)?;
                let rho = curve.spearman()?;
                curves.push(CurveSummary { source: format!("{}/{i}", g.tag), curve, spearman: rho });
            }
        }
    }

    Ok(EvalReport {
        model_digest: model.digest.clone(),
        alpha,
        theta: model.theta(),
        threshold: r.threshold,
        verification,
        ranking,
        content_distance: image.lpips,
        image,
        mean_cosine_to_source,
        anonymization_success,
        reconstruction_l1,
        detection_rate,
        attribute_retention,
        curves,
    })
}
