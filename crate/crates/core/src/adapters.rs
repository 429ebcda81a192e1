//! Pluggable detectors, attribute classifiers and feature extractors, with
//! small stand-ins that work on the toy sprites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tch::{Kind, Tensor};

use crate::data::tensor_to_vec_f64;
use crate::error::{Error, Result};
use crate::frames::{CropBox, Frame};
use crate::sprites::{self, SpriteAttributes, POSE_OFFSET};

pub trait FaceDetector: Send + Sync {
    fn name(&self) -> &str;
    /// Face boxes, largest first.
    fn detect(&self, frame: &Frame) -> Vec<CropBox>;
}

/// Finds the non-background blob of a sprite frame.
#[derive(Debug, Clone)]
pub struct SpriteDetector {
    /// Per-channel difference from the border colour that counts as foreground.
    pub tolerance: f32,
    /// Minimum foreground fraction for a detection.
    pub min_fraction: f32,
    /// Face height as a fraction of the returned box side.
    pub fill: f32,
}

impl Default for SpriteDetector {
    fn default() -> Self {
        Self { tolerance: 0.08, min_fraction: 0.02, fill: 0.72 }
    }
}

fn border_colour(frame: &Frame) -> [f32; 3] {
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    let (w, h) = (frame.width, frame.height);
    let mut push = |r: usize, c: usize| {
        for (k, a) in acc.iter_mut().enumerate() {
            a.push(frame.at(k, r, c));
        }
    };
    for c in 0..w {
        push(0, c);
        push(h - 1, c);
    }
    for r in 0..h {
        push(r, 0);
        push(r, w - 1);
    }
    acc.map(|mut v| {
        v.sort_by(f32::total_cmp);
        (v[v.len() / 2] + 1.0) / 2.0
    })
}

impl FaceDetector for SpriteDetector {
    fn name(&self) -> &str {
        "sprite"
    }

    fn detect(&self, frame: &Frame) -> Vec<CropBox> {
        let bg = border_colour(frame);
        let (w, h) = (frame.width, frame.height);
        let (mut r0, mut r1, mut c0, mut c1, mut count) = (h, 0, w, 0, 0usize);
        for r in 0..h {
            for c in 0..w {
                if (0..3).any(|k| ((frame.at(k, r, c) + 1.0) / 2.0 - bg[k]).abs() > self.tolerance) {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                    count += 1;
                }
            }
        }
        if (count as f32) < self.min_fraction * (w * h) as f32 {
            return Vec::new();
        }
        let extent = (r1 - r0 + 1).max(c1 - c0 + 1) as f32;
        let side = ((extent / self.fill).ceil() as usize).min(w.min(h));
        let (cy, cx) = ((r0 + r1 + 1) as f32 / 2.0, (c0 + c1 + 1) as f32 / 2.0);
        let place = |centre: f32, limit: usize| ((centre - side as f32 / 2.0).round().max(0.0) as usize).min(limit - side);
        vec![CropBox { top: place(cy, h), left: place(cx, w), side }]
    }
}

pub trait AttributeClassifier: Send + Sync {
    fn names(&self) -> Vec<&'static str>;
    /// One prediction per attribute, in `names()` order.
    fn classify(&self, chw: &[f32], size: usize) -> Vec<i64>;
}

/// Reads pose class from the foreground centroid and background from the
/// border colour, the two identity-unrelated sprite attributes.
#[derive(Debug, Clone, Default)]
pub struct SpriteAttributeClassifier;

impl SpriteAttributeClassifier {
    pub fn attributes(&self, chw: &[f32], size: usize) -> SpriteAttributes {
        let background = sprites::nearest_background(sprites::border_colour(chw, size));
        let mask = sprites::foreground_mask(chw, size, 0.08);
        let (mut sum, mut n) = (0.0f32, 0usize);
        for (p, &m) in mask.iter().enumerate() {
            if m {
                sum += ((p % size) as f32 + 0.5) / size as f32 * 2.0 - 1.0;
                n += 1;
            }
        }
        let cx = if n == 0 { 0.0 } else { sum / n as f32 };
        let pose_class = (cx / POSE_OFFSET).round().clamp(-1.0, 1.0) as i8;
        SpriteAttributes { pose_class, background }
    }
}

impl AttributeClassifier for SpriteAttributeClassifier {
    fn names(&self) -> Vec<&'static str> {
        vec!["pose", "background"]
    }

    fn classify(&self, chw: &[f32], size: usize) -> Vec<i64> {
        let a = self.attributes(chw, size);
        vec![a.pose_class as i64, a.background as i64]
    }
}

/// Multi-layer image features for perceptual and distribution metrics.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    /// Per-layer feature maps `B x C x H x W` for a batch in [-1, 1].
    fn layers(&self, x: &Tensor) -> Vec<Tensor>;
}

/// Fixed random conv net. Weights come from a seeded ChaCha stream, so the
/// features are identical on every run and need no download.
#[derive(Debug)]
pub struct RandomProjectionFeatures {
    weights: Vec<Tensor>,
}

impl RandomProjectionFeatures {
    pub fn new(seed: u64, channels: &[i64]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cin = 3;
        let weights = channels
            .iter()
            .map(|&c| {
                let fan_in = (cin * 9) as f64;
                let v: Vec<f32> = (0..c * cin * 9)
                    .map(|_| {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        (g * (2.0 / fan_in).sqrt()) as f32
                    })
                    .collect();
                let w = Tensor::from_slice(&v).view([c, cin, 3, 3]);
                cin = c;
                w
            })
            .collect();
        Self { weights }
    }
}

impl Default for RandomProjectionFeatures {
    fn default() -> Self {
        Self::new(2024, &[16, 32, 64])
    }
}

impl FeatureExtractor for RandomProjectionFeatures {
    fn name(&self) -> &str {
        "random-projection"
    }

    fn layers(&self, x: &Tensor) -> Vec<Tensor> {
        tch::no_grad(|| {
            let mut h = x.to_kind(Kind::Float);
            let mut out = Vec::with_capacity(self.weights.len());
            for w in &self.weights {
                h = h.conv2d(w, None::<Tensor>, [2, 2], [1, 1], [1, 1], 1).relu();
                out.push(h.shallow_clone());
            }
            out
        })
    }
}

/// Perceptual distance: channel-normalised feature differences averaged over
/// space and layers, one value per image pair.
pub fn perceptual_distance(f: &dyn FeatureExtractor, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.size() != b.size() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.size(), b.size())));
    }
    let (la, lb) = (f.layers(a), f.layers(b));
    let n = la.len() as f64;
    let unit = |t: &Tensor| t / (t.square().sum_dim_intlist([1i64].as_slice(), true, Kind::Float).sqrt() + 1e-10);
    let total = la
        .iter()
        .zip(&lb)
        .map(|(x, y)| (unit(x) - unit(y)).square().sum_dim_intlist([1i64].as_slice(), false, Kind::Float).mean_dim(
            [1i64, 2].as_slice(),
            false,
            Kind::Double,
        ))
        .reduce(|p, q| p + q)
        .ok_or_else(|| Error::Invalid("feature extractor returned no layers".into()))?;
    Ok(tensor_to_vec_f64(&(total / n)))
}

/// Spatially pooled last-layer features, one row per image.
pub fn pooled_features(f: &dyn FeatureExtractor, x: &Tensor) -> Result<Vec<Vec<f64>>> {
    let last = f.layers(x).pop().ok_or_else(|| Error::Invalid("feature extractor returned no layers".into()))?;
    let pooled = last.mean_dim([2i64, 3].as_slice(), false, Kind::Double);
    let d = pooled.size()[1] as usize;
    Ok(tensor_to_vec_f64(&pooled).chunks(d).map(|c| c.to_vec()).collect())
}
