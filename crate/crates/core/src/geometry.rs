//! Operations on the unit identity hypersphere.
//!
//! Identity codes live on `S^{d-1}`. Everything here works in `f64` and is
//! pure: the only randomness is a caller-supplied or seed-derived RNG.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the unit-norm invariant.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// `1 + cos(a, b)` below this is treated as antipodal.
pub const ANTIPODAL_TOLERANCE: f64 = 1e-6;

/// Margin added to theta when a caller supplies no explicit alpha.
pub const DEFAULT_ALPHA_MARGIN: f64 = 0.1;

/// A point on the identity hypersphere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct IdentityVector(Vec<f64>);

impl IdentityVector {
    /// Wraps values that are already unit norm.
    pub fn try_from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(Error::Invalid(format!("identity vector norm {n} is not 1")));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn negate(&self) -> Self {
        Self(self.0.iter().map(|v| -v).collect())
    }
}

impl TryFrom<Vec<f64>> for IdentityVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::try_from_unit(values)
    }
}

impl From<IdentityVector> for Vec<f64> {
    fn from(v: IdentityVector) -> Self {
        v.0
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` onto the unit sphere.
pub fn project_to_sphere(v: &[f64]) -> Result<IdentityVector> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::DegenerateVector);
    }
    Ok(IdentityVector(v.iter().map(|x| x / n).collect()))
}

/// `f32` convenience wrapper around [`project_to_sphere`].
pub fn project_f32(v: &[f32]) -> Result<IdentityVector> {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    project_to_sphere(&wide)
}

fn check_dims(a: &IdentityVector, b: &IdentityVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "identity dims differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Cosine similarity of two unit vectors, clamped to [-1, 1].
pub fn cosine_similarity(a: &IdentityVector, b: &IdentityVector) -> f64 {
    dot(&a.0, &b.0).clamp(-1.0, 1.0)
}

/// Geodesic angle between two unit vectors.
///
/// Uses `2 atan2(|a - b|, |a + b|)`, which stays accurate near 0 and pi where
/// `acos` of the dot product loses half the mantissa.
pub fn angle(a: &IdentityVector, b: &IdentityVector) -> f64 {
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.0.iter().zip(&b.0) {
        diff += (x - y) * (x - y);
        sum += (x + y) * (x + y);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

/// Constant-speed interpolation along the great circle from `a` to `b`.
pub fn slerp(a: &IdentityVector, b: &IdentityVector, t: f64) -> Result<IdentityVector> {
    check_dims(a, b)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Invalid(format!("slerp parameter {t} outside [0, 1]")));
    }
    let gap = 1.0 + dot(&a.0, &b.0);
    if gap < ANTIPODAL_TOLERANCE {
        return Err(Error::AmbiguousPath(gap));
    }
    let omega = angle(a, b);
    let s = omega.sin();
    if s < 1e-12 {
        return Ok(a.clone());
    }
    let wa = ((1.0 - t) * omega).sin() / s;
    let wb = (t * omega).sin() / s;
    let out: Vec<f64> = a.0.iter().zip(&b.0).map(|(x, y)| wa * x + wb * y).collect();
    project_to_sphere(&out)
}

/// Sampled geodesic between two identities.
#[derive(Debug, Clone)]
pub struct SphericalPath {
    pub start: IdentityVector,
    pub end: IdentityVector,
    pub samples: Vec<(f64, IdentityVector)>,
}

impl SphericalPath {
    /// Samples `n >= 2` evenly spaced points including both endpoints.
    pub fn sample(start: IdentityVector, end: IdentityVector, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Invalid("a path needs at least two samples".into()));
        }
        let samples = (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                slerp(&start, &end, t).map(|p| (t, p))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { start, end, samples })
    }
}

/// Threshold and requested angle for one anonymization draw.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AngleSpec {
    pub theta: f64,
    pub alpha: f64,
    pub direction_seed: u64,
}

impl AngleSpec {
    pub fn new(theta: f64, alpha: f64, direction_seed: u64) -> Result<Self> {
        let spec = Self { theta, alpha, direction_seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Uses `alpha = theta + DEFAULT_ALPHA_MARGIN`.
    pub fn from_theta(theta: f64, direction_seed: u64) -> Result<Self> {
        Self::new(theta, theta + DEFAULT_ALPHA_MARGIN, direction_seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < FRAC_PI_2) {
            return Err(Error::Config(format!(
                "theta {} must lie in (0, pi/2)",
                self.theta
            )));
        }
        if !(self.alpha > self.theta) {
            return Err(Error::AnonymityViolation { alpha: self.alpha, theta: self.theta });
        }
        if self.alpha >= PI {
            return Err(Error::Config(format!("alpha {} must be below pi", self.alpha)));
        }
        Ok(())
    }
}

/// Threshold angle for a recognizer that accepts at cosine `threshold`.
pub fn theta_from_threshold(threshold: f64) -> f64 {
    threshold.clamp(-1.0, 1.0).acos()
}

/// Unit tangent direction at `z` drawn from an isotropic Gaussian.
pub fn tangent_direction<R: Rng + ?Sized>(z: &IdentityVector, rng: &mut R) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..z.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let along = dot(&g, &z.0);
        let t: Vec<f64> = g.iter().zip(&z.0).map(|(gi, zi)| gi - along * zi).collect();
        let n = norm(&t);
        if n > 1e-8 {
            return t.into_iter().map(|v| v / n).collect();
        }
    }
}

/// Tangent direction reproducibly derived from a seed.
pub fn seeded_direction(z: &IdentityVector, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    tangent_direction(z, &mut rng)
}

/// Component of `u` orthogonal to `z`, normalised. Lets one direction be
/// reused across several nearby identities (video frames of one person).
pub fn retarget_direction(u: &[f64], z: &IdentityVector) -> Result<Vec<f64>> {
    if u.len() != z.dim() {
        return Err(Error::Shape(format!("direction has {} dims, identity {}", u.len(), z.dim())));
    }
    let along = dot(u, &z.0);
    let t: Vec<f64> = u.iter().zip(&z.0).map(|(ui, zi)| ui - along * zi).collect();
    let n = norm(&t);
    if !(n > 1e-8) {
        return Err(Error::DegenerateVector);
    }
    Ok(t.into_iter().map(|v| v / n).collect())
}

/// Rotates `z` by `alpha` towards the unit tangent `u`.
pub fn rotate_towards(z: &IdentityVector, u: &[f64], alpha: f64) -> Result<IdentityVector> {
    let (c, s) = (alpha.cos(), alpha.sin());
    let out: Vec<f64> = z.0.iter().zip(u).map(|(zi, ui)| c * zi + s * ui).collect();
    project_to_sphere(&out)
}

/// Draws an anonymous identity at exactly `spec.alpha` from `z_id`.
///
/// The tangent direction depends only on `spec.direction_seed`, so the same
/// request always yields the same vector.
pub fn sample_anonymous(z_id: &IdentityVector, spec: &AngleSpec) -> Result<IdentityVector> {
    spec.validate()?;
    let u = seeded_direction(z_id, spec.direction_seed);
    let out = rotate_towards(z_id, &u, spec.alpha)?;
    if !(cosine_similarity(z_id, &out) < spec.theta.cos()) {
        return Err(Error::AnonymityViolation { alpha: spec.alpha, theta: spec.theta });
    }
    Ok(out)
}

/// Grid of identities: row `i` follows the direction of `seeds[i]`, column
/// `j` sits at angle `alphas[j]` from `z_id`.
pub fn sweep_directions(
    z_id: &IdentityVector,
    alphas: &[f64],
    seeds: &[u64],
) -> Result<Vec<Vec<IdentityVector>>> {
    if alphas.is_empty() {
        return Err(Error::EmptySweep("no alphas"));
    }
    if seeds.is_empty() {
        return Err(Error::EmptySweep("no seeds"));
    }
    if alphas.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Invalid("alphas must be sorted ascending".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(**a >= 0.0 && **a < PI)) {
        return Err(Error::Invalid(format!("alpha {a} outside [0, pi)")));
    }
    seeds
        .iter()
        .map(|&seed| {
            let u = seeded_direction(z_id, seed);
            alphas.iter().map(|&a| rotate_towards(z_id, &u, a)).collect()
        })
        .collect()
}
