//! Procedural face-like sprites for desk-scale experiments.
//!
//! Identity is the facial geometry (face shape, eye spacing, nose length and
//! so on). Content is everything else: where the face sits, its roll, skin
//! tone and background colour. Every image is a pure function of its
//! parameters, so ground truth for disentanglement checks is free.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Background colours, RGB in [0, 1].
pub const BACKGROUNDS: [[f32; 3]; 6] = [
    [0.82, 0.82, 0.84],
    [0.25, 0.40, 0.75],
    [0.30, 0.60, 0.35],
    [0.55, 0.35, 0.65],
    [0.20, 0.58, 0.60],
    [0.15, 0.15, 0.20],
];

pub const SKIN_TONES: [[f32; 3]; 4] = [
    [0.95, 0.80, 0.66],
    [0.86, 0.66, 0.46],
    [0.66, 0.46, 0.31],
    [0.47, 0.32, 0.22],
];

const EYE: [f32; 3] = [0.08, 0.08, 0.12];
const BROW: [f32; 3] = [0.22, 0.15, 0.10];
const MOUTH: [f32; 3] = [0.72, 0.18, 0.24];

/// Horizontal face offset per pose class, in half-image units.
pub const POSE_OFFSET: f32 = 0.16;

/// Geometry that defines who a sprite is.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityGeometry {
    pub face_w: f32,
    pub face_h: f32,
    pub eye_sep: f32,
    pub eye_y: f32,
    pub eye_r: f32,
    pub brow_tilt: f32,
    pub nose_len: f32,
    pub mouth_w: f32,
    pub mouth_y: f32,
}

impl IdentityGeometry {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let face_h: f32 = rng.gen_range(0.58..0.76);
        let eye_y = rng.gen_range(-0.26..-0.06);
        let nose_len = rng.gen_range(0.10..0.26);
        let mouth_lo = eye_y + nose_len + 0.14;
        let mouth_hi = (face_h - 0.14).max(mouth_lo + 0.02);
        Self {
            face_w: rng.gen_range(0.40..0.62),
            face_h,
            eye_sep: rng.gen_range(0.13..0.30),
            eye_y,
            eye_r: rng.gen_range(0.05..0.11),
            brow_tilt: rng.gen_range(-0.45..0.45),
            nose_len,
            mouth_w: rng.gen_range(0.10..0.30),
            mouth_y: rng.gen_range(mouth_lo..mouth_hi),
        }
    }
}

/// Identity-unrelated parameters of one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteContent {
    /// -1, 0 or 1: face left of, at, or right of centre.
    pub pose_class: i8,
    pub dx_jitter: f32,
    pub dy: f32,
    pub roll: f32,
    pub background: usize,
    pub skin: usize,
    pub skin_jitter: [f32; 3],
}

impl SpriteContent {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            pose_class: rng.gen_range(-1..=1),
            dx_jitter: rng.gen_range(-0.03..0.03),
            dy: rng.gen_range(-0.06..0.06),
            roll: rng.gen_range(-0.2..0.2),
            background: rng.gen_range(0..BACKGROUNDS.len()),
            skin: rng.gen_range(0..SKIN_TONES.len()),
            skin_jitter: [
                rng.gen_range(-0.03..0.03),
                rng.gen_range(-0.03..0.03),
                rng.gen_range(-0.03..0.03),
            ],
        }
    }

    fn centre(&self) -> (f32, f32) {
        (self.pose_class as f32 * POSE_OFFSET + self.dx_jitter, self.dy)
    }
}

/// Attributes a downstream classifier can recover from pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpriteAttributes {
    pub pose_class: i8,
    pub background: usize,
}

impl From<&SpriteContent> for SpriteAttributes {
    fn from(c: &SpriteContent) -> Self {
        Self { pose_class: c.pose_class, background: c.background }
    }
}

fn coverage(signed_dist: f32, pixel: f32) -> f32 {
    (0.5 - signed_dist / pixel).clamp(0.0, 1.0)
}

fn ellipse_dist(x: f32, y: f32, cx: f32, cy: f32, a: f32, b: f32) -> f32 {
    let (u, v) = ((x - cx) / a, (y - cy) / b);
    ((u * u + v * v).sqrt() - 1.0) * a.min(b)
}

fn bar_dist(x: f32, y: f32, cx: f32, cy: f32, half_len: f32, half_thick: f32, tilt: f32) -> f32 {
    let (s, c) = tilt.sin_cos();
    let (dx, dy) = (x - cx, y - cy);
    let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
    let qx = u.abs() - half_len;
    let qy = v.abs() - half_thick;
    let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
    outside + qx.max(qy).min(0.0)
}

fn blend(dst: &mut [f32; 3], src: [f32; 3], a: f32) {
    for k in 0..3 {
        dst[k] = dst[k] * (1.0 - a) + src[k] * a;
    }
}

/// Renders a sprite as CHW floats in [-1, 1], quantized to 8-bit levels so the
/// in-memory copy matches a PNG round trip exactly.
pub fn render(geom: &IdentityGeometry, content: &SpriteContent, size: usize) -> Vec<f32> {
    let pixel = 2.0 / size as f32;
    let (cx, cy) = content.centre();
    let (rs, rc) = (-content.roll).sin_cos();
    let bg = BACKGROUNDS[content.background];
    let mut skin = SKIN_TONES[content.skin];
    for k in 0..3 {
        skin[k] = (skin[k] + content.skin_jitter[k]).clamp(0.0, 1.0);
    }
    let nose_col = [skin[0] * 0.78, skin[1] * 0.74, skin[2] * 0.72];
    let g = geom;
    let nose_cy = g.eye_y + 0.06 + g.nose_len / 2.0;
    let brow_y = g.eye_y - g.eye_r - 0.07;

    let mut out = vec![0.0f32; 3 * size * size];
    for row in 0..size {
        for col in 0..size {
            let px = (col as f32 + 0.5) * pixel - 1.0 - cx;
            let py = (row as f32 + 0.5) * pixel - 1.0 - cy;
            let x = rc * px - rs * py;
            let y = rs * px + rc * py;

            let mut c = bg;
            blend(&mut c, skin, coverage(ellipse_dist(x, y, 0.0, 0.0, g.face_w, g.face_h), pixel));
            blend(
                &mut c,
                nose_col,
                coverage(ellipse_dist(x, y, 0.0, nose_cy, 0.045, g.nose_len / 2.0), pixel),
            );
            blend(
                &mut c,
                MOUTH,
                coverage(ellipse_dist(x, y, 0.0, g.mouth_y, g.mouth_w, 0.045), pixel),
            );
            for side in [-1.0f32, 1.0] {
                let ex = side * g.eye_sep;
                blend(&mut c, EYE, coverage(ellipse_dist(x, y, ex, g.eye_y, g.eye_r, g.eye_r), pixel));
                blend(
                    &mut c,
                    BROW,
                    coverage(bar_dist(x, y, ex, brow_y, 0.10, 0.025, side * g.brow_tilt), pixel),
                );
            }
            for k in 0..3 {
                let q = (c[k].clamp(0.0, 1.0) * 255.0).round() / 255.0;
                out[k * size * size + row * size + col] = q * 2.0 - 1.0;
            }
        }
    }
    out
}

/// Background colour estimated from the image border, CHW input in [-1, 1].
pub fn border_colour(chw: &[f32], size: usize) -> [f32; 3] {
    let mut acc = [Vec::new(), Vec::new(), Vec::new()];
    for i in 0..size {
        for (r, c) in [(0, i), (size - 1, i), (i, 0), (i, size - 1)] {
            for (k, a) in acc.iter_mut().enumerate() {
                a.push(chw[k * size * size + r * size + c]);
            }
        }
    }
    acc.map(|mut v| {
        v.sort_by(f32::total_cmp);
        (v[v.len() / 2] + 1.0) / 2.0
    })
}

/// Pixels that differ from the border colour by more than `tol` (L-inf, [0,1] scale).
pub fn foreground_mask(chw: &[f32], size: usize, tol: f32) -> Vec<bool> {
    let bg = border_colour(chw, size);
    (0..size * size)
        .map(|p| (0..3).any(|k| ((chw[k * size * size + p] + 1.0) / 2.0 - bg[k]).abs() > tol))
        .collect()
}

pub fn nearest_background(rgb: [f32; 3]) -> usize {
    let dist = |p: &[f32; 3]| (0..3).map(|k| (p[k] - rgb[k]).powi(2)).sum::<f32>();
    (0..BACKGROUNDS.len())
        .min_by(|&a, &b| dist(&BACKGROUNDS[a]).total_cmp(&dist(&BACKGROUNDS[b])))
        .unwrap_or(0)
}
