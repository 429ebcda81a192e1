//! Raw frames of arbitrary size, square crops and feathered paste-back.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::data::tensor_to_vec;
use crate::error::{Error, Result};

/// Width of the linear blend at crop edges that lie inside the frame.
pub const FEATHER_PX: usize = 4;

/// CHW image in [-1, 1] of any size.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height || width == 0 || height == 0 {
            return Err(Error::Shape(format!("{} values for a {width}x{height} RGB frame", data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * width * height];
        for (k, c) in rgb.iter().enumerate() {
            data[k * width * height..(k + 1) * width * height].fill(c * 2.0 - 1.0);
        }
        Self { width, height, data }
    }

    pub fn at(&self, k: usize, row: usize, col: usize) -> f32 {
        self.data[k * self.width * self.height + row * self.width + col]
    }

    fn tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data).view([1, 3, self.height as i64, self.width as i64])
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (x, y, p) in img.enumerate_pixels() {
            for k in 0..3 {
                data[k * w * h + y as usize * w + x as usize] = p[k] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
        Self::new(w, h, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, p) in img.enumerate_pixels_mut() {
            for k in 0..3 {
                let v = self.at(k, y as usize, x as usize);
                p[k] = ((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0).round() as u8;
            }
        }
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        img.save(path)?;
        Ok(())
    }
}

/// Square region of a frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl CropBox {
    pub fn full(frame: &Frame) -> Result<Self> {
        if frame.width != frame.height {
            return Err(Error::Shape(format!(
                "a pre-aligned frame must be square, got {}x{}",
                frame.width, frame.height
            )));
        }
        Ok(Self { top: 0, left: 0, side: frame.width })
    }

    pub fn fits(&self, frame: &Frame) -> bool {
        self.side > 0 && self.top + self.side <= frame.height && self.left + self.side <= frame.width
    }
}

/// Bilinear resize of a CHW buffer; a no-op copy when sizes already match.
pub fn resize(chw: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    if (h, w) == (out_h, out_w) {
        return chw.to_vec();
    }
    let t = Tensor::from_slice(chw).view([1, 3, h as i64, w as i64]);
    tensor_to_vec(&t.upsample_bilinear2d([out_h as i64, out_w as i64], false, None, None))
}

/// Crops `b` and resizes it to `size x size`.
pub fn crop(frame: &Frame, b: CropBox, size: usize) -> Result<Vec<f32>> {
    if !b.fits(frame) {
        return Err(Error::Shape(format!("crop {b:?} outside a {}x{} frame", frame.width, frame.height)));
    }
    let t = frame
        .tensor()
        .narrow(2, b.top as i64, b.side as i64)
        .narrow(3, b.left as i64, b.side as i64);
    Ok(resize(&tensor_to_vec(&t), b.side, b.side, size, size))
}

/// Blend weight of crop pixel (r, c): ramps from 0 to 1 over [`FEATHER_PX`]
/// pixels from every crop edge that is interior to the frame. Edges on the
/// frame border have nothing to blend with and get full weight.
fn feather(b: CropBox, frame: &Frame, r: usize, c: usize) -> f32 {
    let mut d = f32::INFINITY;
    if b.top > 0 {
        d = d.min(r as f32 + 0.5);
    }
    if b.left > 0 {
        d = d.min(c as f32 + 0.5);
    }
    if b.top + b.side < frame.height {
        d = d.min((b.side - r) as f32 - 0.5);
    }
    if b.left + b.side < frame.width {
        d = d.min((b.side - c) as f32 - 0.5);
    }
    (d / FEATHER_PX as f32).min(1.0)
}

/// Resizes an edited `size x size` crop back to `b` and blends it into a copy
/// of `frame`. Pixels outside `b` are untouched.
pub fn paste(frame: &Frame, b: CropBox, edited: &[f32], size: usize) -> Result<Frame> {
    if !b.fits(frame) || edited.len() != 3 * size * size {
        return Err(Error::Shape(format!("cannot paste a {size}px crop into {b:?}")));
    }
    let patch = resize(edited, size, size, b.side, b.side);
    let mut out = frame.clone();
    let plane = frame.width * frame.height;
    for r in 0..b.side {
        for c in 0..b.side {
            let a = feather(b, frame, r, c);
            for k in 0..3 {
                let idx = k * plane + (b.top + r) * frame.width + b.left + c;
                let src = patch[k * b.side * b.side + r * b.side + c];
                out.data[idx] = if a >= 1.0 { src } else { a * src + (1.0 - a) * frame.data[idx] };
            }
        }
    }
    Ok(out)
}

pub fn frame_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("frame_{index:06}.png"))
}

/// Reads `frame_%06d.png` files in index order.
pub fn read_frames(dir: &Path) -> Result<Vec<Frame>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Invalid(format!("no frame_*.png files in {}", dir.display())));
    }
    names.iter().map(|p| Frame::load(p)).collect()
}

pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save(&frame_path(dir, i))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Frame {
        let data = (0..3 * w * h).map(|i| ((i * 37) % 255) as f32 / 127.5 - 1.0).collect();
        Frame::new(w, h, data).unwrap()
    }

    #[test]
    fn identity_crop_is_unchanged() {
        let f = ramp(16, 16);
        let b = CropBox::full(&f).unwrap();
        let c = crop(&f, b, 16).unwrap();
        assert_eq!(c, f.data);
        assert_eq!(paste(&f, b, &c, 16).unwrap(), f);
    }

    #[test]
    fn paste_of_unedited_crop_restores_frame_outside_the_blend_border() {
        let f = ramp(40, 30);
        let b = CropBox { top: 5, left: 9, side: 20 };
        let out = paste(&f, b, &crop(&f, b, 20).unwrap(), 20).unwrap();
        let max = out.data.iter().zip(&f.data).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max < 1e-6);
        // a resized round trip only disturbs the inside of the box
        let out = paste(&f, b, &crop(&f, b, 16).unwrap(), 16).unwrap();
        for r in 0..30 {
            for c in 0..40 {
                let inside = (5..25).contains(&r) && (9..29).contains(&c);
                if !inside {
                    assert_eq!(out.at(1, r, c), f.at(1, r, c));
                }
            }
        }
    }

    #[test]
    fn feather_ramps_at_interior_edges() {
        let f = Frame::filled(20, 20, [0.0; 3]);
        let b = CropBox { top: 2, left: 2, side: 12 };
        let white = vec![1.0; 3 * 12 * 12];
        let out = paste(&f, b, &white, 12).unwrap();
        let edge = out.at(0, 2, 8);
        let centre = out.at(0, 8, 8);
        assert!(edge > -1.0 && edge < 0.0);
        assert_eq!(centre, 1.0);
    }

    #[test]
    fn frames_round_trip_through_png() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![Frame::filled(8, 6, [0.2, 0.4, 0.6]), Frame::filled(8, 6, [1.0, 0.0, 0.0])];
        write_frames(dir.path(), &frames).unwrap();
        let back = read_frames(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].data.iter().zip(&frames[0].data).all(|(a, b)| (a - b).abs() < 1.0 / 255.0));
    }
}
