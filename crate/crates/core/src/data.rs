//! Image tensors, PNG I/O and identity-grouped datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops::FilterType, ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};
use crate::sprites::{self, IdentityGeometry, SpriteAttributes, SpriteContent};

/// Batch of RGB images, `B x 3 x S x S`, values in [-1, 1].
#[derive(Debug)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let size = t.size();
        if size.len() != 4 || size[1] != 3 || size[2] != size[3] {
            return Err(Error::Shape(format!("expected Bx3xSxS image batch, got {size:?}")));
        }
        Ok(Self(t))
    }

    /// Single image from CHW floats.
    pub fn from_chw(chw: &[f32], size: usize) -> Result<Self> {
        if chw.len() != 3 * size * size {
            return Err(Error::Shape(format!(
                "{} values cannot form a 3x{size}x{size} image",
                chw.len()
            )));
        }
        Self::new(Tensor::from_slice(chw).view([1, 3, size as i64, size as i64]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> i64 {
        self.0.size()[0]
    }

    pub fn image_size(&self) -> i64 {
        self.0.size()[2]
    }

    /// CHW floats of image `i`.
    pub fn chw(&self, i: i64) -> Vec<f32> {
        tensor_to_vec(&self.0.get(i))
    }

    pub fn shallow_clone(&self) -> Self {
        Self(self.0.shallow_clone())
    }

    pub fn select(&self, i: i64) -> Self {
        Self(self.0.narrow(0, i, 1))
    }

    pub fn cat(items: &[ImageTensor]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Shape("cannot concatenate an empty image list".into()));
        }
        let ts: Vec<&Tensor> = items.iter().map(|i| &i.0).collect();
        Self::new(Tensor::cat(&ts, 0))
    }
}

pub fn tensor_to_vec(t: &Tensor) -> Vec<f32> {
    let flat = t.to_kind(Kind::Float).contiguous().view([-1]);
    let n = flat.size()[0] as usize;
    let mut out = vec![0.0f32; n];
    flat.copy_data(&mut out, n);
    out
}

pub fn tensor_to_vec_f64(t: &Tensor) -> Vec<f64> {
    let flat = t.to_kind(Kind::Double).contiguous().view([-1]);
    let n = flat.size()[0] as usize;
    let mut out = vec![0.0f64; n];
    flat.copy_data(&mut out, n);
    out
}

/// CHW floats in [-1, 1] to an 8-bit sRGB image.
pub fn chw_to_rgb(chw: &[f32], size: usize) -> RgbImage {
    ImageBuffer::from_fn(size as u32, size as u32, |x, y| {
        let p = y as usize * size + x as usize;
        let q = |k: usize| (((chw[k * size * size + p] + 1.0) * 127.5).round()).clamp(0.0, 255.0) as u8;
        Rgb([q(0), q(1), q(2)])
    })
}

pub fn rgb_to_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0.0f32; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let p = (y * w + x) as usize;
        for k in 0..3 {
            out[k * plane + p] = px.0[k] as f32 / 127.5 - 1.0;
        }
    }
    out
}

pub fn encode_png(chw: &[f32], size: usize) -> Result<Vec<u8>> {
    let mut buf = std::io::Cursor::new(Vec::new());
    chw_to_rgb(chw, size).write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Decodes PNG/JPEG bytes, resizing to `size` when needed.
pub fn decode_image(bytes: &[u8], size: usize) -> Result<Vec<f32>> {
    let img = image::load_from_memory(bytes)?.to_rgb8();
    Ok(rgb_to_chw(&fit(img, size)))
}

fn fit(img: RgbImage, size: usize) -> RgbImage {
    if img.dimensions() == (size as u32, size as u32) {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    }
}

pub fn load_png(path: &Path, size: usize) -> Result<Vec<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path)?.to_rgb8();
    Ok(rgb_to_chw(&fit(img, size)))
}

pub fn save_png(path: &Path, chw: &[f32], size: usize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    chw_to_rgb(chw, size).save(path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// All images of one identity, stacked as `N x 3 x S x S`.
#[derive(Debug)]
pub struct IdentityImages {
    pub tag: String,
    pub images: Tensor,
    pub attributes: Vec<Option<SpriteAttributes>>,
}

impl IdentityImages {
    pub fn len(&self) -> usize {
        self.images.size()[0] as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.narrow(0, i as i64, 1)
    }
}

/// Images grouped by identity with identity-disjoint train/val splits.
#[derive(Debug)]
pub struct IdentityDataset {
    pub image_size: usize,
    pub train: Vec<IdentityImages>,
    pub val: Vec<IdentityImages>,
}

impl IdentityDataset {
    pub fn validate(&self) -> Result<()> {
        if self.train.len() < 2 {
            return Err(Error::Config("training split needs at least two identities".into()));
        }
        if !self.train.iter().any(|id| id.len() >= 2) {
            return Err(Error::Config("no training identity has two images".into()));
        }
        let train_tags: std::collections::HashSet<&str> =
            self.train.iter().map(|i| i.tag.as_str()).collect();
        if let Some(dup) = self.val.iter().find(|v| train_tags.contains(v.tag.as_str())) {
            return Err(Error::Config(format!("identity {} appears in both splits", dup.tag)));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> &[IdentityImages] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Reads a manifest written by [`write_toy_dataset`] or by hand.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
        let root = path.parent().unwrap_or(Path::new("."));
        let size = manifest.image_size;
        let mut ds = Self { image_size: size, train: Vec::new(), val: Vec::new() };
        for entry in manifest.identities {
            let mut chw = Vec::new();
            let mut attrs = Vec::new();
            for img in &entry.images {
                chw.extend(load_png(&root.join(&img.path), size)?);
                attrs.push(img.attributes);
            }
            let n = entry.images.len() as i64;
            let images = Tensor::from_slice(&chw).view([n, 3, size as i64, size as i64]);
            let group = IdentityImages { tag: entry.tag, images, attributes: attrs };
            match entry.split {
                Split::Train => ds.train.push(group),
                Split::Val => ds.val.push(group),
            }
        }
        ds.validate()?;
        Ok(ds)
    }

    /// Ingests a folder-per-identity corpus; the last `val_identities`
    /// folders (sorted by name) form the validation split.
    pub fn from_folders(root: &Path, size: usize, val_identities: usize) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::MissingFile(root.to_path_buf()));
        }
        let mut dirs: Vec<PathBuf> = fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        let n_train = dirs.len().saturating_sub(val_identities);
        let mut ds = Self { image_size: size, train: Vec::new(), val: Vec::new() };
        for (i, dir) in dirs.iter().enumerate() {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    matches!(
                        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
                        Some("png" | "jpg" | "jpeg")
                    )
                })
                .collect();
            files.sort();
            if files.is_empty() {
                continue;
            }
            let mut chw = Vec::new();
            for f in &files {
                chw.extend(load_png(f, size)?);
            }
            let n = files.len() as i64;
            let group = IdentityImages {
                tag: dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                images: Tensor::from_slice(&chw).view([n, 3, size as i64, size as i64]),
                attributes: vec![None; files.len()],
            };
            if i < n_train {
                ds.train.push(group);
            } else {
                ds.val.push(group);
            }
        }
        ds.validate()?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestImage {
    pub path: String,
    #[serde(default)]
    pub attributes: Option<SpriteAttributes>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub tag: String,
    pub split: Split,
    pub images: Vec<ManifestImage>,
}

/// Dataset manifest: identity tag to image paths, relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub image_size: usize,
    pub identities: Vec<ManifestIdentity>,
}

/// Parameters of a procedurally generated sprite corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDataConfig {
    pub train_identities: usize,
    pub val_identities: usize,
    pub per_identity: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self { train_identities: 20, val_identities: 5, per_identity: 50, image_size: 64, seed: 7 }
    }
}

/// One rendered toy identity.
#[derive(Debug, Clone)]
pub struct ToyIdentity {
    pub tag: String,
    pub split: Split,
    pub geometry: IdentityGeometry,
    pub contents: Vec<SpriteContent>,
    pub pixels: Vec<Vec<f32>>,
}

/// Identity `index` of namespace `seed`; identities are independent of how
/// many others are generated.
pub fn toy_identity(seed: u64, index: usize, per_identity: usize, size: usize, split: Split) -> ToyIdentity {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    let geometry = IdentityGeometry::sample(&mut rng);
    let contents: Vec<SpriteContent> = (0..per_identity).map(|_| SpriteContent::sample(&mut rng)).collect();
    let pixels = contents.iter().map(|c| sprites::render(&geometry, c, size)).collect();
    ToyIdentity { tag: format!("id_{index:04}"), split, geometry, contents, pixels }
}

pub fn toy_identities(cfg: &ToyDataConfig) -> Vec<ToyIdentity> {
    let total = cfg.train_identities + cfg.val_identities;
    (0..total)
        .map(|i| {
            let split = if i < cfg.train_identities { Split::Train } else { Split::Val };
            toy_identity(cfg.seed, i, cfg.per_identity, cfg.image_size, split)
        })
        .collect()
}

fn to_group(id: &ToyIdentity, size: usize) -> IdentityImages {
    let flat: Vec<f32> = id.pixels.concat();
    IdentityImages {
        tag: id.tag.clone(),
        images: Tensor::from_slice(&flat).view([id.pixels.len() as i64, 3, size as i64, size as i64]),
        attributes: id.contents.iter().map(|c| Some(SpriteAttributes::from(c))).collect(),
    }
}

/// In-memory toy dataset.
pub fn toy_dataset(cfg: &ToyDataConfig) -> IdentityDataset {
    let mut ds = IdentityDataset { image_size: cfg.image_size, train: Vec::new(), val: Vec::new() };
    for id in toy_identities(cfg) {
        let group = to_group(&id, cfg.image_size);
        match id.split {
            Split::Train => ds.train.push(group),
            Split::Val => ds.val.push(group),
        }
    }
    ds
}

/// Writes PNGs plus `manifest.json` under `out`; returns the manifest path.
pub fn write_toy_dataset(cfg: &ToyDataConfig, out: &Path) -> Result<PathBuf> {
    if cfg.per_identity < 2 {
        return Err(Error::Config("per_identity must be at least 2".into()));
    }
    let mut identities = Vec::new();
    for id in toy_identities(cfg) {
        let mut images = Vec::new();
        for (k, (px, content)) in id.pixels.iter().zip(&id.contents).enumerate() {
            let rel = format!("{}/{k:04}.png", id.tag);
            save_png(&out.join(&rel), px, cfg.image_size)?;
            images.push(ManifestImage { path: rel, attributes: Some(content.into()) });
        }
        identities.push(ManifestIdentity { tag: id.tag, split: id.split, images });
    }
    let manifest = DatasetManifest { version: 1, image_size: cfg.image_size, identities };
    let path = out.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(path)
}

/// Identity tag to indices helper used by pair samplers.
pub fn identity_index(groups: &[IdentityImages]) -> BTreeMap<String, usize> {
    groups.iter().enumerate().map(|(i, g)| (g.tag.clone(), i)).collect()
}

/// Picks two distinct indices in `0..n` (n >= 2).
pub fn two_distinct<R: Rng + ?Sized>(rng: &mut R, n: usize) -> (usize, usize) {
    let a = rng.gen_range(0..n);
    let mut b = rng.gen_range(0..n - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

/// Clip of toy identity `index`: the face drifts left to right across a
/// `canvas`-pixel frame and rolls slightly. The face square is `face` pixels
/// and sits on a canvas of its own background colour, so a detector sees one
/// blob per frame.
pub fn toy_clip(seed: u64, index: usize, frames: usize, face: usize, canvas: usize) -> Result<Vec<crate::frames::Frame>> {
    if face > canvas || frames == 0 {
        return Err(Error::Config(format!("{frames} frames of a {face}px face on a {canvas}px canvas")));
    }
    let id = toy_identity(seed, index, 1, face, Split::Val);
    let mut content = id.contents[0];
    content.pose_class = 0;
    content.dx_jitter = 0.0;
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let phase = if frames > 1 { t as f32 / (frames - 1) as f32 } else { 0.0 };
        content.roll = 0.15 * (phase * std::f32::consts::TAU).sin();
        let sprite = sprites::render(&id.geometry, &content, face);
        let mut frame = crate::frames::Frame::filled(canvas, canvas, sprites::BACKGROUNDS[content.background]);
        let left = (phase * (canvas - face) as f32).round() as usize;
        let top = (canvas - face) / 2;
        for k in 0..3 {
            for r in 0..face {
                let dst = k * canvas * canvas + (top + r) * canvas + left;
                frame.data[dst..dst + face].copy_from_slice(&sprite[k * face * face + r * face..][..face]);
            }
        }
        out.push(frame);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_for_toy_pixels() {
        let id = toy_identity(1, 0, 2, 32, Split::Train);
        let bytes = encode_png(&id.pixels[0], 32).unwrap();
        let back = decode_image(&bytes, 32).unwrap();
        let err = back.iter().zip(&id.pixels[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
        assert!(err < 1e-6);
    }

    #[test]
    fn image_tensor_rejects_bad_shapes() {
        assert!(ImageTensor::new(Tensor::zeros([1, 1, 8, 8], (Kind::Float, tch::Device::Cpu))).is_err());
        assert!(ImageTensor::new(Tensor::zeros([1, 3, 8, 4], (Kind::Float, tch::Device::Cpu))).is_err());
        assert!(ImageTensor::from_chw(&[0.0; 10], 4).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyDataConfig { train_identities: 3, val_identities: 1, per_identity: 3, image_size: 16, seed: 2 };
        let path = write_toy_dataset(&cfg, dir.path()).unwrap();
        let ds = IdentityDataset::from_manifest(&path).unwrap();
        let mem = toy_dataset(&cfg);
        assert_eq!(ds.train.len(), 3);
        assert_eq!(ds.val.len(), 1);
        assert_eq!(ds.train[1].images.size(), vec![3, 3, 16, 16]);
        let diff = (&ds.train[2].images - &mem.train[2].images).abs().max().double_value(&[]);
        assert!(diff < 1e-6);
        assert_eq!(ds.val[0].attributes, mem.val[0].attributes);
    }

    #[test]
    fn folder_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyDataConfig { train_identities: 2, val_identities: 1, per_identity: 2, image_size: 16, seed: 2 };
        write_toy_dataset(&cfg, dir.path()).unwrap();
        let ds = IdentityDataset::from_folders(dir.path(), 16, 1).unwrap();
        assert_eq!(ds.train.len(), 2);
        assert_eq!(ds.val.len(), 1);
        assert_eq!(ds.val[0].tag, "id_0002");
    }

    #[test]
    fn missing_manifest() {
        assert!(matches!(
            IdentityDataset::from_manifest(Path::new("/nonexistent/manifest.json")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn toy_clip_moves_one_face() {
        use crate::adapters::{FaceDetector, SpriteDetector};
        let clip = toy_clip(3, 0, 5, 32, 48).unwrap();
        assert_eq!(clip.len(), 5);
        let det = SpriteDetector::default();
        let lefts: Vec<usize> = clip.iter().map(|f| det.detect(f)[0].left).collect();
        assert!(lefts.windows(2).all(|w| w[0] <= w[1]), "{lefts:?}");
        assert!(lefts[4] > lefts[0]);
        assert_eq!(toy_clip(3, 0, 5, 32, 48).unwrap(), clip);
        assert!(toy_clip(3, 0, 5, 64, 48).is_err());
    }
}
