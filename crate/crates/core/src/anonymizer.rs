//! Inference: encode once, move the identity vector on the sphere, decode.
//!
//! Every decode goes through [`AnonymizerModel::decode`], which re-checks that
//! the content code is bit-for-bit the one produced at encode time. There is
//! no parameter through which another person's image could enter.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{nn, Tensor};

use crate::adapters::FaceDetector;
use crate::checkpoint::Checkpoint;
use crate::data::{tensor_to_vec, ImageTensor};
use crate::error::{Error, Result};
use crate::frames::{self, CropBox, Frame};
use crate::geometry::{
    cosine_similarity, retarget_direction, rotate_towards, sample_anonymous, seeded_direction, sweep_directions,
    AngleSpec, IdentityVector,
};
use crate::model::{cosine, identity_tensor, seeded, Generator, ModelConfig, RecognizerAdapter};
use crate::recognizer;
use crate::training::CHECKPOINT_KIND;

/// A trained generator plus the recognizer that defines `theta`.
pub struct AnonymizerModel {
    pub config: ModelConfig,
    pub vs: nn::VarStore,
    pub generator: Generator,
    pub recognizer: RecognizerAdapter,
    pub step: usize,
    /// Short digest of the checkpoint contents.
    pub digest: String,
}

impl std::fmt::Debug for AnonymizerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AnonymizerModel").field("step", &self.step).field("digest", &self.digest).finish()
    }
}

impl AnonymizerModel {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let config: ModelConfig = serde_json::from_value(ck.header.config["model"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("model config: {e}")))?;
        let (vs, generator) = seeded(0, || -> Result<_> {
            let vs = nn::VarStore::new(tch::Device::Cpu);
            let g = Generator::new(&vs.root(), &config)?;
            Ok((vs, g))
        })?;
        ck.load_var_store("generator", &vs)?;
        let r = &ck.header.extra["recognizer"];
        let mut rck = Checkpoint::new(recognizer::CHECKPOINT_KIND, 0, r["config"].clone());
        rck.header.extra = r["extra"].clone();
        for (k, v) in &ck.blobs {
            if let Some(rest) = k.strip_prefix("recognizer/") {
                rck.blobs.insert(rest.to_string(), v.clone());
            }
        }
        let recognizer = recognizer::from_checkpoint(&rck)?;
        if recognizer.d_id() != config.d_id {
            return Err(Error::IncompatibleCheckpoint(format!(
                "field d_id: recognizer {} vs generator {}",
                recognizer.d_id(),
                config.d_id
            )));
        }
        let digest = hex::encode(&Sha256::digest(ck.to_bytes()?)[..8]);
        let mut vs = vs;
        vs.freeze();
        Ok(Self { config, vs, generator, recognizer, step: ck.header.step, digest })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Threshold angle of the bundled recognizer.
    pub fn theta(&self) -> f64 {
        self.recognizer.theta()
    }

    pub fn threshold(&self) -> f64 {
        self.recognizer.threshold
    }

    pub fn image_size(&self) -> usize {
        self.config.image_size as usize
    }

    pub fn request(&self, alpha: f64, direction_seed: u64) -> AnonymizationRequest {
        AnonymizationRequest { alpha, direction_seed, theta: self.theta() }
    }

    /// Encodes one image.
    pub fn encode(&self, source: &ImageTensor) -> Result<Encoded> {
        if source.batch() != 1 || source.image_size() != self.config.image_size {
            return Err(Error::Shape(format!(
                "expected one {}px image, got {:?}",
                self.config.image_size,
                source.tensor().size()
            )));
        }
        let (content, id) = tch::no_grad(|| self.generator.encode_tensors(source.tensor()))?;
        let identity = crate::geometry::project_f32(&tensor_to_vec(&id))?;
        let source_chw = source.chw(0);
        let embedding = self.embed(&source_chw)?;
        let content_digest = digest_tensor(&content);
        Ok(Encoded { content, content_digest, identity, source: source_chw, embedding })
    }

    pub fn encode_chw(&self, chw: &[f32]) -> Result<Encoded> {
        self.encode(&ImageTensor::from_chw(chw, self.image_size())?)
    }

    /// Decodes `z` with the untouched content code of `enc`.
    pub fn decode(&self, enc: &Encoded, z: &IdentityVector) -> Result<Vec<f32>> {
        if digest_tensor(&enc.content) != enc.content_digest {
            return Err(Error::Invalid("content code changed after encoding".into()));
        }
        let zt = identity_tensor(std::slice::from_ref(z), self.config.d_id)?;
        let out = tch::no_grad(|| self.generator.decode_tensors(&enc.content, &zt))?;
        Ok(tensor_to_vec(&out))
    }

    pub fn reconstruct(&self, enc: &Encoded) -> Result<Vec<f32>> {
        self.decode(enc, &enc.identity)
    }

    /// Raw recognizer embedding of one image.
    pub fn embed(&self, chw: &[f32]) -> Result<Vec<f32>> {
        let x = ImageTensor::from_chw(chw, self.image_size())?;
        Ok(self.recognizer.recognize(&x)?.remove(0))
    }

    /// Recognizer cosine between an image and the encoded source.
    pub fn cosine_to_source(&self, enc: &Encoded, chw: &[f32]) -> Result<f64> {
        Ok(cosine(&enc.embedding, &self.embed(chw)?))
    }
}

fn digest_tensor(t: &Tensor) -> [u8; 32] {
    let mut h = Sha256::new();
    for v in tensor_to_vec(t) {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Codes of one source image.
#[derive(Debug)]
pub struct Encoded {
    content: Tensor,
    content_digest: [u8; 32],
    pub identity: IdentityVector,
    /// The source pixels, CHW in [-1, 1].
    pub source: Vec<f32>,
    /// Recognizer embedding of the source.
    pub embedding: Vec<f32>,
}

impl Encoded {
    pub fn content_digest(&self) -> [u8; 32] {
        self.content_digest
    }

    pub fn content(&self) -> &Tensor {
        &self.content
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnonymizationRequest {
    pub alpha: f64,
    pub direction_seed: u64,
    /// Threshold angle; `alpha` must exceed it.
    pub theta: f64,
}

#[derive(Debug, Clone)]
pub struct Anonymized {
    pub image: Vec<f32>,
    pub identity: IdentityVector,
    /// Recognizer cosine to the source image.
    pub cosine: f64,
}

pub fn anonymize_encoded(model: &AnonymizerModel, enc: &Encoded, req: &AnonymizationRequest) -> Result<Anonymized> {
    let spec = AngleSpec::new(req.theta, req.alpha, req.direction_seed)?;
    let z = sample_anonymous(&enc.identity, &spec)?;
    let image = model.decode(enc, &z)?;
    let cosine = model.cosine_to_source(enc, &image)?;
    Ok(Anonymized { image, identity: z, cosine })
}

/// Encodes `source` and anonymizes it.
pub fn anonymize_image(model: &AnonymizerModel, source: &ImageTensor, req: &AnonymizationRequest) -> Result<Anonymized> {
    AngleSpec::new(req.theta, req.alpha, req.direction_seed)?;
    anonymize_encoded(model, &model.encode(source)?, req)
}

/// Grid indexed by (seed row, alpha column).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub theta: f64,
    pub threshold: f64,
    /// `images[row][col]`, CHW in [-1, 1].
    #[serde(skip)]
    pub images: Vec<Vec<Vec<f32>>>,
    pub cosines: Vec<Vec<f64>>,
}

/// Decodes every (seed, alpha) cell. Alphas may lie anywhere in `[0, pi)`,
/// including below `theta`, so the full identity curve can be plotted; the
/// service restricts them before calling this.
pub fn sweep(model: &AnonymizerModel, enc: &Encoded, alphas: &[f64], seeds: &[u64]) -> Result<SweepResult> {
    let grid = sweep_directions(&enc.identity, alphas, seeds)?;
    let mut images = Vec::with_capacity(seeds.len());
    let mut cosines = Vec::with_capacity(seeds.len());
    for row in &grid {
        let mut ims = Vec::with_capacity(row.len());
        let mut cs = Vec::with_capacity(row.len());
        for z in row {
            let img = model.decode(enc, z)?;
            cs.push(model.cosine_to_source(enc, &img)?);
            ims.push(img);
        }
        images.push(ims);
        cosines.push(cs);
    }
    Ok(SweepResult {
        alphas: alphas.to_vec(),
        seeds: seeds.to_vec(),
        theta: model.theta(),
        threshold: model.threshold(),
        images,
        cosines,
    })
}

/// How to obtain the face crop of a raw frame.
#[derive(Clone, Copy)]
pub enum Alignment<'a> {
    /// The frame is already a square face crop.
    PreAligned,
    Detector(&'a dyn FaceDetector),
    /// Unaligned input and no detector.
    Unavailable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFace {
    /// Crop resized to the model resolution.
    pub crop: Vec<f32>,
    /// Where the crop came from; pasting back inverts the crop.
    pub region: CropBox,
}

/// Face region of frame `index`.
pub fn locate_face(frame: &Frame, alignment: Alignment, index: usize) -> Result<CropBox> {
    match alignment {
        Alignment::PreAligned => CropBox::full(frame),
        Alignment::Detector(d) => d.detect(frame).first().copied().ok_or(Error::NoFace(index)),
        Alignment::Unavailable => Err(Error::AdapterUnavailable("face alignment requested without a detector".into())),
    }
}

pub fn align_face(frame: &Frame, size: usize, alignment: Alignment, index: usize) -> Result<AlignedFace> {
    let region = locate_face(frame, alignment, index)?;
    Ok(AlignedFace { crop: frames::crop(frame, region, size)?, region })
}

/// Inverse of [`align_face`]: blends an edited crop back into the frame.
pub fn paste_back(frame: &Frame, face: &AlignedFace, edited: &[f32], size: usize) -> Result<Frame> {
    frames::paste(frame, face.region, edited, size)
}

#[derive(Debug, Clone)]
pub struct VideoJob {
    pub frames: Vec<Frame>,
    pub alpha: f64,
    pub direction_seed: u64,
    pub theta: f64,
    /// Face region per frame; `None` marks a frame the aligner could not place.
    pub regions: Vec<Option<CropBox>>,
}

impl VideoJob {
    /// Runs `alignment` on every frame; failures become `None` regions.
    pub fn align(
        frames: Vec<Frame>,
        alignment: Alignment,
        alpha: f64,
        direction_seed: u64,
        theta: f64,
    ) -> Result<Self> {
        if let Alignment::Unavailable = alignment {
            return Err(Error::AdapterUnavailable("video frames need a detector or pre-aligned input".into()));
        }
        let regions = frames
            .iter()
            .enumerate()
            .map(|(i, f)| locate_face(f, alignment, i).ok())
            .collect();
        Ok(Self { frames, alpha, direction_seed, theta, regions })
    }
}

#[derive(Debug, Clone)]
pub struct VideoFrame {
    pub frame: Frame,
    pub anonymized: bool,
    pub warning: Option<String>,
    /// Anonymized model-resolution crop, when the frame was processed.
    pub crop: Option<Vec<f32>>,
    /// Source crop the anonymized one came from.
    pub source_crop: Option<Vec<f32>>,
}

/// Anonymizes every frame with one tangent direction and one angle.
///
/// The direction is drawn from the seed at the first usable frame and then
/// re-orthogonalised against each later frame's identity, so all frames move
/// the same way on the sphere.
pub fn anonymize_video(model: &AnonymizerModel, job: &VideoJob) -> Result<Vec<VideoFrame>> {
    let spec = AngleSpec::new(job.theta, job.alpha, job.direction_seed)?;
    if job.frames.len() != job.regions.len() {
        return Err(Error::Shape("one region entry per frame is required".into()));
    }
    if let Some(first) = job.frames.first() {
        if job.frames.iter().any(|f| (f.width, f.height) != (first.width, first.height)) {
            return Err(Error::Shape("all frames of a clip must share one resolution".into()));
        }
    }
    let size = model.image_size();
    let mut direction: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(job.frames.len());
    for (i, (frame, region)) in job.frames.iter().zip(&job.regions).enumerate() {
        let region = match region {
            Some(r) if r.fits(frame) => *r,
            _ => {
                log::warn!("frame {i}: no usable face region, passed through unmodified");
                out.push(VideoFrame {
                    frame: frame.clone(),
                    anonymized: false,
                    warning: Some(format!("frame {i}: misaligned, passed through")),
                    crop: None,
                    source_crop: None,
                });
                continue;
            }
        };
        let face = AlignedFace { crop: frames::crop(frame, region, size)?, region };
        let enc = model.encode_chw(&face.crop)?;
        let z = match &direction {
            None => {
                let u = seeded_direction(&enc.identity, spec.direction_seed);
                let z = sample_anonymous(&enc.identity, &spec)?;
                direction = Some(u);
                z
            }
            Some(u) => {
                let t = retarget_direction(u, &enc.identity)?;
                rotate_towards(&enc.identity, &t, spec.alpha)?
            }
        };
        if !(cosine_similarity(&enc.identity, &z) < spec.theta.cos()) {
            return Err(Error::AnonymityViolation { alpha: spec.alpha, theta: spec.theta });
        }
        let crop = model.decode(&enc, &z)?;
        out.push(VideoFrame {
            frame: paste_back(frame, &face, &crop, size)?,
            anonymized: true,
            warning: None,
            crop: Some(crop),
            source_crop: Some(face.crop),
        });
    }
    Ok(out)
}
