//! Shared setup for the examples: a model to play with.
#![allow(dead_code)]

use std::path::{Path, PathBuf};


use cfanet::anonymizer::AnonymizerModel;
use cfanet::data::{toy_dataset, IdentityDataset, ToyDataConfig};
use cfanet::model::{ModelConfig, RecognizerConfig};
use cfanet::recognizer::{load_or_pretrain, RecognizerTrainConfig};
use cfanet::training::{train, TrainConfig};

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
}

pub fn scratch_dir(name: &str) -> PathBuf {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).ancestors().nth(2).unwrap_or(Path::new("."));
    root.join("target/examples").join(name)
}

/// 32 px toy world small enough to train in about a minute.
pub fn demo_data() -> ToyDataConfig {
    ToyDataConfig { train_identities: 8, val_identities: 3, per_identity: 12, image_size: 32, seed: 7 }
}

pub fn demo_recognizer() -> RecognizerTrainConfig {
    RecognizerTrainConfig {
        net: RecognizerConfig { image_size: 32, input_size: 32, channels: vec![16, 32], hidden: 64, d_id: 16 },
        identities: 100,
        per_identity: 10,
        calib_identities: 20,
        calib_per_identity: 5,
        steps: 600,
        batch_size: 32,
        ..Default::default()
    }
}

pub fn demo_train() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            image_size: 32,
            d_id: 16,
            c_con: 4,
            stride: 4,
            stem_channels: vec![8, 16],
            id_channels: vec![16],
            id_map_channels: 4,
            decoder_channels: vec![32, 16, 8],
            disc_channels: vec![8, 16, 32],
            patch_size: 8,
            local_channels: vec![16, 16],
        },
        iterations: 150,
        batch_size: 4,
        probe_every: 50,
        probe_images: 16,
        checkpoint_every: 0,
        ..Default::default()
    }
}

/// The checkpoint named by the first positional argument, or a short demo
/// run cached under `target/examples/demo`. Demo outputs are not anonymous
/// in any useful sense; pass a toy checkpoint for meaningful pictures.
pub fn checkpoint() -> cfanet::Result<PathBuf> {
    if let Some(path) = std::env::args().skip(1).find(|a| !a.starts_with("--")) {
        return Ok(path.into());
    }
    let dir = scratch_dir("demo");
    let ckpt = dir.join("model.ckpt");
    if !ckpt.exists() {
        println!("no checkpoint given; training a 150-step demo model in {}", dir.display());
        let r = load_or_pretrain(&dir.join("recognizer.ckpt"), &demo_recognizer())?;
        train(&toy_dataset(&demo_data()), &demo_train(), r, &dir)?;
    }
    Ok(ckpt)
}

/// [`checkpoint`] loaded, with the toy dataset at its resolution.
pub fn model_and_data() -> cfanet::Result<(AnonymizerModel, IdentityDataset)> {
    let model = AnonymizerModel::load(&checkpoint()?)?;
    let data = if model.image_size() == demo_data().image_size { demo_data() } else { ToyDataConfig { image_size: model.image_size(), ..Default::default() } };
    Ok((model, toy_dataset(&data)))
}
