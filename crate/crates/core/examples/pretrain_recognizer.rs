//! Pretrain and calibrate the face recognizer that defines theta.
//!
//! The default is a small 32 px net that trains in well under a minute;
//! `--toy` trains the one the toy config uses (several minutes).
//!
//!     cargo run --release --example pretrain_recognizer [-- --toy]

mod common;

use std::path::Path;

use cfanet::config::ExperimentConfig;
use cfanet::data::{tensor_to_vec, toy_dataset, ToyDataConfig};
use cfanet::model::cosine;
use cfanet::recognizer::{pretrain, save};

fn main() -> cfanet::Result<()> {
    common::init_logging();
    let toy = std::env::args().any(|a| a == "--toy");
    let cfg = if toy {
        ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.toml"))?.recognizer
    } else {
        common::demo_recognizer()
    };
    let t = std::time::Instant::now();
    let r = pretrain(&cfg)?;
    println!(
        "pretrained in {:.0}s: threshold {:.4} at FAR {}, theta {:.4} rad",
        t.elapsed().as_secs_f64(),
        r.threshold,
        cfg.far,
        r.theta()
    );

    // Scores on identities the recognizer never saw.
    let ds = toy_dataset(&ToyDataConfig { image_size: cfg.net.image_size as usize, per_identity: 4, ..Default::default() });
    let emb: Vec<Vec<Vec<f32>>> = ds
        .train
        .iter()
        .map(|g| {
            let e = r.embed(&g.images).to_kind(tch::Kind::Float);
            (0..g.len() as i64).map(|i| tensor_to_vec(&e.get(i))).collect()
        })
        .collect();
    let (mut gen, mut imp) = (Vec::new(), Vec::new());
    for (a, ea) in emb.iter().enumerate() {
        for (b, eb) in emb.iter().enumerate().skip(a) {
            for (i, x) in ea.iter().enumerate() {
                for y in eb.iter().skip(if a == b { i + 1 } else { 0 }) {
                    if a == b { gen.push(cosine(x, y)) } else { imp.push(cosine(x, y)) }
                }
            }
        }
    }
    let accepted = |s: &[f64]| s.iter().filter(|&&c| c >= r.threshold).count() as f64 / s.len() as f64;
    println!("unseen toy identities: {:.3} of genuine pairs and {:.4} of impostor pairs accepted", accepted(&gen), accepted(&imp));

    let out = common::scratch_dir("recognizer").join(if toy { "toy.ckpt" } else { "demo.ckpt" });
    save(&r, Some(&cfg), &out)?;
    println!("saved {}", out.display());
    Ok(())
}
