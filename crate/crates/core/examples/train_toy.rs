//! Train on the toy sprite world with the committed toy config, then print
//! the validation probes. Takes roughly ten minutes on one core.
//!
//!     cargo run --release --example train_toy [-- OUT_DIR [ITERATIONS]]

mod common;

use std::path::{Path, PathBuf};

use cfanet::config::ExperimentConfig;
use cfanet::data::toy_dataset;
use cfanet::recognizer::load_or_pretrain;
use cfanet::training::train;

fn main() -> cfanet::Result<()> {
    common::init_logging();
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args.next().map(Into::into).unwrap_or_else(|| common::scratch_dir("toy"));
    let mut cfg = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/toy.toml"))?;
    if let Some(n) = args.next() {
        cfg.train.iterations = n.parse().map_err(|_| cfanet::Error::Config(format!("bad iteration count {n}")))?;
    }
    let ds = toy_dataset(&cfg.data.toy);
    let r = load_or_pretrain(&out.join("recognizer.ckpt"), &cfg.recognizer)?;
    println!("recognizer threshold {:.4}, theta {:.4} rad", r.threshold, r.theta());
    let t = std::time::Instant::now();
    let outcome = train(&ds, &cfg.train, r, &out)?;
    println!("{} steps in {:.0}s", cfg.train.iterations, t.elapsed().as_secs_f64());
    for p in &outcome.probes {
        println!(
            "step {:>5}: rec L1 {:.4}  transfer cos {:.3}  leak cos {:.3}",
            p.step, p.reconstruction_l1, p.transfer_cosine, p.leak_cosine
        );
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}
