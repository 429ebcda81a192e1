//! Run every evaluation protocol on the toy validation identities.
//!
//!     cargo run --release --example evaluate [-- CHECKPOINT]

mod common;

use cfanet::adapters::{RandomProjectionFeatures, SpriteAttributeClassifier, SpriteDetector};
use cfanet::evaluation::{evaluate, Adapters, EvalConfig};

fn main() -> cfanet::Result<()> {
    common::init_logging();
    let (model, ds) = common::model_and_data()?;
    let (det, attr, feat) = (SpriteDetector::default(), SpriteAttributeClassifier, RandomProjectionFeatures::default());
    let adapters = Adapters { detectors: vec![&det], attributes: Some(&attr), features: Some(&feat) };
    let cfg = EvalConfig { sources_per_identity: 8, gallery_per_identity: 8, ..Default::default() };
    let r = evaluate(&model, &ds, &cfg, &adapters)?;

    let v = &r.verification;
    println!("alpha {:.4} (theta {:.4})", r.alpha, r.theta);
    println!(
        "verification: TPR {:.3} -> {:.3} at threshold {:.4}; {:.3} -> {:.3} at the calibrated {:.4}",
        v.before.tpr, v.after_tpr, v.before.threshold, v.before_tpr_calibrated, v.after_tpr_calibrated, r.threshold
    );
    println!(
        "ranking: median rank {:.1} -> {:.1} of {}, top-1 gallery cosine up to {:.4}",
        r.ranking.median_pre_rank, r.ranking.median_post_rank, r.ranking.gallery_size, r.ranking.max_top1_cosine
    );
    println!("anonymization success {:.3}, content distance {:?}", r.anonymization_success, r.content_distance);
    println!("PSNR {:.2} dB, SSIM {:.3}, reconstruction L1 {:.4}", r.image.psnr, r.image.ssim, r.reconstruction_l1);
    println!("detection {:?}", r.detection_rate);
    println!("attribute retention {:?}", r.attribute_retention);
    for c in r.curves.iter().take(3) {
        println!("curve {} seed {}: spearman {:+.3}", c.source, c.curve.seed, c.spearman);
    }
    Ok(())
}
