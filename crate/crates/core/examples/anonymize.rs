//! Anonymize one validation face at alpha = theta + 0.3 and write
//! source / reconstruction / anonymized PNGs.
//!
//!     cargo run --release --example anonymize [-- CHECKPOINT]

mod common;

use cfanet::anonymizer::anonymize_encoded;
use cfanet::data::{save_png, tensor_to_vec};

fn main() -> cfanet::Result<()> {
    common::init_logging();
    let (model, ds) = common::model_and_data()?;
    let out = common::scratch_dir("anonymize");
    let size = model.image_size();
    let source = tensor_to_vec(&ds.val[0].image(0));
    let enc = model.encode_chw(&source)?;
    save_png(&out.join("source.png"), &source, size)?;
    save_png(&out.join("reconstruction.png"), &model.reconstruct(&enc)?, size)?;

    let alpha = model.theta() + 0.3;
    println!("theta {:.4}, threshold {:.4}, alpha {alpha:.4}", model.theta(), model.threshold());
    for seed in 0..3 {
        let a = anonymize_encoded(&model, &enc, &model.request(alpha, seed))?;
        println!("seed {seed}: recognizer cosine to source {:.4}", a.cosine);
        save_png(&out.join(format!("anonymized_{seed}.png")), &a.image, size)?;
    }
    match anonymize_encoded(&model, &enc, &model.request(model.theta() * 0.5, 0)) {
        Err(e) => println!("alpha below theta is refused: {e}"),
        Ok(_) => unreachable!(),
    }
    println!("images in {}", out.display());
    Ok(())
}
