//! Decode a (seed x alpha) grid for one face and print its identity curves.
//!
//!     cargo run --release --example sweep [-- CHECKPOINT]

mod common;

use cfanet::anonymizer::sweep;
use cfanet::data::{save_png, tensor_to_vec};
use cfanet::evaluation::spearman;

fn main() -> cfanet::Result<()> {
    common::init_logging();
    let (model, ds) = common::model_and_data()?;
    let out = common::scratch_dir("sweep");
    let source = tensor_to_vec(&ds.val[1].image(0));
    let enc = model.encode_chw(&source)?;
    let alphas = [0.0, 0.3, 0.6, 0.9, 1.2, 1.5];
    let seeds = [1, 2, 3];
    let s = sweep(&model, &enc, &alphas, &seeds)?;
    println!("theta {:.4}; cells with alpha <= theta are not anonymous", s.theta);
    for (row, seed) in s.cosines.iter().zip(seeds) {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:+.3}")).collect();
        println!("seed {seed}: cosines [{}]  spearman {:+.3}", cells.join(" "), spearman(&alphas, row)?);
    }
    for (r, row) in s.images.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            save_png(&out.join(format!("seed{}_alpha{:.1}.png", seeds[r], alphas[c])), img, model.image_size())?;
        }
    }
    println!("grid in {}", out.display());
    Ok(())
}
