//! Verification threshold at a fixed false-accept rate.
//!
//!     cargo run --release --example tpr_at_far

use cfanet::evaluation::tpr_at_far;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

fn main() -> cfanet::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let genuine: Vec<f64> = (0..2000).map(|_| rng.sample(Normal::new(0.8, 0.08).unwrap())).collect();
    let impostor: Vec<f64> = (0..20_000).map(|_| rng.sample(Normal::new(0.1, 0.15).unwrap())).collect();
    for far in [0.1, 0.01, 0.001, 0.0001] {
        let r = tpr_at_far(&genuine, &impostor, far)?;
        println!("FAR {far:<7} threshold {:.4}  TPR {:.4}", r.threshold, r.tpr);
    }
    // With 20 impostors no score reaches FAR 0.001; the threshold moves just above the maximum.
    let r = tpr_at_far(&genuine, &impostor[..20], 0.001)?;
    println!("20 impostors at FAR 0.001: threshold {:.4}, fallback {}", r.threshold, r.fallback);
    Ok(())
}
