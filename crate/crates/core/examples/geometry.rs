//! Identity vectors on the unit sphere: slerp, the anonymity angle and the
//! direction grid behind a sweep.
//!
//!     cargo run --release --example geometry

use cfanet::geometry::{
    angle, cosine_similarity, project_to_sphere, sample_anonymous, slerp, sweep_directions, theta_from_threshold,
    AngleSpec,
};

fn main() -> cfanet::Result<()> {
    let a = project_to_sphere(&[1.0, 0.2, -0.4, 0.3])?;
    let b = project_to_sphere(&[-0.1, 0.9, 0.5, 0.0])?;
    println!("angle(a, b) = {:.4} rad", angle(&a, &b));
    for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let p = slerp(&a, &b, t)?;
        println!("slerp t={t:.2}: |p| = {:.12}, angle(a, p) = {:.4}", p.norm(), angle(&a, &p));
    }

    // A recognizer accepting cosines above 0.8 gives theta = acos(0.8).
    let theta = theta_from_threshold(0.8);
    let alpha = theta + 0.3;
    let spec = AngleSpec::new(theta, alpha, 42)?;
    let z = sample_anonymous(&a, &spec)?;
    println!(
        "theta {theta:.4}, alpha {alpha:.4}: cos(a, z) = {:.4} < cos(theta) = {:.4}",
        cosine_similarity(&a, &z),
        theta.cos()
    );
    match AngleSpec::new(theta, theta, 42) {
        Err(e) => println!("alpha = theta is refused: {e}"),
        Ok(_) => unreachable!(),
    }

    let grid = sweep_directions(&a, &[0.0, 0.5, 1.0, 1.5], &[1, 2, 3])?;
    for (row, seed) in grid.iter().zip([1, 2, 3]) {
        let angles: Vec<String> = row.iter().map(|z| format!("{:.3}", angle(&a, z))).collect();
        println!("seed {seed}: angles to a = [{}]", angles.join(", "));
    }
    Ok(())
}
