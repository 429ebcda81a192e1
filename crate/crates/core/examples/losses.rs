//! Every loss term on one same-identity and one different-identity batch,
//! computed by hand and then through a full training step.
//!
//!     cargo run --release --example losses

mod common;

use cfanet::data::{toy_dataset, Split};
use cfanet::losses::{
    adversarial_loss, content_loss, gradient_penalty, identity_consistency_loss, identity_smoothing_loss,
    reconstruction_loss, scalar,
};
use cfanet::model::{seeded, RecognizerAdapter};
use cfanet::training::{sample_pair, Trainer};

fn main() -> cfanet::Result<()> {
    let ds = toy_dataset(&common::demo_data());
    let cfg = common::demo_train();
    // An untrained recognizer is enough to show the terms.
    let r = seeded(3, || RecognizerAdapter::new(&common::demo_recognizer().net)).frozen();
    let mut t = Trainer::new(&cfg, r)?;

    for step in 0..2 {
        let pair = sample_pair(&ds, Split::Train, step, 4, &mut t.rng)?;
        let (x, y) = (pair.x.tensor(), pair.y.tensor());
        let (z_x_con, z_x_id) = t.generator.encode_tensors(x)?;
        let (_, z_y_id) = t.generator.encode_tensors(y)?;
        let x_cross = t.generator.decode_tensors(&z_x_con, &z_y_id)?;
        let x_rec = t.generator.decode_tensors(&z_x_con, &z_x_id)?;

        println!("pair label c = {} ({} vs {})", pair.label.c(), pair.x_tags[0], pair.y_tags[0]);
        let (con, con_d) =
            content_loss(pair.label, &x_cross, x, &t.disc_local, &cfg.patches, cfg.model.patch_size, &mut t.rng)?;
        println!("  content              {:.4}", scalar(&con));
        if let Some(d) = con_d {
            println!("  local discriminator  {:.4}", scalar(&d));
        }
        println!("  identity consistency {:.4}", scalar(&identity_consistency_loss(&x_cross, y, &z_y_id, &t.recognizer)?));
        let s = identity_smoothing_loss(&z_x_con, &z_x_id, &z_y_id, &t.generator, &t.recognizer, &cfg.smoothing, &mut t.rng)?;
        println!("  identity smoothing   {:.3e} (path length {:.3})", scalar(&s.loss), s.path_length);
        let adv = adversarial_loss(x, y, &x_rec, &x_cross, &t.disc)?;
        println!("  adversarial G / D    {:.4} / {:.4}", scalar(&adv.generator), scalar(&adv.discriminator));
        println!("  reconstruction       {:.4}", scalar(&reconstruction_loss(x, &x_rec)?));
        println!("  gradient penalty     {:.3e}", scalar(&gradient_penalty(&t.disc, x, y)?));
    }

    println!("training steps:");
    for _ in 0..4 {
        let pair = sample_pair(&ds, Split::Train, t.step, 4, &mut t.rng)?;
        let r = t.train_step(&pair)?;
        println!("  step {} c={} total {:.4} weighted {:?}", r.step, r.c, r.total, r.weighted.map(|v| (v * 1e4).round() / 1e4));
    }
    Ok(())
}
