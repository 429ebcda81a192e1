//! Anonymize a 16-frame toy clip with one direction and one angle, then
//! write the frames.
//!
//!     cargo run --release --example video [-- CHECKPOINT]

mod common;

use cfanet::adapters::SpriteDetector;
use cfanet::anonymizer::{anonymize_video, Alignment, VideoJob};
use cfanet::data::toy_clip;
use cfanet::frames::write_frames;
use cfanet::model::cosine;

fn main() -> cfanet::Result<()> {
    common::init_logging();
    let (model, _) = common::model_and_data()?;
    let size = model.image_size();
    let clip = toy_clip(5, 0, 16, size, size * 3 / 2)?;
    let det = SpriteDetector::default();
    let job = VideoJob::align(clip, Alignment::Detector(&det), model.theta() + 0.3, 7, model.theta())?;
    let frames = anonymize_video(&model, &job)?;

    let mut first = None;
    for (i, f) in frames.iter().enumerate() {
        if let Some(w) = &f.warning {
            println!("frame {i}: {w}");
            continue;
        }
        let (Some(src), Some(anon)) = (&f.source_crop, &f.crop) else { continue };
        let e = model.embed(anon)?;
        let to_source = cosine(&e, &model.embed(src)?);
        let to_first = first.get_or_insert_with(|| e.clone());
        println!("frame {i:>2}: cosine to source {to_source:+.3}, to anonymized frame 0 {:+.3}", cosine(&e, to_first));
    }
    let out = common::scratch_dir("video");
    write_frames(&out, &frames.into_iter().map(|f| f.frame).collect::<Vec<_>>())?;
    println!("frames in {}", out.display());
    Ok(())
}
