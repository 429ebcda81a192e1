//! Render the sprite identity corpus to PNGs plus a manifest and read it back.
//!
//!     cargo run --release --example toy_data [-- OUT_DIR]

mod common;

use cfanet::data::{write_toy_dataset, IdentityDataset, Split, ToyDataConfig};

fn main() -> cfanet::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| common::scratch_dir("toy_data"));
    let cfg = ToyDataConfig::default();
    let manifest = write_toy_dataset(&cfg, &out)?;
    let ds = IdentityDataset::from_manifest(&manifest)?;
    println!("wrote {}", manifest.display());
    for split in [Split::Train, Split::Val] {
        let groups = ds.split(split);
        let images: usize = groups.iter().map(|g| g.len()).sum();
        println!("{split:?}: {} identities, {images} images of {} px", groups.len(), ds.image_size);
    }
    let first = &ds.val[0];
    println!("first validation identity {}: attributes of image 0 = {:?}", first.tag, first.attributes[0]);
    Ok(())
}
