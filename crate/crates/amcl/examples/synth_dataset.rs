//! Generate a synthetic vein dataset and inspect the session split.
//!
//! ```text
//! cargo run --release --example synth_dataset
//! ```

use amcl::data::{generate_synthetic_dataset, SyntheticVeinConfig};
use amcl::pipeline::plots::tile_gallery;

fn main() -> amcl::Result<()> {
    let cfg = SyntheticVeinConfig {
        num_classes: 8,
        images_per_class_per_session: 4,
        seed: 7,
        ..Default::default()
    };
    let split = generate_synthetic_dataset(&cfg)?;
    println!("generated {}", split.summary());

    // Per-class intensity statistics show the session-2 illumination shift.
    let mean = |imgs: &[amcl::data::Image]| {
        imgs.iter().map(|i| i.pixels.sum() / 4096.0).sum::<f64>() / imgs.len() as f64
    };
    println!("mean intensity: train {:.3}, test {:.3}", mean(&split.train), mean(&split.test));

    // A gallery of the first 16 train and 16 test images.
    let tiles: Vec<_> = split
        .train
        .iter()
        .take(16)
        .chain(split.test.iter().take(16))
        .map(|i| i.pixels.clone())
        .collect();
    let out = std::path::Path::new("synth_preview.png");
    tile_gallery(out, &tiles, 8)?;
    println!("wrote {}", out.display());
    Ok(())
}
