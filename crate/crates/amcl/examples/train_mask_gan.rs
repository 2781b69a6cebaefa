//! Train the desk-scale mask GAN on a small corpus and sample from it.
//!
//! ```text
//! cargo run --release --example train_mask_gan
//! ```

use amcl::gan::{sample_latents, sample_masks, train_gan, GanArchitecture, GanTrainConfig};
use amcl::masking::{build_mask_corpus, MaskSamplerConfig};
use amcl::pipeline::plots::tile_gallery;
use amcl::rng::stream;

fn main() -> amcl::Result<()> {
    let corpus = build_mask_corpus(&MaskSamplerConfig {
        corpus_size: 2048,
        seed: 11,
        ..Default::default()
    })?;
    let arch = GanArchitecture::desk();
    let cfg = GanTrainConfig {
        epochs: 3,
        batch_size: 64,
        seed: 11,
        ..Default::default()
    };
    println!("training {} on {} masks ...", arch.id, corpus.len());
    let (mut generator, _discriminator, trace) = train_gan(&corpus, &arch, &cfg)?;
    for rec in &trace {
        println!("epoch {:>2}  d_loss {:.4}  g_loss {:.4}", rec.epoch, rec.d_loss, rec.g_loss);
    }

    let zs = sample_latents(64, arch.latent_dim, &mut stream(99, "demo"));
    let masks = sample_masks(&mut generator, &zs)?;
    let mean_ratio = masks.iter().map(|m| m.ratio).sum::<f64>() / masks.len() as f64;
    println!("mean occlusion ratio of 64 generated masks: {mean_ratio:.3}");

    let tiles: Vec<_> = masks.iter().map(|m| m.as_field()).collect();
    let out = std::path::Path::new("generated_masks.png");
    tile_gallery(out, &tiles, 8)?;
    println!("wrote {}", out.display());
    Ok(())
}
