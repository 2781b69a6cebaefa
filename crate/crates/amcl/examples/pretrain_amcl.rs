//! A small adversarial pretraining run: watch the encoder descend the
//! contrastive loss while the latent ascent keeps the masked views hard.
//!
//! ```text
//! cargo run --release --example pretrain_amcl
//! ```

use amcl::adversarial::{run_amcl, Phase};
use amcl::contrastive::ContrastiveConfig;
use amcl::data::{generate_synthetic_dataset, SyntheticVeinConfig};
use amcl::gan::{train_gan, GanArchitecture, GanTrainConfig};
use amcl::masking::{build_mask_corpus, MaskSamplerConfig};

fn main() -> amcl::Result<()> {
    let split = generate_synthetic_dataset(&SyntheticVeinConfig {
        num_classes: 6,
        images_per_class_per_session: 3,
        seed: 5,
        ..Default::default()
    })?;

    let corpus = build_mask_corpus(&MaskSamplerConfig {
        corpus_size: 1024,
        seed: 5,
        ..Default::default()
    })?;
    let arch = GanArchitecture::desk();
    println!("training mask GAN ...");
    let (generator, _, _) = train_gan(
        &corpus,
        &arch,
        &GanTrainConfig { epochs: 2, batch_size: 64, seed: 5, ..Default::default() },
    )?;

    let cfg = ContrastiveConfig {
        encoder_arch: "cnn-tiny".into(),
        batch_size: 8,
        epochs: 12,
        t1: 2,
        t2: 1,
        seed: 5,
        ..Default::default()
    };
    println!("adversarial pretraining ({} epochs) ...", cfg.epochs);
    let (_encoder, state) = run_amcl(&split, &generator, &cfg)?;

    println!("epoch  phase    step  loss      regularizer");
    for rec in &state.history {
        println!(
            "{:>5}  {:<7}  {:>4}  {:<8.4}  {:.4}",
            rec.epoch,
            rec.phase.as_str(),
            rec.step,
            rec.loss,
            rec.regularizer
        );
    }
    let enc_losses: Vec<f64> = state
        .history
        .iter()
        .filter(|r| r.phase == Phase::Encoder)
        .map(|r| r.loss)
        .collect();
    println!(
        "encoder loss: first {:.4} -> last {:.4}",
        enc_losses.first().unwrap(),
        enc_losses.last().unwrap()
    );
    Ok(())
}
