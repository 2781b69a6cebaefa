//! Compare pretraining modes (scratch / simclr / amcl) under identical
//! seeds and budgets, printing the recognition table.
//!
//! ```text
//! cargo run --release --example compare_modes
//! ```

use amcl::contrastive::ContrastiveConfig;
use amcl::data::{generate_synthetic_dataset, SyntheticVeinConfig};
use amcl::evalkit::{compare_pretraining, CompareConfig, Matcher, PretrainMode};
use amcl::gan::{train_gan, GanArchitecture, GanTrainConfig};
use amcl::masking::{build_mask_corpus, MaskSamplerConfig};

fn main() -> amcl::Result<()> {
    let split = generate_synthetic_dataset(&SyntheticVeinConfig {
        num_classes: 8,
        images_per_class_per_session: 4,
        seed: 33,
        ..Default::default()
    })?;

    println!("training mask GAN ...");
    let corpus = build_mask_corpus(&MaskSamplerConfig {
        corpus_size: 1024,
        seed: 33,
        ..Default::default()
    })?;
    let (generator, _, _) = train_gan(
        &corpus,
        &GanArchitecture::desk(),
        &GanTrainConfig { epochs: 2, batch_size: 64, seed: 33, ..Default::default() },
    )?;

    let cfg = CompareConfig {
        modes: vec![PretrainMode::Scratch, PretrainMode::Simclr, PretrainMode::Amcl],
        contrastive: ContrastiveConfig {
            encoder_arch: "cnn-tiny".into(),
            batch_size: 8,
            epochs: 15,
            t1: 2,
            seed: 33,
            ..Default::default()
        },
        finetune_epochs: 20,
        finetune_lr: 0.5,
        matcher: Matcher::EmbeddingCosine,
    };
    println!("comparing {} modes under identical budgets ...", cfg.modes.len());
    let rows = compare_pretraining(&split, Some(&generator), &cfg)?;

    println!("\nmode     ACC      EER");
    for row in &rows {
        println!(
            "{:<8} {:>6.2}%  {:>5.2}%",
            row.mode.as_str(),
            row.accuracy * 100.0,
            row.eer * 100.0
        );
    }
    Ok(())
}
