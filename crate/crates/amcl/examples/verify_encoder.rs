//! Fine-tune a classifier and score it with biometric verification
//! metrics: rank-1 accuracy, EER and the ROC curve.
//!
//! ```text
//! cargo run --release --example verify_encoder
//! ```

use amcl::contrastive::build_encoder;
use amcl::data::{generate_synthetic_dataset, SyntheticVeinConfig};
use amcl::evalkit::{evaluate, finetune, Classifier};
use amcl::rng::stream;

fn main() -> amcl::Result<()> {
    let split = generate_synthetic_dataset(&SyntheticVeinConfig {
        num_classes: 10,
        images_per_class_per_session: 4,
        seed: 21,
        ..Default::default()
    })?;

    let encoder = build_encoder("cnn-compact", &mut stream(21, "demo-init"))?;
    let mut classifier = Classifier::new(encoder, split.num_classes, 21);
    println!("fine-tuning on {} ...", split.summary());
    let trace = finetune(&mut classifier, &split, 25, 0.5, 21)?;
    println!("cross-entropy: first {:.3} -> last {:.3}", trace[0], trace.last().unwrap());

    let report = evaluate(&mut classifier, &split)?;
    println!("rank-1 accuracy: {:.2}%", report.accuracy * 100.0);
    println!("EER:             {:.2}%", report.eer * 100.0);
    println!(
        "score sets: {} genuine, {} impostor pairs",
        report.genuine_scores.len(),
        report.impostor_scores.len()
    );
    println!("ROC (FAR -> GAR):");
    let step = (report.roc_points.len() / 8).max(1);
    for (far, gar) in report.roc_points.iter().step_by(step) {
        println!("  {far:.3} -> {gar:.3}");
    }
    Ok(())
}
