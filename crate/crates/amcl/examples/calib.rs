//! Temporary calibration harness (not part of the deliverable examples).

use amcl::adversarial::{run_amcl, run_masked_simclr, run_simclr};
use amcl::contrastive::{build_encoder, ContrastiveConfig};
use amcl::data::{generate_synthetic_dataset, SyntheticVeinConfig};
use amcl::evalkit::{evaluate, finetune, Classifier};
use amcl::gan::{load_generator, save_gan_net, train_gan, GanArchitecture, GanTrainConfig};
use amcl::masking::{build_mask_corpus, MaskSamplerConfig};
use amcl::rng::stream;

fn envf(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn envu(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

fn main() {
    let alpha = envf("ALPHA", 0.01);
    let t1 = envu("T1", 2);
    let n = envu("N", 16);
    let tau = envf("TAU", 1.0);
    let ft_lr = envf("FT_LR", 0.5);
    let lambda = envf("LAMBDA", 0.5);
    let beta = envf("BETA", 0.1);
    let shift = envf("SHIFT", 0.35);
    let n_seeds = envu("SEEDS", 3);
    let epochs = envu("EPOCHS", 50);
    let ft_epochs = envu("FT_EPOCHS", 30);

    let split = generate_synthetic_dataset(&SyntheticVeinConfig {
        session_shift: shift,
        ..Default::default()
    })
    .unwrap();

    // GAN: train once and cache on disk.
    let gan_path = std::path::PathBuf::from(format!("/tmp/calib_gan_{shift}.ckpt"));
    let generator = if gan_path.exists() {
        load_generator(&gan_path).unwrap()
    } else {
        let corpus = build_mask_corpus(&MaskSamplerConfig {
            corpus_size: 4096,
            ..Default::default()
        })
        .unwrap();
        let arch = GanArchitecture::desk();
        let (mut g, _, _) = train_gan(
            &corpus,
            &arch,
            &GanTrainConfig {
                epochs: 4,
                batch_size: 64,
                seed: 42,
                ..Default::default()
            },
        )
        .unwrap();
        save_gan_net(&gan_path, "generator", &arch, &mut g).unwrap();
        g
    };

    let mut acc_amcl = vec![];
    let mut eer_amcl = vec![];
    let mut acc_scratch = vec![];
    let mut eer_scratch = vec![];
    let augmentation = amcl::contrastive::AugmentationPolicy {
        crop_scale_range: (envf("CROP_MIN", 0.8), envf("CROP_MAX", 1.0)),
        flip_prob: envf("FLIP", 0.5),
        jitter_strength: envf("JITTER", 0.5),
        blur_prob: envf("BLUR", 0.0),
        grayscale_prob: 0.0,
    };
    for seed in 42..42 + n_seeds as u64 {
        let cfg = ContrastiveConfig {
            encoder_arch: "cnn-compact".into(),
            batch_size: n,
            epochs,
            t1,
            t2: 1,
            alpha,
            beta,
            lambda_reg: lambda,
            temperature: tau,
            augmentation: augmentation.clone(),
            seed,
            ..Default::default()
        };
        let mode = std::env::var("PRETRAIN").unwrap_or_else(|_| "amcl".into());
        let enc = match mode.as_str() {
            "simclr" => run_simclr(&split, &cfg).unwrap().0,
            "masked" => run_masked_simclr(&split, &generator, &cfg).unwrap().0,
            _ => run_amcl(&split, &generator, &cfg).unwrap().0,
        };
        let mut clf = Classifier::new(enc, split.num_classes, seed);
        finetune(&mut clf, &split, ft_epochs, ft_lr, seed).unwrap();
        let rep = evaluate(&mut clf, &split).unwrap();
        println!("seed {seed} {mode}:    acc {:.4} eer {:.4}", rep.accuracy, rep.eer);
        acc_amcl.push(rep.accuracy);
        eer_amcl.push(rep.eer);

        let enc = build_encoder("cnn-compact", &mut stream(seed, "pretrain:encoder-init")).unwrap();
        let mut clf = Classifier::new(enc, split.num_classes, seed);
        finetune(&mut clf, &split, ft_epochs, ft_lr, seed).unwrap();
        let rep = evaluate(&mut clf, &split).unwrap();
        println!("seed {seed} scratch: acc {:.4} eer {:.4}", rep.accuracy, rep.eer);
        acc_scratch.push(rep.accuracy);
        eer_scratch.push(rep.eer);
    }
    println!(
        "MEDIANS  amcl acc {:.4} eer {:.4} | scratch acc {:.4} eer {:.4} | pass_acc={} pass_eer={}",
        median(acc_amcl.clone()),
        median(eer_amcl.clone()),
        median(acc_scratch.clone()),
        median(eer_scratch.clone()),
        median(acc_amcl) >= median(acc_scratch.clone()),
        median(eer_amcl) <= median(eer_scratch) + 0.01
    );
}
