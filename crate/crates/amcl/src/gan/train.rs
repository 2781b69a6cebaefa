//! Adversarial training of the mask GAN.
//!
//! The discriminator ascends `log D(m) + log(1 - D(G(z)))` over corpus masks
//! encoded to {-1, +1}; the generator uses the non-saturating surrogate and
//! descends `-log D(G(z))`. Reported losses are the summed real+fake binary
//! cross-entropy for D and the non-saturating cross-entropy for G, both in
//! natural log.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::Normal;
use rand::Rng;

use super::{Arr4, GanArchitecture, MaskDiscriminator, MaskGenerator};
use crate::error::{AmclError, Result};
use crate::masking::Mask;
use crate::nn::{Adam, Mode, Net};
use crate::rng::stream;

/// Probabilities are clamped into [EPS, 1-EPS] before taking logs.
const PROB_EPS: f64 = 1e-12;
/// Discriminator-loss floor; staying below it for 3 consecutive epochs
/// aborts training with a mode-collapse diagnostic.
const COLLAPSE_FLOOR: f64 = 1e-6;
const COLLAPSE_EPOCHS: usize = 3;

/// GAN training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Adam momentum decay pair (beta1, beta2).
    pub momentum_decay_pair: (f64, f64),
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        GanTrainConfig {
            epochs: 50,
            batch_size: 128,
            learning_rate: 2e-4,
            momentum_decay_pair: (0.5, 0.999),
            seed: 42,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(AmclError::InvalidConfig(
                "gan epochs and batch_size must be positive".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(AmclError::InvalidConfig("learning_rate must be positive".into()));
        }
        let (b1, b2) = self.momentum_decay_pair;
        if !(0.0 < b1 && b1 < 1.0 && 0.0 < b2 && b2 < 1.0) {
            return Err(AmclError::InvalidConfig(format!(
                "momentum decay pair ({b1}, {b2}) must lie in (0, 1)"
            )));
        }
        Ok(())
    }
}

/// Per-epoch loss record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanEpochLoss {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
}

/// Write the loss trace as `epoch,d_loss,g_loss`.
pub fn write_gan_loss_csv(path: &Path, trace: &[GanEpochLoss]) -> Result<()> {
    let mut out = String::from("epoch,d_loss,g_loss\n");
    for rec in trace {
        out.push_str(&format!("{},{},{}\n", rec.epoch, rec.d_loss, rec.g_loss));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| AmclError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| AmclError::io(path, e))?;
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// -mean log p and its gradient (for real samples of D and the
/// non-saturating G objective).
fn nll_of(p: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = p.len() as f64;
    let loss = -p.iter().map(|&v| clamp_prob(v).ln()).sum::<f64>() / n;
    let grad = p.mapv(|v| -1.0 / (n * clamp_prob(v)));
    (loss, grad)
}

/// -mean log(1 - p) and its gradient (for fake samples of D).
fn nll_of_complement(p: &Array1<f64>) -> (f64, Array1<f64>) {
    let n = p.len() as f64;
    let loss = -p.iter().map(|&v| (1.0 - clamp_prob(v)).ln()).sum::<f64>() / n;
    let grad = p.mapv(|v| 1.0 / (n * (1.0 - clamp_prob(v))));
    (loss, grad)
}

/// Straight-line evaluation of the minimax objective
/// `mean log D(x) + mean log(1 - D(G(z)))` on fixed weights. Loss oracles
/// and gradient checks call this; the training loop does not.
pub fn gan_objective(
    gen: &mut MaskGenerator,
    disc: &mut MaskDiscriminator,
    real: &Arr4,
    z: &Array2<f64>,
    mode: Mode,
) -> Result<f64> {
    let p_real = disc.forward(real.clone(), mode)?;
    let fake = gen.forward(z, mode)?;
    let p_fake = disc.forward(fake, mode)?;
    let real_term = p_real.iter().map(|&v| clamp_prob(v).ln()).sum::<f64>() / p_real.len() as f64;
    let fake_term = p_fake
        .iter()
        .map(|&v| (1.0 - clamp_prob(v)).ln())
        .sum::<f64>()
        / p_fake.len() as f64;
    Ok(real_term + fake_term)
}

/// Stack masks (encoded to {-1, +1}) into a (n, 1, 64, 64) batch.
pub fn mask_batch_pm1(masks: &[&Mask]) -> Arr4 {
    let side = crate::data::IMAGE_SIZE;
    let mut out = Arr4::zeros((masks.len(), 1, side, side));
    for (i, m) in masks.iter().enumerate() {
        let field = m.as_pm1_field();
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&field);
    }
    out
}

/// Train the GAN pair on a mask corpus.
///
/// Returns the trained generator and discriminator plus the per-epoch loss
/// trace. Aborts with [`AmclError::ModeCollapse`] when the discriminator
/// loss collapses, and with [`AmclError::NonFinite`] on numerical blow-up.
pub fn train_gan(
    corpus: &[Mask],
    arch: &GanArchitecture,
    cfg: &GanTrainConfig,
) -> Result<(MaskGenerator, MaskDiscriminator, Vec<GanEpochLoss>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(AmclError::InvalidConfig("mask corpus is empty".into()));
    }

    let mut init_rng = stream(cfg.seed, "gan:init");
    let mut gen = MaskGenerator::new(arch, &mut init_rng)?;
    let mut disc = MaskDiscriminator::new(arch, &mut init_rng)?;
    let (b1, b2) = cfg.momentum_decay_pair;
    let mut adam_g = Adam::new(cfg.learning_rate, b1, b2);
    let mut adam_d = Adam::new(cfg.learning_rate, b1, b2);
    let normal = Normal::new(0.0, 1.0).unwrap();

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut collapse_streak = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut shuffle_rng = stream(cfg.seed, &format!("gan:shuffle:{epoch}"));
        order.shuffle(&mut shuffle_rng);
        let mut z_rng = stream(cfg.seed, &format!("gan:z:{epoch}"));

        let mut d_sum = 0.0;
        let mut g_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let real_masks: Vec<&Mask> = chunk.iter().map(|&i| &corpus[i]).collect();
            let real = mask_batch_pm1(&real_masks);
            let b = chunk.len();
            let z = Array2::from_shape_fn((b, arch.latent_dim), |_| z_rng.sample(normal));

            // Discriminator step: ascend log D(real) + log(1 - D(G(z))).
            disc.zero_grads();
            let p_real = disc.forward(real, Mode::Train)?;
            let (loss_real, dp_real) = nll_of(&p_real);
            disc.backward(&dp_real);

            let fake = gen.forward(&z, Mode::Train)?;
            let p_fake = disc.forward(fake.clone(), Mode::Train)?;
            let (loss_fake, dp_fake) = nll_of_complement(&p_fake);
            disc.backward(&dp_fake);
            if !disc.grads_finite() {
                return Err(AmclError::NonFinite {
                    what: "gradient",
                    phase: "discriminator",
                    epoch,
                });
            }
            adam_d.step(&mut disc);

            // Generator step: descend -log D(G(z)) through the updated D.
            disc.zero_grads();
            gen.zero_grads();
            let p_fake2 = disc.forward(fake, Mode::Train)?;
            let (loss_gen, dp_gen) = nll_of(&p_fake2);
            let dfake = disc.backward(&dp_gen);
            gen.backward(&dfake);
            if !gen.grads_finite() {
                return Err(AmclError::NonFinite {
                    what: "gradient",
                    phase: "generator",
                    epoch,
                });
            }
            adam_g.step(&mut gen);
            disc.zero_grads();

            let d_loss = loss_real + loss_fake;
            if !d_loss.is_finite() || !loss_gen.is_finite() {
                return Err(AmclError::NonFinite {
                    what: "loss",
                    phase: "gan",
                    epoch,
                });
            }
            d_sum += d_loss;
            g_sum += loss_gen;
            batches += 1;
        }

        let rec = GanEpochLoss {
            epoch,
            d_loss: d_sum / batches as f64,
            g_loss: g_sum / batches as f64,
        };
        log::debug!(
            "gan epoch {}: d_loss {:.4} g_loss {:.4}",
            rec.epoch,
            rec.d_loss,
            rec.g_loss
        );
        trace.push(rec);

        if rec.d_loss < COLLAPSE_FLOOR {
            collapse_streak += 1;
            if collapse_streak >= COLLAPSE_EPOCHS {
                return Err(AmclError::ModeCollapse {
                    epoch,
                    d_loss: rec.d_loss,
                });
            }
        } else {
            collapse_streak = 0;
        }
    }
    Ok((gen, disc, trace))
}
