//! Contrastive objectives.
//!
//! The implemented loss is, per anchor i,
//!
//! ```text
//! l_i = -log [ exp(S(a_i, b_i)/τ) / Σ_{j≠i} exp(S(a_i, b_j)/τ) ]
//! ```
//!
//! with S the cosine similarity, averaged over the batch. Note the
//! denominator runs over cross-image pairs only — the positive term is
//! *excluded*, which permits negative loss values; the canonical form (with
//! the positive included) is behind
//! [`ContrastiveConfig::include_positive_in_denominator`].

use std::sync::atomic::{AtomicBool, Ordering};

use ndarray::{Array1, Array2, ArrayView1};

use super::{images_to_batch, ContrastiveConfig, Encoder, ViewBatch};
use crate::error::{AmclError, Result};
use crate::gan::{latent_batch, LatentVariable, MaskGenerator};
use crate::masking::apply_mask;
use crate::nn::Mode;

static ZERO_VECTOR_WARNED: AtomicBool = AtomicBool::new(false);

fn warn_zero_vector() {
    if !ZERO_VECTOR_WARNED.swap(true, Ordering::Relaxed) {
        log::warn!("cosine similarity of a zero vector defined as 0");
    }
}

/// Cosine similarity, with the zero-vector case defined as 0.
pub fn cosine_similarity(u: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
    let nu = u.dot(&u).sqrt();
    let nv = v.dot(&v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        warn_zero_vector();
        return 0.0;
    }
    u.dot(&v) / (nu * nv)
}

/// Similarity matrix S[i][j] = cos(a_i, b_j) plus row/column norms.
fn cosine_matrix(a: &Array2<f64>, b: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = a.dim().0;
    let na = Array1::from_shape_fn(n, |i| a.row(i).dot(&a.row(i)).sqrt());
    let nb = Array1::from_shape_fn(n, |j| b.row(j).dot(&b.row(j)).sqrt());
    let mut s = a.dot(&b.t());
    for i in 0..n {
        for j in 0..n {
            let d = na[i] * nb[j];
            if d == 0.0 {
                warn_zero_vector();
                s[[i, j]] = 0.0;
            } else {
                s[[i, j]] /= d;
            }
        }
    }
    (s, na, nb)
}

/// Loss value and gradients with respect to both embedding matrices.
///
/// Returns `(loss, dA, dB)` where the loss is the batch mean.
pub fn nt_xent_value_grad(
    a: &Array2<f64>,
    b: &Array2<f64>,
    temperature: f64,
    include_positive: bool,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let (n, d) = a.dim();
    if b.dim() != (n, d) {
        return Err(AmclError::ShapeMismatch(format!(
            "embedding batches disagree: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    if n < 2 {
        return Err(AmclError::InvalidConfig(
            "contrastive loss needs a batch of at least 2".into(),
        ));
    }
    let tau = temperature;
    let (s, na, nb) = cosine_matrix(a, b);

    // Per-anchor log-sum-exp over the denominator set.
    let mut loss = 0.0;
    // dl/dS, assembled per anchor then averaged.
    let mut ds = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let denom_js: Vec<usize> = (0..n)
            .filter(|&j| include_positive || j != i)
            .collect();
        let m = denom_js
            .iter()
            .map(|&j| s[[i, j]])
            .fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = denom_js.iter().map(|&j| ((s[[i, j]] - m) / tau).exp()).sum();
        let lse = m / tau + sum_exp.ln();
        loss += -s[[i, i]] / tau + lse;

        ds[[i, i]] += -1.0 / tau;
        for &j in &denom_js {
            let p = ((s[[i, j]] - m) / tau).exp() / sum_exp;
            ds[[i, j]] += p / tau;
        }
    }
    loss /= n as f64;
    ds.mapv_inplace(|v| v / n as f64);

    // Chain through the cosine: for u = a_i, v = b_j,
    //   d cos / du = v/(|u||v|) - cos * u/|u|^2.
    let mut da = Array2::<f64>::zeros((n, d));
    let mut db = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        for j in 0..n {
            let g = ds[[i, j]];
            if g == 0.0 || na[i] == 0.0 || nb[j] == 0.0 {
                continue;
            }
            let cos = s[[i, j]];
            let inv = 1.0 / (na[i] * nb[j]);
            for k in 0..d {
                da[[i, k]] += g * (b[[j, k]] * inv - cos * a[[i, k]] / (na[i] * na[i]));
                db[[j, k]] += g * (a[[i, k]] * inv - cos * b[[j, k]] / (nb[j] * nb[j]));
            }
        }
    }
    Ok((loss, da, db))
}

fn anchor_and_b_embeddings(
    views: &ViewBatch,
    encoder: &mut Encoder,
    cfg: &ContrastiveConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    views.validate()?;
    let anchors = views.anchors();
    let a_refs: Vec<&crate::data::Image> = anchors.iter().collect();
    let b_refs: Vec<&crate::data::Image> = views.view_b.iter().collect();
    let mut a_emb = encoder.forward_batch(images_to_batch(&a_refs), Mode::Eval)?;
    let mut b_emb = encoder.forward_batch(images_to_batch(&b_refs), Mode::Eval)?;
    if cfg.projection_head {
        if let Some(proj) = &mut encoder.projection {
            a_emb = proj.forward(a_emb);
            b_emb = proj.forward(b_emb);
        } else {
            return Err(AmclError::InvalidConfig(
                "projection_head enabled but encoder has no projection head".into(),
            ));
        }
    }
    Ok((a_emb, b_emb))
}

/// The contrastive loss of a view batch under the given encoder
/// (evaluation-mode embeddings; pure in its inputs).
///
/// Anchors are the masked views when present, plain view A otherwise.
pub fn simclr_loss(
    views: &ViewBatch,
    encoder: &mut Encoder,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    if views.len() < 2 {
        return Err(AmclError::InvalidConfig(
            "contrastive loss needs at least 2 images in the batch".into(),
        ));
    }
    let (a_emb, b_emb) = anchor_and_b_embeddings(views, encoder, cfg)?;
    let (loss, _, _) = nt_xent_value_grad(
        &a_emb,
        &b_emb,
        cfg.temperature,
        cfg.include_positive_in_denominator,
    )?;
    Ok(loss)
}

/// The masked variant: identical formula with anchors `E(view_a ⊙ M)` where
/// `M = binarize(G*(z))`.
///
/// The masked views must have been constructed from exactly these latents;
/// this is re-checked by re-rendering the masks through the frozen
/// generator.
pub fn masked_simclr_loss(
    views: &ViewBatch,
    zs: &[LatentVariable],
    encoder: &mut Encoder,
    g_star: &mut MaskGenerator,
    cfg: &ContrastiveConfig,
) -> Result<f64> {
    let masked = views.view_a_masked.as_ref().ok_or_else(|| {
        AmclError::InvalidConfig("masked contrastive loss needs masked views".into())
    })?;
    if zs.len() != views.len() {
        return Err(AmclError::ShapeMismatch(format!(
            "{} latents for {} anchors",
            zs.len(),
            views.len()
        )));
    }
    // Verify the construction precondition: view_a ⊙ binarize(G*(z)).
    let z = latent_batch(zs)?;
    let field = g_star.forward(&z, Mode::Eval)?;
    let masks = crate::gan::binarize_field(&field)?;
    for (i, (img, m)) in views.view_a.iter().zip(&masks).enumerate() {
        let expect = apply_mask(img, m)?;
        if expect.pixels != masked[i].pixels {
            return Err(AmclError::InvalidConfig(format!(
                "masked view {i} was not built from view_a and G*(z_{i})"
            )));
        }
    }
    simclr_loss(views, encoder, cfg)
}
