//! The adversarial pretraining core: alternate encoder descent on the
//! masked contrastive loss with gradient *ascent* on the generator latents
//! that produce the masks.
//!
//! Per epoch the loop draws one batch of N images, builds two augmented
//! views each, renders masks from the current latent set through the frozen
//! generator, then runs `t1` encoder steps followed by `t2` latent steps.
//! The encoder update is vanilla SGD on the contrastive term only (the
//! image-space cosine regularizer carries no encoder dependence); the
//! latent update ascends contrastive-plus-regularizer, with gradients
//! crossing the binarization through the straight-through rule.
//!
//! Everything here is deterministic under the config seed: batches,
//! augmentations, assignments and initializations each draw from their own
//! named stream, so the run with `lambda_reg = 0, beta = 0` is bit-identical
//! to the plain masked-SimCLR reference loop ([`run_masked_simclr`]).

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;

use crate::contrastive::{
    augment_views, build_encoder, pixels_to_batch, ContrastiveConfig, Encoder, MaskTransform,
    ViewBatch,
};
use crate::contrastive::loss::nt_xent_value_grad;
use crate::data::DatasetSplit;
use crate::error::{AmclError, Result};
use crate::gan::{latent_batch, sample_latents, LatentVariable, MaskGenerator};
use crate::nn::ckpt::{checkpoint_net, restore_net, Checkpoint};
use crate::nn::{Mode, Net, Sgd};
use crate::rng::stream;

pub type Arr4 = ndarray::Array4<f64>;

/// Latent vectors are rescaled to at most `LATENT_NORM_FACTOR * sqrt(dim)`
/// after each ascent step, keeping them inside the generator's trained
/// input envelope.
const LATENT_NORM_FACTOR: f64 = 3.0;

/// Optimization phase of a loss-history record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Encoder,
    Latent,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Encoder => "encoder",
            Phase::Latent => "latent",
        }
    }
}

/// One optimization step in the loss history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub step: usize,
    pub loss: f64,
    pub regularizer: f64,
}

/// Write history as `epoch,phase,step,loss,regularizer`.
pub fn write_history_csv(path: &Path, history: &[HistoryRecord]) -> Result<()> {
    let mut out = String::from("epoch,phase,step,loss,regularizer\n");
    for rec in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.epoch,
            rec.phase.as_str(),
            rec.step,
            rec.loss,
            rec.regularizer
        ));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| AmclError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| AmclError::io(path, e))?;
    Ok(())
}

/// The adversarially optimized collection of generator latents.
#[derive(Debug, Clone)]
pub struct LatentSet {
    pub members: Vec<LatentVariable>,
    /// Maps batch index → member index; total over the current batch.
    pub assignment: Vec<usize>,
}

impl LatentSet {
    pub fn new(members: Vec<LatentVariable>) -> Self {
        LatentSet {
            members,
            assignment: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// The latent batch for the current assignment.
    pub fn assigned_batch(&self) -> Result<Array2<f64>> {
        let zs: Vec<LatentVariable> = self
            .assignment
            .iter()
            .map(|&k| self.members[k].clone())
            .collect();
        latent_batch(&zs)
    }

    pub fn all_finite(&self) -> bool {
        self.members
            .iter()
            .all(|z| z.vector.iter().all(|v| v.is_finite()))
    }
}

/// A prepared step batch at the tensor level: augmented view A (unmasked)
/// and view B, stacked (N, 1, h, w).
#[derive(Debug, Clone)]
pub struct StepBatch {
    pub view_a: Arr4,
    pub view_b: Arr4,
}

impl StepBatch {
    pub fn from_views(views: &ViewBatch) -> Result<Self> {
        views.validate()?;
        if views.len() < 2 {
            return Err(AmclError::InvalidConfig(
                "adversarial steps need a batch of at least 2".into(),
            ));
        }
        let a: Vec<&ndarray::Array2<f64>> = views.view_a.iter().map(|i| &i.pixels).collect();
        let b: Vec<&ndarray::Array2<f64>> = views.view_b.iter().map(|i| &i.pixels).collect();
        Ok(StepBatch {
            view_a: pixels_to_batch(&a),
            view_b: pixels_to_batch(&b),
        })
    }

    pub fn len(&self) -> usize {
        self.view_a.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Objective value split into its two terms; `total = contrastive +
/// lambda * regularizer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub contrastive: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// Diagnostics of one latent ascent step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentStepInfo {
    pub loss: f64,
    pub regularizer: f64,
    /// Squared norm of the full latent-set gradient.
    pub grad_norm_sq: f64,
}

/// Full state of the adversarial loop. The generator stays frozen: its
/// parameters and batch-norm statistics are never written after
/// construction.
#[derive(Debug, Clone)]
pub struct AdversarialState {
    pub encoder: Encoder,
    pub latent_set: LatentSet,
    pub generator: MaskGenerator,
    pub config: ContrastiveConfig,
    pub epoch: usize,
    pub history: Vec<HistoryRecord>,
}

impl AdversarialState {
    pub fn new(
        encoder: Encoder,
        generator: MaskGenerator,
        latent_set: LatentSet,
        config: ContrastiveConfig,
    ) -> Result<Self> {
        config.validate()?;
        for (k, z) in latent_set.members.iter().enumerate() {
            if z.dim() != generator.arch.latent_dim {
                return Err(AmclError::ShapeMismatch(format!(
                    "latent member {k} has dim {}, generator expects {}",
                    z.dim(),
                    generator.arch.latent_dim
                )));
            }
        }
        Ok(AdversarialState {
            encoder,
            generator,
            latent_set,
            config,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Render the multiplicative mask fields for the current assignment.
    /// Hard: 0/1 threshold of the tanh output; Soft: (tanh + 1) / 2.
    fn mask_fields(&mut self, n: usize) -> Result<Arr4> {
        if self.latent_set.assignment.len() != n {
            return Err(AmclError::InvalidConfig(format!(
                "latent assignment covers {} anchors, batch has {n}",
                self.latent_set.assignment.len()
            )));
        }
        let z = self.latent_set.assigned_batch()?;
        let field = self.generator.forward(&z, Mode::Eval)?;
        Ok(match self.config.mask_transform {
            MaskTransform::Hard => field.mapv(|v| f64::from(v > 0.0)),
            MaskTransform::Soft => field.mapv(|v| (v + 1.0) / 2.0),
        })
    }

    /// Mean image-space cosine between view A and its masked version, plus
    /// (optionally) its gradient with respect to the mask field.
    fn regularizer(
        view_a: &Arr4,
        masks: &Arr4,
        want_grad: bool,
    ) -> (f64, Option<Arr4>) {
        let n = view_a.dim().0;
        let mut total = 0.0;
        let mut grad = want_grad.then(|| Arr4::zeros(view_a.raw_dim()));
        for i in 0..n {
            let u = view_a.index_axis(Axis(0), i);
            let u = u.to_shape(u.len()).unwrap();
            let m = masks.index_axis(Axis(0), i);
            let m = m.to_shape(m.len()).unwrap();
            let v = Array1::from_shape_fn(u.len(), |k| u[k] * m[k]);
            let nu = u.dot(&u).sqrt();
            let nv = v.dot(&v).sqrt();
            if nu == 0.0 || nv == 0.0 {
                continue; // cosine defined as 0; gradient 0
            }
            let cos = u.dot(&v) / (nu * nv);
            total += cos;
            if let Some(g) = grad.as_mut() {
                // d cos/d v = u/(|u||v|) - cos v/|v|^2; d v/d m = u.
                let mut gi = g.index_axis_mut(Axis(0), i);
                let gi = gi.view_mut().into_shape_with_order(u.len()).unwrap();
                let inv = 1.0 / (nu * nv);
                ndarray::Zip::indexed(gi).for_each(|k, dst| {
                    let dcos_dv = u[k] * inv - cos * v[k] / (nv * nv);
                    *dst = dcos_dv * u[k] / n as f64;
                });
            }
        }
        (total / n as f64, grad)
    }

    /// Embed [masked anchors; view B] as one batch, compute the contrastive
    /// loss and its embedding gradients.
    fn loss_forward(
        &mut self,
        anchors: Arr4,
        view_b: Arr4,
        mode: Mode,
    ) -> Result<(f64, Array2<f64>, Array2<f64>)> {
        let n = anchors.dim().0;
        let full = ndarray::concatenate(Axis(0), &[anchors.view(), view_b.view()])
            .expect("anchor and view batches share shapes");
        let mut emb = self.encoder.forward_batch(full, mode)?;
        if self.config.projection_head {
            let proj = self.encoder.projection.as_mut().ok_or_else(|| {
                AmclError::InvalidConfig("projection_head enabled but head missing".into())
            })?;
            emb = proj.forward(emb);
        }
        let a_emb = emb.slice(s![..n, ..]).to_owned();
        let b_emb = emb.slice(s![n.., ..]).to_owned();
        let (loss, da, db) = nt_xent_value_grad(
            &a_emb,
            &b_emb,
            self.config.temperature,
            self.config.include_positive_in_denominator,
        )?;
        Ok((loss, da, db))
    }

    /// Backpropagate embedding gradients to the encoder *input* batch.
    fn loss_backward_to_inputs(&mut self, da: &Array2<f64>, db: &Array2<f64>) -> Result<Arr4> {
        let demb = ndarray::concatenate(Axis(0), &[da.view(), db.view()])
            .expect("gradient halves share shapes");
        let demb = if self.config.projection_head {
            let proj = self.encoder.projection.as_mut().ok_or_else(|| {
                AmclError::InvalidConfig("projection_head enabled but head missing".into())
            })?;
            proj.backward(&demb)
        } else {
            demb
        };
        Ok(self.encoder.backward_batch(&demb))
    }

    /// Evaluate the full objective (contrastive + λ·cosine) at the current
    /// state without mutating anything. Batch-statistics mode, matching the
    /// surface the optimization steps see.
    pub fn objective(&mut self, batch: &StepBatch) -> Result<Objective> {
        let n = batch.len();
        let masks = self.mask_fields(n)?;
        let anchors = &batch.view_a * &masks;
        let (loss, _, _) = self.loss_forward(anchors, batch.view_b.clone(), Mode::Frozen)?;
        let (reg, _) = Self::regularizer(&batch.view_a, &masks, false);
        Ok(Objective {
            contrastive: loss,
            regularizer: reg,
            total: loss + self.config.lambda_reg * reg,
        })
    }

    /// One vanilla-SGD encoder step on the contrastive term. Returns the
    /// loss and the (reporting-only) regularizer value.
    ///
    /// The cosine regularizer does not depend on the encoder weights, so it
    /// is omitted from this gradient; its value is still recorded.
    pub fn encoder_step(&mut self, batch: &StepBatch) -> Result<(f64, f64)> {
        let n = batch.len();
        let masks = self.mask_fields(n)?;
        let anchors = &batch.view_a * &masks;
        let (reg, _) = Self::regularizer(&batch.view_a, &masks, false);

        let (loss, da, db) = self.loss_forward(anchors, batch.view_b.clone(), Mode::Train)?;
        if !loss.is_finite() {
            return Err(AmclError::NonFinite {
                what: "loss",
                phase: "encoder",
                epoch: self.epoch,
            });
        }
        self.loss_backward_to_inputs(&da, &db)?;
        if !self.encoder.grads_finite() {
            return Err(AmclError::NonFinite {
                what: "gradient",
                phase: "encoder",
                epoch: self.epoch,
            });
        }
        Sgd::new(self.config.alpha).step(&mut self.encoder);
        self.encoder.zero_grads();
        Ok((loss, reg))
    }

    /// One gradient-ascent step on the latent set; the encoder is left
    /// untouched (frozen batch-statistics pass, no parameter or
    /// running-statistics writes).
    pub fn latent_step(&mut self, batch: &StepBatch) -> Result<LatentStepInfo> {
        let n = batch.len();
        let masks = self.mask_fields(n)?;
        let anchors = &batch.view_a * &masks;
        let (reg, reg_grad) = Self::regularizer(&batch.view_a, &masks, true);

        let (loss, da, db) = self.loss_forward(anchors, batch.view_b.clone(), Mode::Frozen)?;
        if !loss.is_finite() {
            return Err(AmclError::NonFinite {
                what: "loss",
                phase: "latent",
                epoch: self.epoch,
            });
        }
        let dinputs = self.loss_backward_to_inputs(&da, &db)?;
        self.encoder.zero_grads();

        // d objective / d mask  =  d loss/d anchor ⊙ view_a  +  λ d reg/d mask.
        let danchor = dinputs.slice(s![..n, .., .., ..]);
        let mut dmask = &danchor * &batch.view_a;
        if let Some(rg) = reg_grad {
            dmask.scaled_add(self.config.lambda_reg, &rg);
        }
        // Through the mask transform: straight-through treats the hard
        // threshold as identity on the tanh output; the soft relaxation has
        // slope 1/2.
        let dfield = match self.config.mask_transform {
            MaskTransform::Hard => dmask,
            MaskTransform::Soft => dmask * 0.5,
        };

        // Re-run the generator so its caches correspond to this batch, then
        // pull gradients back to the latents.
        let z = self.latent_set.assigned_batch()?;
        let _ = self.generator.forward(&z, Mode::Eval)?;
        let dz = self.generator.backward(&dfield);
        self.generator.zero_grads();
        if !dz.iter().all(|v| v.is_finite()) {
            return Err(AmclError::NonFinite {
                what: "gradient",
                phase: "latent",
                epoch: self.epoch,
            });
        }

        // Accumulate per member (a member may serve several anchors in
        // fixed-pool mode), ascend, and clamp back into the prior envelope.
        let dim = self.generator.arch.latent_dim;
        let mut member_grads = vec![Array1::<f64>::zeros(dim); self.latent_set.len()];
        for (i, &k) in self.latent_set.assignment.iter().enumerate() {
            member_grads[k] += &dz.row(i);
        }
        let grad_norm_sq: f64 = member_grads.iter().map(|g| g.dot(g)).sum();
        let bound = LATENT_NORM_FACTOR * (dim as f64).sqrt();
        for (k, g) in member_grads.iter().enumerate() {
            let z = &mut self.latent_set.members[k].vector;
            z.scaled_add(self.config.beta, g);
            let norm = z.dot(&*z).sqrt();
            if norm > bound {
                *z *= bound / norm;
            }
        }
        Ok(LatentStepInfo {
            loss,
            regularizer: reg,
            grad_norm_sq,
        })
    }
}

/// Evaluate the adversarial objective of a view batch against a state
/// (masked anchors are re-rendered from the current latent assignment).
/// Returns (contrastive loss, regularizer).
pub fn amcl_objective(views: &ViewBatch, state: &mut AdversarialState) -> Result<(f64, f64)> {
    let batch = StepBatch::from_views(views)?;
    let obj = state.objective(&batch)?;
    Ok((obj.contrastive, obj.regularizer))
}

fn draw_epoch_images(split: &DatasetSplit, n: usize, seed: u64, epoch: usize) -> Vec<crate::data::Image> {
    let mut rng = stream(seed, &format!("pretrain:batch:{epoch}"));
    let len = split.train.len();
    if n <= len {
        rand::seq::index::sample(&mut rng, len, n)
            .iter()
            .map(|i| split.train[i].clone())
            .collect()
    } else {
        use rand::Rng;
        (0..n)
            .map(|_| split.train[rng.random_range(0..len)].clone())
            .collect()
    }
}

fn draw_assignment(
    k: usize,
    n: usize,
    fixed_pool: bool,
    seed: u64,
    epoch: usize,
) -> Vec<usize> {
    if fixed_pool {
        // Round-robin with a rotating offset: deterministic, no stream.
        (0..n).map(|i| (epoch * n + i) % k).collect()
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = stream(seed, &format!("pretrain:assign:{epoch}"));
        order.shuffle(&mut rng);
        order
    }
}

fn epoch_views(
    split: &DatasetSplit,
    config: &ContrastiveConfig,
    epoch: usize,
) -> Result<ViewBatch> {
    let imgs = draw_epoch_images(split, config.batch_size, config.seed, epoch);
    let mut aug_rng = stream(config.seed, &format!("pretrain:aug:{epoch}"));
    augment_views(&imgs, &config.augmentation, &mut aug_rng)
}

fn init_encoder(config: &ContrastiveConfig) -> Result<Encoder> {
    let mut rng = stream(config.seed, "pretrain:encoder-init");
    let enc = build_encoder(&config.encoder_arch, &mut rng)?;
    Ok(if config.projection_head {
        enc.with_projection_head(&mut rng)
    } else {
        enc
    })
}

/// Adversarial masked contrastive pretraining (the full alternation).
pub fn run_amcl(
    split: &DatasetSplit,
    generator: &MaskGenerator,
    config: &ContrastiveConfig,
) -> Result<(Encoder, AdversarialState)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(AmclError::Dataset("cannot pretrain on an empty split".into()));
    }
    let encoder = init_encoder(config)?;
    let k = config.latent_set_size.unwrap_or(config.batch_size);
    let fixed_pool = config.latent_set_size.is_some();
    let mut latents_rng = stream(config.seed, "pretrain:latents");
    let members = sample_latents(k, generator.arch.latent_dim, &mut latents_rng);
    let mut state = AdversarialState::new(
        encoder,
        generator.clone(),
        LatentSet::new(members),
        config.clone(),
    )?;

    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        let views = epoch_views(split, config, epoch)?;
        state.latent_set.assignment =
            draw_assignment(k, config.batch_size, fixed_pool, config.seed, epoch);
        let batch = StepBatch::from_views(&views)?;
        for step in 1..=config.t1 {
            let (loss, reg) = state.encoder_step(&batch)?;
            state.history.push(HistoryRecord {
                epoch,
                phase: Phase::Encoder,
                step,
                loss,
                regularizer: reg,
            });
        }
        for step in 1..=config.t2 {
            let info = state.latent_step(&batch)?;
            state.history.push(HistoryRecord {
                epoch,
                phase: Phase::Latent,
                step,
                loss: info.loss,
                regularizer: info.regularizer,
            });
        }
        if !state.latent_set.all_finite() {
            return Err(AmclError::NonFinite {
                what: "latent set",
                phase: "latent",
                epoch,
            });
        }
    }
    Ok((state.encoder.clone(), state))
}

/// Plain masked-SimCLR reference: identical streams and encoder updates,
/// masks rendered from a fixed latent set, no latent optimization at all.
pub fn run_masked_simclr(
    split: &DatasetSplit,
    generator: &MaskGenerator,
    config: &ContrastiveConfig,
) -> Result<(Encoder, Vec<HistoryRecord>)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(AmclError::Dataset("cannot pretrain on an empty split".into()));
    }
    let encoder = init_encoder(config)?;
    let k = config.latent_set_size.unwrap_or(config.batch_size);
    let fixed_pool = config.latent_set_size.is_some();
    let mut latents_rng = stream(config.seed, "pretrain:latents");
    let members = sample_latents(k, generator.arch.latent_dim, &mut latents_rng);
    let mut state = AdversarialState::new(
        encoder,
        generator.clone(),
        LatentSet::new(members),
        config.clone(),
    )?;

    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        state.epoch = epoch;
        let views = epoch_views(split, config, epoch)?;
        state.latent_set.assignment =
            draw_assignment(k, config.batch_size, fixed_pool, config.seed, epoch);
        let batch = StepBatch::from_views(&views)?;
        for step in 1..=config.t1 {
            let (loss, reg) = state.encoder_step(&batch)?;
            history.push(HistoryRecord {
                epoch,
                phase: Phase::Encoder,
                step,
                loss,
                regularizer: reg,
            });
        }
    }
    Ok((state.encoder, history))
}

/// Plain SimCLR pretraining: no generator, no masks, anchors are view A.
pub fn run_simclr(
    split: &DatasetSplit,
    config: &ContrastiveConfig,
) -> Result<(Encoder, Vec<HistoryRecord>)> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(AmclError::Dataset("cannot pretrain on an empty split".into()));
    }
    let mut encoder = init_encoder(config)?;
    let mut history = Vec::new();
    for epoch in 1..=config.epochs {
        let views = epoch_views(split, config, epoch)?;
        let batch = StepBatch::from_views(&views)?;
        for step in 1..=config.t1 {
            let n = batch.len();
            let full =
                ndarray::concatenate(Axis(0), &[batch.view_a.view(), batch.view_b.view()])
                    .expect("view batches share shapes");
            let mut emb = encoder.forward_batch(full, Mode::Train)?;
            if config.projection_head {
                let proj = encoder.projection.as_mut().ok_or_else(|| {
                    AmclError::InvalidConfig("projection_head enabled but head missing".into())
                })?;
                emb = proj.forward(emb);
            }
            let a_emb = emb.slice(s![..n, ..]).to_owned();
            let b_emb = emb.slice(s![n.., ..]).to_owned();
            let (loss, da, db) = nt_xent_value_grad(
                &a_emb,
                &b_emb,
                config.temperature,
                config.include_positive_in_denominator,
            )?;
            if !loss.is_finite() {
                return Err(AmclError::NonFinite {
                    what: "loss",
                    phase: "encoder",
                    epoch,
                });
            }
            let demb = ndarray::concatenate(Axis(0), &[da.view(), db.view()]).unwrap();
            let demb = if config.projection_head {
                encoder.projection.as_mut().unwrap().backward(&demb)
            } else {
                demb
            };
            encoder.backward_batch(&demb);
            if !encoder.grads_finite() {
                return Err(AmclError::NonFinite {
                    what: "gradient",
                    phase: "encoder",
                    epoch,
                });
            }
            Sgd::new(config.alpha).step(&mut encoder);
            encoder.zero_grads();
            history.push(HistoryRecord {
                epoch,
                phase: Phase::Encoder,
                step,
                loss,
                regularizer: 0.0,
            });
        }
    }
    Ok((encoder, history))
}

/// Save the combined checkpoint: encoder weights, latent set, config hash.
pub fn save_amcl_state(path: &Path, state: &mut AdversarialState, config_hash: &str) -> Result<()> {
    let meta = serde_json::json!({
        "architecture_id": state.encoder.architecture_id,
        "latent_dim": state.generator.arch.latent_dim,
        "latent_count": state.latent_set.len(),
        "config_hash": config_hash,
    });
    let mut ckpt = checkpoint_net("amcl-state", meta, &mut state.encoder);
    for (k, z) in state.latent_set.members.iter().enumerate() {
        ckpt.push(format!("latents.{k}"), z.vector.clone().into_dyn());
    }
    ckpt.save(path)
}

/// Restore the combined checkpoint; returns encoder, latent set and the
/// stored config hash.
pub fn load_amcl_state(path: &Path) -> Result<(Encoder, LatentSet, String)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "amcl-state" {
        return Err(AmclError::Checkpoint(format!(
            "expected an amcl-state checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let arch = ckpt.meta_str("architecture_id")?.to_string();
    let count = ckpt
        .meta
        .get("latent_count")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| AmclError::Checkpoint("missing latent_count".into()))? as usize;
    let hash = ckpt.meta_str("config_hash")?.to_string();

    let mut members = Vec::with_capacity(count);
    let mut encoder_ckpt = Checkpoint::new(ckpt.kind.clone(), ckpt.meta.clone());
    for (name, tensor) in &ckpt.tensors {
        if let Some(idx) = name.strip_prefix("latents.") {
            let k: usize = idx
                .parse()
                .map_err(|_| AmclError::Checkpoint(format!("bad latent tensor name {name:?}")))?;
            let v = tensor
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .map_err(|_| AmclError::Checkpoint(format!("latent {k} is not a vector")))?;
            members.push((k, LatentVariable::new(v)));
        } else {
            encoder_ckpt.push(name.clone(), tensor.clone());
        }
    }
    if members.len() != count {
        return Err(AmclError::Checkpoint(format!(
            "expected {count} latents, found {}",
            members.len()
        )));
    }
    members.sort_by_key(|(k, _)| *k);

    let mut rng = stream(0, "amcl-state:load");
    let mut encoder = build_encoder(&arch, &mut rng)?;
    restore_net(&encoder_ckpt, &mut encoder)?;
    Ok((
        encoder,
        LatentSet::new(members.into_iter().map(|(_, z)| z).collect()),
        hash,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::loss::{masked_simclr_loss, simclr_loss};
    use crate::contrastive::AugmentationPolicy;
    use crate::data::{generate_synthetic_dataset, Image, SyntheticVeinConfig, IMAGE_SIZE};
    use crate::gan::{binarize_field, GanArchitecture};
    use crate::nn::snapshot_state;
    use ndarray::Array2;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_split(seed: u64) -> DatasetSplit {
        generate_synthetic_dataset(&SyntheticVeinConfig {
            num_classes: 4,
            images_per_class_per_session: 2,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_config(seed: u64) -> ContrastiveConfig {
        ContrastiveConfig {
            batch_size: 4,
            encoder_arch: "cnn-tiny".into(),
            epochs: 3,
            alpha: 1e-2,
            beta: 1e-1,
            lambda_reg: 0.5,
            seed,
            ..Default::default()
        }
    }

    fn desk_generator(seed: u64) -> MaskGenerator {
        let mut rng = stream(seed, "test-gen");
        MaskGenerator::new(&GanArchitecture::desk(), &mut rng).unwrap()
    }

    /// A generator whose tanh output is saturated at +1 everywhere (huge
    /// positive bias on the final layer): binarization keeps every pixel.
    fn all_ones_generator(seed: u64) -> MaskGenerator {
        let mut gen = desk_generator(seed);
        gen.zero_final_layer();
        gen.visit_params(&mut |p| {
            if p.name == "gen.4.bias" {
                p.value.fill(50.0);
            }
        });
        gen
    }

    fn random_views(n: usize, seed: u64) -> ViewBatch {
        let mut rng = stream(seed, "adv-views");
        let imgs: Vec<Image> = (0..n)
            .map(|i| {
                Image::new(
                    Array2::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE), |_| rng.random_range(0.05..1.0)),
                    i,
                    1,
                )
                .unwrap()
            })
            .collect();
        augment_views(&imgs, &AugmentationPolicy::default(), &mut rng).unwrap()
    }

    fn state_for(views: &ViewBatch, gen: MaskGenerator, cfg: ContrastiveConfig) -> AdversarialState {
        let n = views.len();
        let mut rng = stream(cfg.seed, "adv-latents");
        let members = sample_latents(n, gen.arch.latent_dim, &mut rng);
        let mut ls = LatentSet::new(members);
        ls.assignment = (0..n).collect();
        let mut enc_rng = stream(cfg.seed, "adv-enc");
        let encoder = build_encoder(&cfg.encoder_arch, &mut enc_rng).unwrap();
        AdversarialState::new(encoder, gen, ls, cfg).unwrap()
    }

    #[test]
    fn objective_with_zero_lambda_is_the_masked_loss() {
        let views = random_views(4, 1);
        let cfg = ContrastiveConfig {
            lambda_reg: 0.0,
            ..tiny_config(2)
        };
        let mut state = state_for(&views, desk_generator(3), cfg);
        let batch = StepBatch::from_views(&views).unwrap();
        let obj = state.objective(&batch).unwrap();
        assert_eq!(obj.total, obj.contrastive);
    }

    #[test]
    fn all_ones_masks_reduce_to_plain_simclr_and_unit_regularizer() {
        let views = random_views(4, 4);
        let cfg = tiny_config(5);
        let mut state = state_for(&views, all_ones_generator(6), cfg.clone());
        let batch = StepBatch::from_views(&views).unwrap();
        let obj = state.objective(&batch).unwrap();

        // Regularizer: cosine of each view with itself.
        assert!((obj.regularizer - 1.0).abs() < 1e-12);

        // The masked loss must equal the unmasked loss to within 1e-9.
        // (Objective uses frozen batch statistics; compare on the public
        // eval-mode ops, masked views against plain views.)
        let zs: Vec<LatentVariable> = state
            .latent_set
            .assignment
            .iter()
            .map(|&k| state.latent_set.members[k].clone())
            .collect();
        let masks = crate::gan::sample_masks(&mut state.generator, &zs).unwrap();
        assert!(masks.iter().all(|m| m.grid.iter().all(|v| *v == 1)));
        let masked_views = views.clone().with_masks(&masks).unwrap();
        let with_mask = masked_simclr_loss(
            &masked_views,
            &zs,
            &mut state.encoder,
            &mut state.generator,
            &cfg,
        )
        .unwrap();
        let plain = simclr_loss(&views, &mut state.encoder, &cfg).unwrap();
        assert!((with_mask - plain).abs() < 1e-9);
    }

    #[test]
    fn objective_matches_straight_line_recomputation() {
        // Independent recomputation: rebuild masked anchors by hand, embed
        // through the loss ops, add λ · mean cosine computed with the plain
        // public cosine on flattened pixels.
        let views = random_views(4, 7);
        let cfg = ContrastiveConfig {
            lambda_reg: 0.5,
            ..tiny_config(8)
        };
        let mut state = state_for(&views, desk_generator(9), cfg.clone());
        let batch = StepBatch::from_views(&views).unwrap();
        let obj = state.objective(&batch).unwrap();

        let z = state.latent_set.assigned_batch().unwrap();
        let field = state.generator.forward(&z, Mode::Eval).unwrap();
        let masks = binarize_field(&field).unwrap();
        let masked_views = views.clone().with_masks(&masks).unwrap();

        // Contrastive term via a frozen-mode forward identical to the
        // objective's path.
        let anchors: Vec<&Array2<f64>> = masked_views
            .view_a_masked
            .as_ref()
            .unwrap()
            .iter()
            .map(|i| &i.pixels)
            .collect();
        let bs: Vec<&Array2<f64>> = views.view_b.iter().map(|i| &i.pixels).collect();
        let full = ndarray::concatenate(
            Axis(0),
            &[pixels_to_batch(&anchors).view(), pixels_to_batch(&bs).view()],
        )
        .unwrap();
        let emb = state.encoder.forward_batch(full, Mode::Frozen).unwrap();
        let (a_emb, b_emb) = (
            emb.slice(s![..4, ..]).to_owned(),
            emb.slice(s![4.., ..]).to_owned(),
        );
        let (loss, _, _) = nt_xent_value_grad(&a_emb, &b_emb, cfg.temperature, false).unwrap();

        let mut reg = 0.0;
        for (orig, masked) in views.view_a.iter().zip(masked_views.view_a_masked.as_ref().unwrap()) {
            let u = Array1::from_iter(orig.pixels.iter().cloned());
            let v = Array1::from_iter(masked.pixels.iter().cloned());
            reg += crate::contrastive::cosine_similarity(u.view(), v.view());
        }
        reg /= 4.0;

        let want = loss + cfg.lambda_reg * reg;
        assert!(
            (obj.total - want).abs() < 1e-6,
            "objective {} vs recomputation {want}",
            obj.total
        );
    }

    #[test]
    fn zero_learning_rates_freeze_their_targets() {
        let views = random_views(4, 10);
        let cfg = ContrastiveConfig {
            alpha: 0.0,
            beta: 0.0,
            ..tiny_config(11)
        };
        let mut state = state_for(&views, desk_generator(12), cfg);
        let batch = StepBatch::from_views(&views).unwrap();

        let params_before = snapshot_state(&mut state.encoder);
        state.encoder_step(&batch).unwrap();
        // Running statistics move in Train mode; the *parameters* must not.
        let mut params_after = Vec::new();
        state.encoder.visit_params(&mut |p| params_after.push((p.name.clone(), p.value.clone())));
        for ((name, before), (_, after)) in params_before
            .iter()
            .filter(|(n, _)| !n.contains("running"))
            .zip(&params_after)
        {
            assert_eq!(before, after, "{name} changed under alpha = 0");
        }

        let z_before: Vec<_> = state.latent_set.members.iter().map(|z| z.vector.clone()).collect();
        state.latent_step(&batch).unwrap();
        for (b, a) in z_before.iter().zip(&state.latent_set.members) {
            assert_eq!(b, &a.vector, "latents changed under beta = 0");
        }
    }

    #[test]
    fn regularizer_gradient_wrt_encoder_is_zero_by_construction() {
        // encoder_step backpropagates only the contrastive term; assert the
        // λ-term truly has no encoder dependence by comparing encoder
        // parameters after steps with λ = 0 and λ = 10 (identical streams).
        let views = random_views(4, 13);
        let batch = StepBatch::from_views(&views).unwrap();
        let mut outcomes = Vec::new();
        for lambda in [0.0, 10.0] {
            let cfg = ContrastiveConfig {
                lambda_reg: lambda,
                ..tiny_config(14)
            };
            let mut state = state_for(&views, desk_generator(15), cfg);
            state.encoder_step(&batch).unwrap();
            outcomes.push(snapshot_state(&mut state.encoder));
        }
        for ((name, a), (_, b)) in outcomes[0].iter().zip(&outcomes[1]) {
            assert_eq!(a, b, "{name} depends on lambda");
        }
    }

    #[test]
    fn latent_update_matches_finite_differences_on_soft_toy() {
        // 4-dimensional truncated latent, soft mask transform (the hard
        // threshold makes the objective piecewise constant in z; the soft
        // relaxation is what the straight-through rule approximates).
        let arch = GanArchitecture {
            id: "toy-8".into(),
            latent_dim: 4,
            image_size: 8,
            gen_layers: vec![
                crate::gan::ConvSpec { out_channels: 4, kernel: 2, stride: 1, pad: 0 },
                crate::gan::ConvSpec { out_channels: 1, kernel: 4, stride: 4, pad: 0 },
            ],
            disc_layers: vec![
                crate::gan::ConvSpec { out_channels: 2, kernel: 4, stride: 2, pad: 1 },
                crate::gan::ConvSpec { out_channels: 1, kernel: 4, stride: 4, pad: 0 },
            ],
            gen_leaky_slope: None,
            disc_leaky_slope: Some(0.2),
        };
        let mut rng = stream(16, "toy-fd");
        let gen = MaskGenerator::new(&arch, &mut rng).unwrap();
        let encoder = crate::contrastive::Encoder::from_parts("toy", 8, 3, 1, &[(3, 4, 2)], &mut rng);

        let n = 3;
        let mk = |rng: &mut ChaCha8Rng| {
            Arr4::from_shape_fn((n, 1, 8, 8), |_| rng.random_range(0.1..1.0))
        };
        let batch = StepBatch { view_a: mk(&mut rng), view_b: mk(&mut rng) };

        let cfg = ContrastiveConfig {
            batch_size: n,
            encoder_arch: "toy".into(),
            mask_transform: MaskTransform::Soft,
            lambda_reg: 0.5,
            beta: 1e-1,
            seed: 17,
            ..Default::default()
        };
        let members = sample_latents(n, 4, &mut rng);
        let mut ls = LatentSet::new(members.clone());
        ls.assignment = (0..n).collect();
        let mut state = AdversarialState::new(encoder, gen, ls, cfg.clone()).unwrap();

        // Finite-difference gradient of the total objective wrt every latent
        // coordinate.
        let h = 1e-6;
        let mut fd = vec![Array1::<f64>::zeros(4); n];
        for k in 0..n {
            for c in 0..4 {
                for (sign, dst) in [(1.0, 0), (-1.0, 1)] {
                    let _ = dst;
                    state.latent_set.members[k].vector[c] += sign * h;
                    let val = state.objective(&batch).unwrap().total;
                    state.latent_set.members[k].vector[c] -= sign * h;
                    fd[k][c] += sign * val / (2.0 * h);
                }
            }
        }

        let info = state.latent_step(&batch).unwrap();
        assert!(info.grad_norm_sq > 0.0);
        for k in 0..n {
            let want = &members[k].vector + &(fd[k].clone() * cfg.beta);
            let got = &state.latent_set.members[k].vector;
            let err = (&want - got).iter().map(|v| v * v).sum::<f64>().sqrt()
                / want.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            assert!(err < 1e-3, "latent {k}: relative update error {err}");
        }
    }

    #[test]
    fn encoder_update_matches_finite_differences_on_toy() {
        // ϑ-gradient of the contrastive term on a 2-layer toy encoder, N=3.
        let mut rng = stream(18, "enc-fd");
        let gen = all_ones_generator(19);
        let encoder = crate::contrastive::Encoder::from_parts("toy", 64, 2, 4, &[(2, 3, 2)], &mut rng);
        let n = 3;
        let mk = |rng: &mut ChaCha8Rng| {
            Arr4::from_shape_fn((n, 1, 64, 64), |_| rng.random_range(0.1..1.0))
        };
        let batch = StepBatch { view_a: mk(&mut rng), view_b: mk(&mut rng) };
        let cfg = ContrastiveConfig {
            batch_size: n,
            encoder_arch: "toy".into(),
            alpha: 1e-2,
            seed: 20,
            ..Default::default()
        };
        let members = sample_latents(n, gen.arch.latent_dim, &mut rng);
        let mut ls = LatentSet::new(members);
        ls.assignment = (0..n).collect();
        let mut state = AdversarialState::new(encoder, gen, ls, cfg.clone()).unwrap();

        let before = snapshot_state(&mut state.encoder);
        // Analytic step. The encoder pass uses frozen statistics for the FD
        // comparison (Train differs only in running-stat bookkeeping).
        let masks = state.mask_fields(n).unwrap();
        let anchors = &batch.view_a * &masks;
        let (_, da, db) = state
            .loss_forward(anchors, batch.view_b.clone(), Mode::Frozen)
            .unwrap();
        state.loss_backward_to_inputs(&da, &db).unwrap();
        let mut analytic = Vec::new();
        state
            .encoder
            .visit_params(&mut |p| analytic.push((p.name.clone(), p.grad.clone())));
        state.encoder.zero_grads();

        // FD of the contrastive term wrt a subset of parameters.
        let h = 1e-5;
        for (name, grad) in &analytic {
            let len = grad.len();
            for flat in (0..len).step_by((len / 4).max(1)) {
                let probe = |delta: f64, state: &mut AdversarialState| {
                    state.encoder.visit_params(&mut |p| {
                        if p.name == *name {
                            p.value.as_slice_mut().unwrap()[flat] += delta;
                        }
                    });
                    let masks = state.mask_fields(n).unwrap();
                    let anchors = &batch.view_a * &masks;
                    let (loss, _, _) = state
                        .loss_forward(anchors, batch.view_b.clone(), Mode::Frozen)
                        .unwrap();
                    state.encoder.visit_params(&mut |p| {
                        if p.name == *name {
                            p.value.as_slice_mut().unwrap()[flat] -= delta;
                        }
                    });
                    loss
                };
                let up = probe(h, &mut state);
                let down = probe(-h, &mut state);
                let fd = (up - down) / (2.0 * h);
                let got = grad.as_slice().unwrap()[flat];
                let denom = fd.abs().max(got.abs()).max(1e-5);
                assert!(
                    (fd - got).abs() / denom < 1e-3,
                    "{name}[{flat}]: fd {fd} vs analytic {got}"
                );
            }
        }
        // The snapshot was taken before any update; parameters unchanged.
        let after = snapshot_state(&mut state.encoder);
        for ((n1, a), (_, b)) in before.iter().zip(&after) {
            assert_eq!(a, b, "{n1} must be untouched by gradient probes");
        }
    }

    #[test]
    fn latent_ascent_does_not_decrease_the_objective_to_first_order() {
        // 10-trial smoke version of the 100-trial acceptance property.
        let mut passes = 0;
        for trial in 0..10 {
            let views = random_views(4, 100 + trial);
            let cfg = ContrastiveConfig {
                beta: 1e-4,
                ..tiny_config(200 + trial)
            };
            let mut state = state_for(&views, desk_generator(300 + trial), cfg);
            let batch = StepBatch::from_views(&views).unwrap();
            let before = state.objective(&batch).unwrap().total;
            let info = state.latent_step(&batch).unwrap();
            let after = state.objective(&batch).unwrap().total;
            let tol = 1e-4 * info.grad_norm_sq * 0.1;
            if after >= before - tol {
                passes += 1;
            }
        }
        assert!(passes >= 8, "only {passes}/10 ascent trials passed");
    }

    #[test]
    fn run_amcl_loop_accounting_and_frozen_generator() {
        let split = tiny_split(30);
        let gen = desk_generator(31);
        let mut gen_probe = gen.clone();
        let gen_state_before = snapshot_state(&mut gen_probe);

        let cfg = ContrastiveConfig {
            epochs: 1,
            t1: 1,
            t2: 1,
            ..tiny_config(32)
        };
        let (_, state) = run_amcl(&split, &gen, &cfg).unwrap();
        assert_eq!(state.history.len(), 2, "one encoder + one latent record");
        assert_eq!(state.history[0].phase, Phase::Encoder);
        assert_eq!(state.history[1].phase, Phase::Latent);

        let mut gen_after = state.generator.clone();
        let gen_state_after = snapshot_state(&mut gen_after);
        for ((name, a), (_, b)) in gen_state_before.iter().zip(&gen_state_after) {
            assert_eq!(a, b, "generator tensor {name} changed during the run");
        }

        // Latents stay 128-dimensional and finite.
        for z in &state.latent_set.members {
            assert_eq!(z.dim(), 128);
            assert!(z.vector.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_epochs_returns_the_initial_encoder() {
        let split = tiny_split(33);
        let gen = desk_generator(34);
        let cfg = ContrastiveConfig {
            epochs: 0,
            ..tiny_config(35)
        };
        let (mut enc, state) = run_amcl(&split, &gen, &cfg).unwrap();
        assert!(state.history.is_empty());
        let mut fresh = init_encoder(&cfg).unwrap();
        assert_eq!(snapshot_state(&mut enc), snapshot_state(&mut fresh));
    }

    #[test]
    fn alternation_discipline_holds_across_epochs() {
        let split = tiny_split(36);
        let gen = desk_generator(37);
        let cfg = ContrastiveConfig {
            epochs: 3,
            t1: 2,
            t2: 2,
            ..tiny_config(38)
        };
        let (_, state) = run_amcl(&split, &gen, &cfg).unwrap();
        assert_eq!(state.history.len(), 12);
        for epoch in 1..=3 {
            let epoch_records: Vec<&HistoryRecord> =
                state.history.iter().filter(|r| r.epoch == epoch).collect();
            let first_latent = epoch_records
                .iter()
                .position(|r| r.phase == Phase::Latent)
                .unwrap();
            assert!(
                epoch_records[..first_latent]
                    .iter()
                    .all(|r| r.phase == Phase::Encoder),
                "no latent update may precede the encoder steps of epoch {epoch}"
            );
            assert_eq!(first_latent, 2, "all T1 encoder steps come first");
        }
    }

    #[test]
    fn degenerate_run_is_bit_identical_to_masked_simclr() {
        let split = tiny_split(39);
        let gen = desk_generator(40);
        let cfg = ContrastiveConfig {
            epochs: 3,
            lambda_reg: 0.0,
            beta: 0.0,
            ..tiny_config(41)
        };
        let (mut amcl_enc, state) = run_amcl(&split, &gen, &cfg).unwrap();
        let (mut ref_enc, _) = run_masked_simclr(&split, &gen, &cfg).unwrap();
        let a = snapshot_state(&mut amcl_enc);
        let b = snapshot_state(&mut ref_enc);
        for ((name, x), (_, y)) in a.iter().zip(&b) {
            assert_eq!(x, y, "tensor {name} differs from the reference run");
        }
        // With beta = 0 the latent set must be exactly its initialization.
        let mut latents_rng = stream(cfg.seed, "pretrain:latents");
        let init = sample_latents(cfg.batch_size, 128, &mut latents_rng);
        for (z, z0) in state.latent_set.members.iter().zip(&init) {
            assert_eq!(z.vector, z0.vector);
        }
    }

    #[test]
    fn amcl_state_checkpoint_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        let views = random_views(4, 42);
        let mut state = state_for(&views, desk_generator(43), tiny_config(44));
        save_amcl_state(&path, &mut state, "hash123").unwrap();
        let (mut enc, latents, hash) = load_amcl_state(&path).unwrap();
        assert_eq!(hash, "hash123");
        assert_eq!(latents.len(), state.latent_set.len());
        for (a, b) in latents.members.iter().zip(&state.latent_set.members) {
            assert_eq!(a.vector, b.vector);
        }
        assert_eq!(
            snapshot_state(&mut enc),
            snapshot_state(&mut state.encoder)
        );
    }

    #[test]
    fn history_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_history_csv(
            &path,
            &[
                HistoryRecord { epoch: 1, phase: Phase::Encoder, step: 1, loss: 0.5, regularizer: 0.25 },
                HistoryRecord { epoch: 1, phase: Phase::Latent, step: 1, loss: 0.75, regularizer: 0.5 },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "epoch,phase,step,loss,regularizer\n1,encoder,1,0.5,0.25\n1,latent,1,0.75,0.5\n"
        );
    }
}
