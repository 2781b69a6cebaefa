//! Downstream evaluation: softmax classifier on top of an encoder,
//! fine-tuning, and verification metrics (rank-1 accuracy, EER, ROC).
//!
//! Verification scores are cosine similarities between encoder embeddings
//! of test-image pairs by default (same class → genuine, different →
//! impostor); a posterior-vector matcher is available as an alternative.
//! The EER is the crossing of the false-accept and false-reject curves,
//! linearly interpolated between adjacent thresholds.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::contrastive::{build_encoder, images_to_batch, Encoder};
use crate::data::{DatasetSplit, Image};
use crate::error::{AmclError, Result};
use crate::gan::MaskGenerator;
use crate::nn::ckpt::{checkpoint_net, restore_net, Checkpoint};
use crate::nn::{Linear, Mode, Net, Param, Sgd, WeightInit};
use crate::rng::stream;

const FINETUNE_BATCH: usize = 32;
/// Evaluation forward passes are chunked to bound memory.
const EVAL_CHUNK: usize = 64;

/// Encoder plus a linear→softmax classification head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub encoder: Encoder,
    pub head: Linear,
    pub num_classes: usize,
}

impl Classifier {
    pub fn new(encoder: Encoder, num_classes: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "classifier:head-init");
        let head = Linear::new(
            "head",
            encoder.embed_dim,
            num_classes,
            WeightInit::XavierUniform,
            &mut rng,
        );
        Classifier {
            encoder,
            head,
            num_classes,
        }
    }

    /// Softmax probabilities for a batch of images.
    pub fn probabilities(&mut self, imgs: &[&Image], mode: Mode) -> Result<Array2<f64>> {
        let emb = self.encoder.forward_batch(images_to_batch(imgs), mode)?;
        let logits = self.head.forward(emb);
        Ok(softmax_rows(&logits))
    }

    pub fn predict(&mut self, imgs: &[&Image]) -> Result<Vec<usize>> {
        let probs = self.probabilities(imgs, Mode::Eval)?;
        Ok(argmax_rows(&probs))
    }
}

impl Net for Classifier {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        self.encoder.visit_buffers(f);
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

/// Cross-entropy on softmax of the logits; gradient is (p - onehot)/n.
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len();
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[[i, y]].max(1e-300).ln();
        grad[[i, y]] -= 1.0;
    }
    (loss / n as f64, grad / n as f64)
}

/// Fine-tune the full network (encoder and head) with cross-entropy SGD.
/// Returns the per-epoch mean training loss.
pub fn finetune(
    classifier: &mut Classifier,
    split: &DatasetSplit,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if split.train.is_empty() {
        return Err(AmclError::Dataset("cannot fine-tune on an empty split".into()));
    }
    if split.num_classes != classifier.num_classes {
        return Err(AmclError::InvalidConfig(format!(
            "classifier head has {} classes, split has {}",
            classifier.num_classes, split.num_classes
        )));
    }
    let sgd = Sgd::new(lr);
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        let mut rng = stream(seed, &format!("finetune:shuffle:{epoch}"));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(FINETUNE_BATCH) {
            let imgs: Vec<&Image> = chunk.iter().map(|&i| &split.train[i]).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| split.train[i].class_id).collect();

            classifier.zero_grads();
            let emb = classifier
                .encoder
                .forward_batch(images_to_batch(&imgs), Mode::Train)?;
            let logits = classifier.head.forward(emb);
            let (loss, dlogits) = cross_entropy(&logits, &labels);
            if !loss.is_finite() {
                return Err(AmclError::NonFinite {
                    what: "loss",
                    phase: "finetune",
                    epoch,
                });
            }
            let demb = classifier.head.backward(&dlogits);
            classifier.encoder.backward_batch(&demb);
            if !classifier.grads_finite() {
                return Err(AmclError::NonFinite {
                    what: "gradient",
                    phase: "finetune",
                    epoch,
                });
            }
            sgd.step(classifier);
            classifier.zero_grads();
            loss_sum += loss;
            batches += 1;
        }
        trace.push(loss_sum / batches as f64);
    }
    Ok(trace)
}

/// Which similarity feeds the verification score sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Matcher {
    /// Cosine between encoder embeddings (the open-set default).
    #[default]
    EmbeddingCosine,
    /// Cosine between softmax posterior vectors.
    PosteriorCosine,
}

impl Matcher {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "embedding" | "embedding-cosine" => Ok(Matcher::EmbeddingCosine),
            "posterior" | "posterior-cosine" => Ok(Matcher::PosteriorCosine),
            other => Err(AmclError::InvalidConfig(format!(
                "unknown matcher {other:?} (available: embedding, posterior)"
            ))),
        }
    }
}

/// Verification results: rank-1 accuracy, EER, ROC points and the raw
/// score sets they came from.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub accuracy: f64,
    pub eer: f64,
    /// (false-accept rate, genuine-accept rate), sorted by threshold
    /// descending, endpoints (0,0) and (1,1) included.
    pub roc_points: Vec<(f64, f64)>,
    pub genuine_scores: Vec<f64>,
    pub impostor_scores: Vec<f64>,
}

/// FAR and FRR at a threshold under the accept-if-score≥t rule.
fn far_frr_at(genuine: &[f64], impostor: &[f64], t: f64) -> (f64, f64) {
    let far = impostor.iter().filter(|&&s| s >= t).count() as f64 / impostor.len() as f64;
    let frr = genuine.iter().filter(|&&s| s < t).count() as f64 / genuine.len() as f64;
    (far, frr)
}

/// EER and ROC points via a sweep over all distinct score values (plus
/// sentinels below and above), with linear interpolation at the crossing.
pub fn eer_and_roc(genuine: &[f64], impostor: &[f64]) -> Result<(f64, Vec<(f64, f64)>)> {
    if genuine.is_empty() || impostor.is_empty() {
        return Err(AmclError::Dataset(
            "EER needs non-empty genuine and impostor score sets".into(),
        ));
    }
    let mut thresholds: Vec<f64> = genuine.iter().chain(impostor).cloned().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    let lo = thresholds.first().unwrap() - 1.0;
    let hi = thresholds.last().unwrap() + 1.0;
    thresholds.insert(0, lo);
    thresholds.push(hi);

    let curve: Vec<(f64, f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (far, frr) = far_frr_at(genuine, impostor, t);
            (t, far, frr)
        })
        .collect();

    // FAR decreases and FRR increases along the sweep, so FAR-FRR changes
    // sign exactly once.
    let mut eer = None;
    for pair in curve.windows(2) {
        let (t0, far0, frr0) = pair[0];
        let (t1, far1, frr1) = pair[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 == 0.0 {
            eer = Some(far0);
            break;
        }
        if d0 > 0.0 && d1 <= 0.0 {
            let frac = if (d0 - d1).abs() > 0.0 { d0 / (d0 - d1) } else { 0.0 };
            let far_cross = far0 + (far1 - far0) * frac;
            let frr_cross = frr0 + (frr1 - frr0) * frac;
            let _ = t0;
            let _ = t1;
            eer = Some((far_cross + frr_cross) / 2.0);
            break;
        }
    }
    let eer = eer.unwrap_or_else(|| {
        let (_, far, frr) = *curve.last().unwrap();
        (far + frr) / 2.0
    });

    // ROC sorted by threshold descending: (0,0) → (1,1).
    let mut roc: Vec<(f64, f64)> = curve
        .iter()
        .rev()
        .map(|&(_, far, frr)| (far, 1.0 - frr))
        .collect();
    if roc.first() != Some(&(0.0, 0.0)) {
        roc.insert(0, (0.0, 0.0));
    }
    if roc.last() != Some(&(1.0, 1.0)) {
        roc.push((1.0, 1.0));
    }
    Ok((eer, roc))
}

/// Evaluate a classifier on the test session: rank-1 accuracy from the
/// softmax head, EER/ROC from all-pairs matcher scores.
pub fn evaluate(classifier: &mut Classifier, split: &DatasetSplit) -> Result<VerificationReport> {
    evaluate_with(classifier, split, Matcher::EmbeddingCosine)
}

pub fn evaluate_with(
    classifier: &mut Classifier,
    split: &DatasetSplit,
    matcher: Matcher,
) -> Result<VerificationReport> {
    if split.test.is_empty() {
        return Err(AmclError::Dataset("cannot evaluate on an empty test set".into()));
    }

    // Rank-1 accuracy, chunked eval-mode forward.
    let mut correct = 0usize;
    let mut features: Vec<Array1<f64>> = Vec::with_capacity(split.test.len());
    for chunk in split.test.chunks(EVAL_CHUNK) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let probs = classifier.probabilities(&refs, Mode::Eval)?;
        let preds = argmax_rows(&probs);
        for (img, pred) in chunk.iter().zip(&preds) {
            if img.class_id == *pred {
                correct += 1;
            }
        }
        match matcher {
            Matcher::EmbeddingCosine => {
                let emb = classifier
                    .encoder
                    .forward_batch(images_to_batch(&refs), Mode::Eval)?;
                for row in emb.axis_iter(Axis(0)) {
                    features.push(row.to_owned());
                }
            }
            Matcher::PosteriorCosine => {
                for row in probs.axis_iter(Axis(0)) {
                    features.push(row.to_owned());
                }
            }
        }
    }
    let accuracy = correct as f64 / split.test.len() as f64;

    // Classes with a single test image cannot form genuine pairs.
    let mut counts = vec![0usize; split.num_classes];
    for img in &split.test {
        counts[img.class_id] += 1;
    }
    let singletons: Vec<usize> = (0..split.num_classes).filter(|&c| counts[c] == 1).collect();
    if !singletons.is_empty() {
        log::warn!(
            "classes {singletons:?} have a single test image and contribute no genuine pairs"
        );
    }

    let mut genuine = Vec::new();
    let mut impostor = Vec::new();
    for i in 0..split.test.len() {
        for j in (i + 1)..split.test.len() {
            let s = crate::contrastive::cosine_similarity(features[i].view(), features[j].view());
            if split.test[i].class_id == split.test[j].class_id {
                genuine.push(s);
            } else {
                impostor.push(s);
            }
        }
    }
    let (eer, roc_points) = eer_and_roc(&genuine, &impostor)?;
    Ok(VerificationReport {
        accuracy,
        eer,
        roc_points,
        genuine_scores: genuine,
        impostor_scores: impostor,
    })
}

/// Report JSON: `{accuracy, eer, roc: [[far, gar], ...], config_hash}`.
pub fn write_report_json(
    path: &Path,
    report: &VerificationReport,
    config_hash: &str,
) -> Result<()> {
    #[derive(Serialize)]
    struct ReportFile<'a> {
        accuracy: f64,
        eer: f64,
        roc: Vec<[f64; 2]>,
        config_hash: &'a str,
    }
    let file = ReportFile {
        accuracy: report.accuracy,
        eer: report.eer,
        roc: report.roc_points.iter().map(|&(f, g)| [f, g]).collect(),
        config_hash,
    };
    let json =
        serde_json::to_string_pretty(&file).map_err(|e| AmclError::Stage {
            stage: "report".into(),
            reason: e.to_string(),
        })?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
    }
    fs::write(path, json.as_bytes()).map_err(|e| AmclError::io(path, e))?;
    Ok(())
}

/// Pretraining modes the comparison runner knows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainMode {
    Scratch,
    Simclr,
    Amcl,
}

impl PretrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainMode::Scratch => "scratch",
            PretrainMode::Simclr => "simclr",
            PretrainMode::Amcl => "amcl",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(PretrainMode::Scratch),
            "simclr" => Ok(PretrainMode::Simclr),
            "amcl" => Ok(PretrainMode::Amcl),
            other => Err(AmclError::InvalidConfig(format!(
                "unknown pretraining mode {other:?} (available: scratch, simclr, amcl)"
            ))),
        }
    }
}

/// Budgets shared by every compared mode.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub modes: Vec<PretrainMode>,
    pub contrastive: crate::contrastive::ContrastiveConfig,
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub matcher: Matcher,
}

/// One row of the comparison table.
#[derive(Debug, Clone)]
pub struct ComparisonRow {
    pub mode: PretrainMode,
    pub accuracy: f64,
    pub eer: f64,
}

/// Pretrain (per mode), fine-tune and evaluate under identical seeds and
/// budgets; returns the full verification report of every mode. The
/// generator is required only when `amcl` is among the modes.
pub fn compare_pretraining_full(
    split: &DatasetSplit,
    generator: Option<&MaskGenerator>,
    cfg: &CompareConfig,
) -> Result<Vec<(PretrainMode, VerificationReport)>> {
    if cfg.modes.is_empty() {
        return Err(AmclError::InvalidConfig("no pretraining modes requested".into()));
    }
    let mut out = Vec::with_capacity(cfg.modes.len());
    for &mode in &cfg.modes {
        let encoder = match mode {
            PretrainMode::Scratch => {
                let mut rng = stream(cfg.contrastive.seed, "pretrain:encoder-init");
                build_encoder(&cfg.contrastive.encoder_arch, &mut rng)?
            }
            PretrainMode::Simclr => crate::adversarial::run_simclr(split, &cfg.contrastive)?.0,
            PretrainMode::Amcl => {
                let generator = generator.ok_or_else(|| {
                    AmclError::InvalidConfig("amcl mode needs a trained mask generator".into())
                })?;
                crate::adversarial::run_amcl(split, generator, &cfg.contrastive)?.0
            }
        };
        let mut classifier = Classifier::new(encoder, split.num_classes, cfg.contrastive.seed);
        finetune(
            &mut classifier,
            split,
            cfg.finetune_epochs,
            cfg.finetune_lr,
            cfg.contrastive.seed,
        )?;
        let report = evaluate_with(&mut classifier, split, cfg.matcher)?;
        log::info!(
            "mode {}: accuracy {:.4} eer {:.4}",
            mode.as_str(),
            report.accuracy,
            report.eer
        );
        out.push((mode, report));
    }
    Ok(out)
}

/// Comparison table rows (ACC/EER per mode) under identical budgets.
pub fn compare_pretraining(
    split: &DatasetSplit,
    generator: Option<&MaskGenerator>,
    cfg: &CompareConfig,
) -> Result<Vec<ComparisonRow>> {
    Ok(compare_pretraining_full(split, generator, cfg)?
        .into_iter()
        .map(|(mode, report)| ComparisonRow {
            mode,
            accuracy: report.accuracy,
            eer: report.eer,
        })
        .collect())
}

/// Comparison CSV in the recognition-table layout: `mode,ACC,EER`
/// (percentages, two decimals).
pub fn write_comparison_csv(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let mut out = String::from("mode,ACC,EER\n");
    for row in rows {
        out.push_str(&format!(
            "{},{:.2},{:.2}\n",
            row.mode.as_str(),
            row.accuracy * 100.0,
            row.eer * 100.0
        ));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| AmclError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| AmclError::io(path, e))?;
    Ok(())
}

/// Persist a classifier (encoder + head) as one checkpoint.
pub fn save_classifier(path: &Path, clf: &mut Classifier, config_hash: &str) -> Result<()> {
    let meta = serde_json::json!({
        "architecture_id": clf.encoder.architecture_id,
        "num_classes": clf.num_classes,
        "config_hash": config_hash,
    });
    checkpoint_net("classifier", meta, clf).save(path)
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "classifier" {
        return Err(AmclError::Checkpoint(format!(
            "expected a classifier checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let arch = ckpt.meta_str("architecture_id")?.to_string();
    let num_classes = ckpt
        .meta
        .get("num_classes")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| AmclError::Checkpoint("missing num_classes".into()))? as usize;
    let mut rng = stream(0, "classifier:load");
    let encoder = build_encoder(&arch, &mut rng)?;
    let mut clf = Classifier::new(encoder, num_classes, 0);
    restore_net(&ckpt, &mut clf)?;
    Ok(clf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SyntheticVeinConfig, IMAGE_SIZE};
    use ndarray::Array2;
    use rand::Rng;

    /// Exhaustive oracle: recompute FAR/FRR at every candidate threshold by
    /// direct counting and interpolate the crossing the same way.
    pub(crate) fn oracle_eer(genuine: &[f64], impostor: &[f64], flipped: bool) -> f64 {
        let (g, i): (Vec<f64>, Vec<f64>) = if flipped {
            // Accept-if-score<=t rule is the >= rule on negated scores.
            (
                genuine.iter().map(|v| -v).collect(),
                impostor.iter().map(|v| -v).collect(),
            )
        } else {
            (genuine.to_vec(), impostor.to_vec())
        };
        let mut ts: Vec<f64> = g.iter().chain(&i).cloned().collect();
        ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ts.dedup();
        ts.insert(0, ts[0] - 1.0);
        ts.push(ts[ts.len() - 1] + 1.0);
        let mut prev: Option<(f64, f64)> = None;
        for &t in &ts {
            let far = i.iter().filter(|&&s| s >= t).count() as f64 / i.len() as f64;
            let frr = g.iter().filter(|&&s| s < t).count() as f64 / g.len() as f64;
            let d = far - frr;
            if d == 0.0 {
                return far;
            }
            if let Some((pfar, pfrr)) = prev {
                let pd = pfar - pfrr;
                if pd > 0.0 && d < 0.0 {
                    let frac = pd / (pd - d);
                    return ((pfar + (far - pfar) * frac) + (pfrr + (frr - pfrr) * frac)) / 2.0;
                }
            }
            prev = Some((far, frr));
        }
        let (far, frr) = prev.unwrap();
        (far + frr) / 2.0
    }

    fn toy_classifier(seed: u64) -> Classifier {
        let mut rng = stream(seed, "evalkit-test");
        let enc = build_encoder("cnn-tiny", &mut rng).unwrap();
        Classifier::new(enc, 4, seed)
    }

    fn tiny_split(seed: u64) -> DatasetSplit {
        generate_synthetic_dataset(&SyntheticVeinConfig {
            num_classes: 4,
            images_per_class_per_session: 3,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn softmax_head_is_a_probability_vector() {
        let mut clf = toy_classifier(1);
        let mut rng = stream(2, "probe");
        for _ in 0..10 {
            let img = Image::new(
                Array2::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE), |_| rng.random_range(0.0..1.0)),
                0,
                2,
            )
            .unwrap();
            let p = clf.probabilities(&[&img], Mode::Eval).unwrap();
            assert!(p.iter().all(|v| *v >= 0.0));
            assert!((p.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn perfectly_separated_scores_have_zero_eer() {
        let (eer, roc) = eer_and_roc(&[0.9, 0.8], &[0.1, 0.2]).unwrap();
        assert_eq!(eer, 0.0);
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn identical_score_distributions_have_eer_half() {
        let (eer, _) = eer_and_roc(&[0.6, 0.4], &[0.6, 0.4]).unwrap();
        assert!((eer - 0.5).abs() < 1e-12);
    }

    #[test]
    fn eer_matches_exhaustive_oracle_on_random_score_sets() {
        let mut rng = stream(3, "eer");
        for _ in 0..100 {
            let genuine: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
            let impostor: Vec<f64> = (0..200).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (eer, _) = eer_and_roc(&genuine, &impostor).unwrap();
            let want = oracle_eer(&genuine, &impostor, false);
            assert!((eer - want).abs() < 1e-9, "eer {eer} vs oracle {want}");
            assert!((0.0..=1.0).contains(&eer));
        }
    }

    #[test]
    fn negating_scores_under_the_flipped_rule_preserves_eer() {
        let mut rng = stream(4, "eer-flip");
        for _ in 0..20 {
            let genuine: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
            let impostor: Vec<f64> = (0..90).map(|_| rng.random_range(-1.0..1.0)).collect();
            let direct = oracle_eer(&genuine, &impostor, false);
            let neg_g: Vec<f64> = genuine.iter().map(|v| -v).collect();
            let neg_i: Vec<f64> = impostor.iter().map(|v| -v).collect();
            let flipped = oracle_eer(&neg_g, &neg_i, true);
            assert!(
                (direct - flipped).abs() < 1e-9,
                "direct {direct} vs flipped {flipped}"
            );
        }
    }

    #[test]
    fn roc_is_monotone_after_threshold_sort() {
        let mut rng = stream(5, "roc");
        let genuine: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..1.0)).collect();
        let impostor: Vec<f64> = (0..160).map(|_| rng.random_range(-0.5..0.8)).collect();
        let (_, roc) = eer_and_roc(&genuine, &impostor).unwrap();
        for pair in roc.windows(2) {
            assert!(pair[1].0 >= pair[0].0, "FAR must be non-decreasing");
            assert!(pair[1].1 >= pair[0].1, "GAR must be non-decreasing");
        }
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let split = tiny_split(6);
        let mut clf = toy_classifier(7);
        let before = crate::nn::snapshot_state(&mut clf);
        let trace = finetune(&mut clf, &split, 0, 0.1, 8).unwrap();
        assert!(trace.is_empty());
        assert_eq!(before, crate::nn::snapshot_state(&mut clf));
    }

    #[test]
    fn finetune_fits_a_separable_toy() {
        // 2 classes, 10 images, linearly separable by brightness.
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..5 {
            let dark = Image::new(
                Array2::from_elem((IMAGE_SIZE, IMAGE_SIZE), 0.15 + 0.01 * i as f64),
                0,
                1,
            )
            .unwrap();
            let bright = Image::new(
                Array2::from_elem((IMAGE_SIZE, IMAGE_SIZE), 0.75 + 0.01 * i as f64),
                1,
                1,
            )
            .unwrap();
            train.push(dark.clone());
            train.push(bright.clone());
            test.push(Image { session_id: 2, ..dark });
            test.push(Image { session_id: 2, ..bright });
        }
        let split = DatasetSplit {
            train,
            test,
            num_classes: 2,
        };
        let mut rng = stream(9, "sep");
        let enc = build_encoder("cnn-tiny", &mut rng).unwrap();
        let mut clf = Classifier::new(enc, 2, 10);
        let trace = finetune(&mut clf, &split, 50, 0.3, 11).unwrap();
        assert_eq!(trace.len(), 50);
        assert!(trace.iter().all(|l| l.is_finite()));

        let refs: Vec<&Image> = split.train.iter().collect();
        let preds = clf.predict(&refs).unwrap();
        let correct = refs
            .iter()
            .zip(&preds)
            .filter(|(img, p)| img.class_id == **p)
            .count();
        assert_eq!(correct, split.train.len(), "separable toy must fit exactly");
    }

    #[test]
    fn finetune_rejects_class_count_mismatch() {
        let split = tiny_split(12); // 4 classes
        let mut rng = stream(13, "mismatch");
        let enc = build_encoder("cnn-tiny", &mut rng).unwrap();
        let mut clf = Classifier::new(enc, 3, 14);
        assert!(finetune(&mut clf, &split, 1, 0.1, 15).is_err());
    }

    #[test]
    fn evaluate_produces_ranged_metrics_and_score_sets() {
        let split = tiny_split(16);
        let mut clf = toy_classifier(17);
        let report = evaluate(&mut clf, &split).unwrap();
        assert!((0.0..=1.0).contains(&report.accuracy));
        assert!((0.0..=1.0).contains(&report.eer));
        // 12 test images, 4 classes of 3: 4*3 genuine pairs, rest impostor.
        assert_eq!(report.genuine_scores.len(), 12);
        assert_eq!(report.impostor_scores.len(), 66 - 12);

        // Posterior matcher also runs.
        let alt = evaluate_with(&mut clf, &split, Matcher::PosteriorCosine).unwrap();
        assert!((0.0..=1.0).contains(&alt.eer));
    }

    #[test]
    fn comparison_rows_and_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ComparisonRow { mode: PretrainMode::Scratch, accuracy: 0.8683, eer: 0.0195 },
            ComparisonRow { mode: PretrainMode::Amcl, accuracy: 0.965, eer: 0.0108 },
        ];
        let path = dir.path().join("compare.csv");
        write_comparison_csv(&path, &rows).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "mode,ACC,EER\nscratch,86.83,1.95\namcl,96.50,1.08\n");
    }

    #[test]
    fn compare_single_mode_is_deterministic() {
        let split = tiny_split(18);
        let cfg = CompareConfig {
            modes: vec![PretrainMode::Scratch],
            contrastive: crate::contrastive::ContrastiveConfig {
                encoder_arch: "cnn-tiny".into(),
                batch_size: 4,
                epochs: 2,
                seed: 19,
                ..Default::default()
            },
            finetune_epochs: 2,
            finetune_lr: 0.05,
            matcher: Matcher::EmbeddingCosine,
        };
        let a = compare_pretraining(&split, None, &cfg).unwrap();
        let b = compare_pretraining(&split, None, &cfg).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].accuracy, b[0].accuracy);
        assert_eq!(a[0].eer, b[0].eer);

        // amcl without a generator is a config error.
        let bad = CompareConfig {
            modes: vec![PretrainMode::Amcl],
            ..cfg
        };
        assert!(compare_pretraining(&split, None, &bad).is_err());
    }

    #[test]
    fn classifier_checkpoint_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        let mut clf = toy_classifier(20);
        save_classifier(&path, &mut clf, "h").unwrap();
        let mut loaded = load_classifier(&path).unwrap();
        assert_eq!(
            crate::nn::snapshot_state(&mut clf),
            crate::nn::snapshot_state(&mut loaded)
        );
    }
}
