//! Experiment orchestration: stages, artifacts, manifest, resumability.
//!
//! Stages read their inputs from the output directory (or re-derive them
//! from config) and write artifacts plus one manifest record per artifact.
//! Re-running a stage replaces its manifest records, so every artifact is
//! referenced exactly once. All data artifacts are byte-reproducible for a
//! fixed config and seed; plots are excluded from that guarantee.

pub mod config;
pub mod plots;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversarial::{run_amcl, run_masked_simclr, run_simclr, save_amcl_state, write_history_csv};
use crate::contrastive::{build_encoder, load_encoder, save_encoder};
use crate::data::{
    generate_synthetic_dataset, load_image_directory, loader::save_image_directory,
    DatasetSplit, DirectoryLayout,
};
use crate::error::{AmclError, Result};
use crate::evalkit::{
    compare_pretraining_full, evaluate_with, finetune, load_classifier, save_classifier,
    write_comparison_csv, write_report_json, Classifier, CompareConfig, ComparisonRow,
    PretrainMode,
};
use crate::gan::{load_generator, save_gan_net, train_gan, write_gan_loss_csv, GanArchitecture};
use crate::masking::{build_mask_corpus, load_mask_corpus, save_mask_corpus};
use crate::rng::stream;

pub use config::{
    DataSource, DatasetConfig, EvalStageConfig, ExperimentConfig, FinetuneFrom, GanStageConfig,
    PretrainKind,
};
pub use plots::{emit_plots, PlotOutcome};

// Artifact paths, relative to the output directory.
pub const ART_DATASET: &str = "dataset";
pub const ART_MASKS: &str = "masks.txt";
pub const ART_GAN_G: &str = "gan_generator.ckpt";
pub const ART_GAN_D: &str = "gan_discriminator.ckpt";
pub const ART_GAN_LOSS: &str = "gan_loss.csv";
pub const ART_ENCODER: &str = "encoder.ckpt";
pub const ART_AMCL_STATE: &str = "amcl_state.ckpt";
pub const ART_PRETRAIN_CSV: &str = "pretrain_history.csv";
pub const ART_CLASSIFIER: &str = "classifier.ckpt";
pub const ART_FINETUNE_CSV: &str = "finetune_loss.csv";
pub const ART_REPORT: &str = "report.json";
pub const ART_ROC_CSV: &str = "roc.csv";
pub const ART_COMPARE: &str = "compare.csv";

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    SynthData,
    GenMasks,
    TrainGan,
    Pretrain,
    Finetune,
    Eval,
    Compare,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::SynthData,
        Stage::GenMasks,
        Stage::TrainGan,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::Eval,
        Stage::Compare,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::GenMasks => "gen-masks",
            Stage::TrainGan => "train-gan",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::Eval => "eval",
            Stage::Compare => "compare",
            Stage::Report => "report",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .find(|st| st.name() == s)
            .copied()
            .ok_or_else(|| {
                AmclError::InvalidConfig(format!(
                    "unknown stage {s:?} (available: {}, all)",
                    Stage::ALL.map(|s| s.name()).join(", ")
                ))
            })
    }

    /// Artifacts this stage needs before it can run.
    fn requirements(self, cfg: &ExperimentConfig) -> Vec<&'static str> {
        let dataset: &[&'static str] = if cfg.dataset.source == DataSource::Synthetic {
            &[ART_DATASET]
        } else {
            &[] // external root, checked at load time
        };
        match self {
            Stage::SynthData | Stage::GenMasks => vec![],
            Stage::TrainGan => vec![ART_MASKS],
            Stage::Pretrain => {
                let mut needs = dataset.to_vec();
                if cfg.pretrain_mode != PretrainKind::Simclr {
                    needs.push(ART_GAN_G);
                }
                needs
            }
            Stage::Finetune => {
                let mut needs = dataset.to_vec();
                if cfg.eval.finetune_from == FinetuneFrom::Pretrained {
                    needs.push(ART_ENCODER);
                }
                needs
            }
            Stage::Eval => {
                let mut needs = dataset.to_vec();
                needs.push(ART_CLASSIFIER);
                needs
            }
            Stage::Compare => {
                let mut needs = dataset.to_vec();
                if cfg.eval.compare_modes.contains(&PretrainMode::Amcl) {
                    needs.push(ART_GAN_G);
                }
                needs
            }
            Stage::Report => vec![], // plots whatever exists
        }
    }

    /// Artifacts this stage writes.
    fn productions(self, cfg: &ExperimentConfig) -> Vec<&'static str> {
        match self {
            Stage::SynthData => {
                if cfg.dataset.source == DataSource::Synthetic {
                    vec![ART_DATASET]
                } else {
                    vec![]
                }
            }
            Stage::GenMasks => vec![ART_MASKS],
            Stage::TrainGan => vec![ART_GAN_G, ART_GAN_D, ART_GAN_LOSS],
            Stage::Pretrain => vec![ART_ENCODER, ART_PRETRAIN_CSV],
            Stage::Finetune => vec![ART_CLASSIFIER, ART_FINETUNE_CSV],
            Stage::Eval => vec![ART_REPORT, ART_ROC_CSV],
            Stage::Compare => vec![ART_COMPARE],
            Stage::Report => vec![],
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub stage: String,
    pub artifact: String,
    pub hash: String,
    pub wall_time_s: f64,
}

const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn load_manifest(output_dir: &Path) -> Result<Vec<ManifestRecord>> {
    let path = output_dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(&path).map_err(|e| AmclError::io(&path, e))?;
    let mut records = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(line).map_err(|e| AmclError::Corrupt {
            path: path.clone(),
            reason: format!("manifest line: {e}"),
        })?);
    }
    Ok(records)
}

fn write_manifest(output_dir: &Path, records: &[ManifestRecord]) -> Result<()> {
    let path = output_dir.join(MANIFEST_FILE);
    let mut sorted = records.to_vec();
    let stage_rank = |name: &str| {
        Stage::ALL
            .iter()
            .position(|s| s.name() == name)
            .unwrap_or(usize::MAX)
    };
    sorted.sort_by(|a, b| {
        stage_rank(&a.stage)
            .cmp(&stage_rank(&b.stage))
            .then(a.artifact.cmp(&b.artifact))
    });
    let mut out = String::new();
    for rec in &sorted {
        out.push_str(&serde_json::to_string(rec).expect("manifest records serialize"));
        out.push('\n');
    }
    fs::write(&path, out).map_err(|e| AmclError::io(&path, e))?;
    Ok(())
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| AmclError::io(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(config::hex_string(&hasher.finalize()))
}

/// Stable hash of a directory tree: sorted relative paths and contents.
fn sha256_tree(root: &Path) -> Result<String> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| AmclError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for entry in entries {
            if entry.is_dir() {
                walk(&entry, files)?;
            } else {
                files.push(entry);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, &mut files)?;
    let mut hasher = Sha256::new();
    for file in files {
        let rel = file.strip_prefix(root).unwrap_or(&file);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update(fs::read(&file).map_err(|e| AmclError::io(&file, e))?);
    }
    Ok(config::hex_string(&hasher.finalize()))
}

fn artifact_hash(output_dir: &Path, artifact: &str) -> Result<String> {
    let path = output_dir.join(artifact);
    if path.is_dir() {
        sha256_tree(&path)
    } else {
        sha256_file(&path)
    }
}

/// Load the dataset the way the stages see it: from the output directory
/// for the synthetic source, from the configured root otherwise.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let layout = DirectoryLayout {
        train_session: cfg.dataset.train_session,
    };
    match cfg.dataset.source {
        DataSource::Synthetic => {
            let dir = cfg.output_dir.join(ART_DATASET);
            if !dir.is_dir() {
                return Err(AmclError::MissingArtifact(format!(
                    "{} (run the synth-data stage first)",
                    dir.display()
                )));
            }
            load_image_directory(&dir, &layout)
        }
        DataSource::Directory => {
            let root = cfg.dataset.root.as_ref().expect("validated");
            load_image_directory(root, &layout)
        }
    }
}

fn require(output_dir: &Path, artifact: &str) -> Result<PathBuf> {
    let path = output_dir.join(artifact);
    if !path.exists() {
        return Err(AmclError::MissingArtifact(format!(
            "{} (an earlier stage must produce it)",
            path.display()
        )));
    }
    Ok(path)
}

fn stage_synth_data(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    match cfg.dataset.source {
        DataSource::Synthetic => {
            let split = generate_synthetic_dataset(&cfg.dataset.synthetic)?;
            let dir = cfg.output_dir.join(ART_DATASET);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| AmclError::io(&dir, e))?;
            }
            save_image_directory(&split, &dir)?;
            let cfg_path = dir.join("synthetic_config.txt");
            fs::write(&cfg_path, cfg.dataset.synthetic.to_key_value())
                .map_err(|e| AmclError::io(&cfg_path, e))?;
            log::info!("synth-data: {}", split.summary());
            Ok(vec![ART_DATASET.to_string()])
        }
        DataSource::Directory => {
            // External data: just verify it loads under the session layout.
            let split = load_dataset(cfg)?;
            log::info!("synth-data: external dataset ok ({})", split.summary());
            Ok(vec![])
        }
    }
}

fn stage_gen_masks(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let corpus = build_mask_corpus(&cfg.masking)?;
    let path = cfg.output_dir.join(ART_MASKS);
    save_mask_corpus(&path, &corpus, cfg.masking.patch_size)?;
    log::info!("gen-masks: {} masks -> {}", corpus.len(), path.display());
    Ok(vec![ART_MASKS.to_string()])
}

fn stage_train_gan(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let masks_path = require(&cfg.output_dir, ART_MASKS)?;
    let mut corpus = load_mask_corpus(&masks_path)?;
    if cfg.gan.corpus_subsample > 0 && cfg.gan.corpus_subsample < corpus.len() {
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "gan:subsample"));
        order.truncate(cfg.gan.corpus_subsample);
        order.sort_unstable();
        corpus = order.into_iter().map(|i| corpus[i].clone()).collect();
    }
    let arch = GanArchitecture::by_name(&cfg.gan.arch)?;
    let (mut gen, mut disc, trace) = train_gan(&corpus, &arch, &cfg.gan.train)?;
    save_gan_net(&cfg.output_dir.join(ART_GAN_G), "generator", &arch, &mut gen)?;
    save_gan_net(&cfg.output_dir.join(ART_GAN_D), "discriminator", &arch, &mut disc)?;
    write_gan_loss_csv(&cfg.output_dir.join(ART_GAN_LOSS), &trace)?;
    if let Some(last) = trace.last() {
        log::info!(
            "train-gan: {} masks, {} epochs, final d_loss {:.4} g_loss {:.4}",
            corpus.len(),
            trace.len(),
            last.d_loss,
            last.g_loss
        );
    }
    Ok(vec![
        ART_GAN_G.to_string(),
        ART_GAN_D.to_string(),
        ART_GAN_LOSS.to_string(),
    ])
}

fn stage_pretrain(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let split = load_dataset(cfg)?;
    let hash = cfg.hash();
    let mut artifacts = vec![ART_ENCODER.to_string(), ART_PRETRAIN_CSV.to_string()];
    match cfg.pretrain_mode {
        PretrainKind::Amcl => {
            let generator = load_generator(&require(&cfg.output_dir, ART_GAN_G)?)?;
            let (mut encoder, mut state) = run_amcl(&split, &generator, &cfg.contrastive)?;
            save_encoder(&cfg.output_dir.join(ART_ENCODER), &mut encoder, &hash)?;
            save_amcl_state(&cfg.output_dir.join(ART_AMCL_STATE), &mut state, &hash)?;
            write_history_csv(&cfg.output_dir.join(ART_PRETRAIN_CSV), &state.history)?;
            artifacts.push(ART_AMCL_STATE.to_string());
        }
        PretrainKind::MaskedSimclr => {
            let generator = load_generator(&require(&cfg.output_dir, ART_GAN_G)?)?;
            let (mut encoder, history) = run_masked_simclr(&split, &generator, &cfg.contrastive)?;
            save_encoder(&cfg.output_dir.join(ART_ENCODER), &mut encoder, &hash)?;
            write_history_csv(&cfg.output_dir.join(ART_PRETRAIN_CSV), &history)?;
        }
        PretrainKind::Simclr => {
            let (mut encoder, history) = run_simclr(&split, &cfg.contrastive)?;
            save_encoder(&cfg.output_dir.join(ART_ENCODER), &mut encoder, &hash)?;
            write_history_csv(&cfg.output_dir.join(ART_PRETRAIN_CSV), &history)?;
        }
    }
    log::info!(
        "pretrain: mode {} epochs {} encoder {}",
        cfg.pretrain_mode.as_str(),
        cfg.contrastive.epochs,
        cfg.contrastive.encoder_arch
    );
    Ok(artifacts)
}

fn stage_finetune(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let split = load_dataset(cfg)?;
    let encoder = match cfg.eval.finetune_from {
        FinetuneFrom::Pretrained => load_encoder(&require(&cfg.output_dir, ART_ENCODER)?)?,
        FinetuneFrom::Scratch => {
            let mut rng = stream(cfg.seed, "pretrain:encoder-init");
            build_encoder(&cfg.contrastive.encoder_arch, &mut rng)?
        }
    };
    let mut classifier = Classifier::new(encoder, split.num_classes, cfg.seed);
    let trace = finetune(
        &mut classifier,
        &split,
        cfg.eval.finetune_epochs,
        cfg.eval.finetune_lr,
        cfg.seed,
    )?;
    save_classifier(&cfg.output_dir.join(ART_CLASSIFIER), &mut classifier, &cfg.hash())?;
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in trace.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    let csv_path = cfg.output_dir.join(ART_FINETUNE_CSV);
    fs::write(&csv_path, csv).map_err(|e| AmclError::io(&csv_path, e))?;
    log::info!(
        "finetune: {} epochs, final loss {:.4}",
        trace.len(),
        trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(vec![ART_CLASSIFIER.to_string(), ART_FINETUNE_CSV.to_string()])
}

fn stage_eval(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let split = load_dataset(cfg)?;
    let mut classifier = load_classifier(&require(&cfg.output_dir, ART_CLASSIFIER)?)?;
    let report = evaluate_with(&mut classifier, &split, cfg.eval.matcher)?;
    write_report_json(&cfg.output_dir.join(ART_REPORT), &report, &cfg.hash())?;
    let mut csv = String::from("far,gar\n");
    for (far, gar) in &report.roc_points {
        csv.push_str(&format!("{far},{gar}\n"));
    }
    let roc_path = cfg.output_dir.join(ART_ROC_CSV);
    fs::write(&roc_path, csv).map_err(|e| AmclError::io(&roc_path, e))?;
    log::info!(
        "eval: accuracy {:.4} eer {:.4} over {} test images",
        report.accuracy,
        report.eer,
        split.test.len()
    );
    Ok(vec![ART_REPORT.to_string(), ART_ROC_CSV.to_string()])
}

fn stage_compare(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let split = load_dataset(cfg)?;
    let generator = if cfg.eval.compare_modes.contains(&PretrainMode::Amcl) {
        Some(load_generator(&require(&cfg.output_dir, ART_GAN_G)?)?)
    } else {
        None
    };
    let compare_cfg = CompareConfig {
        modes: cfg.eval.compare_modes.clone(),
        contrastive: cfg.contrastive.clone(),
        finetune_epochs: cfg.eval.finetune_epochs,
        finetune_lr: cfg.eval.finetune_lr,
        matcher: cfg.eval.matcher,
    };
    let results = compare_pretraining_full(&split, generator.as_ref(), &compare_cfg)?;
    let rows: Vec<ComparisonRow> = results
        .iter()
        .map(|(mode, report)| ComparisonRow {
            mode: *mode,
            accuracy: report.accuracy,
            eer: report.eer,
        })
        .collect();
    write_comparison_csv(&cfg.output_dir.join(ART_COMPARE), &rows)?;
    let mut artifacts = vec![ART_COMPARE.to_string()];
    let hash = cfg.hash();
    for (mode, report) in &results {
        let name = format!("report_{}.json", mode.as_str());
        write_report_json(&cfg.output_dir.join(&name), report, &hash)?;
        artifacts.push(name);
    }
    Ok(artifacts)
}

fn stage_report(cfg: &ExperimentConfig) -> Result<Vec<String>> {
    let outcome = emit_plots(&cfg.output_dir, cfg.seed)?;
    for (name, reason) in &outcome.skipped {
        log::info!("report: skipped {name}: {reason}");
    }
    Ok(outcome
        .written
        .iter()
        .map(|p| {
            p.strip_prefix(&cfg.output_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        })
        .collect())
}

/// Check that every requirement of every scheduled stage either already
/// exists or is produced by an earlier stage in the schedule.
pub fn validate_schedule(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<()> {
    let mut will_exist: Vec<&'static str> = Vec::new();
    for stage in stages {
        for need in stage.requirements(cfg) {
            let on_disk = cfg.output_dir.join(need).exists();
            if !on_disk && !will_exist.contains(&need) {
                return Err(AmclError::MissingArtifact(format!(
                    "stage {} needs {} but no earlier stage produces it",
                    stage.name(),
                    cfg.output_dir.join(need).display()
                )));
            }
        }
        will_exist.extend(stage.productions(cfg));
    }
    Ok(())
}

/// Run the scheduled stages in order, updating the manifest after each.
pub fn run_pipeline(cfg: &ExperimentConfig, stages: &[Stage]) -> Result<()> {
    cfg.validate()?;
    validate_schedule(cfg, stages)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| AmclError::io(&cfg.output_dir, e))?;

    for &stage in stages {
        let start = Instant::now();
        let artifacts = match stage {
            Stage::SynthData => stage_synth_data(cfg),
            Stage::GenMasks => stage_gen_masks(cfg),
            Stage::TrainGan => stage_train_gan(cfg),
            Stage::Pretrain => stage_pretrain(cfg),
            Stage::Finetune => stage_finetune(cfg),
            Stage::Eval => stage_eval(cfg),
            Stage::Compare => stage_compare(cfg),
            Stage::Report => stage_report(cfg),
        }
        .map_err(|e| match e {
            AmclError::MissingArtifact(_) => e,
            other => AmclError::Stage {
                stage: stage.name().into(),
                reason: other.to_string(),
            },
        })?;
        let wall = start.elapsed().as_secs_f64();

        let mut manifest = load_manifest(&cfg.output_dir)?;
        manifest.retain(|rec| rec.stage != stage.name());
        for artifact in &artifacts {
            manifest.push(ManifestRecord {
                stage: stage.name().into(),
                artifact: artifact.clone(),
                hash: artifact_hash(&cfg.output_dir, artifact)?,
                wall_time_s: (wall * 1000.0).round() / 1000.0,
            });
        }
        write_manifest(&cfg.output_dir, &manifest)?;
        log::info!("stage {} done in {:.2}s", stage.name(), wall);
    }
    Ok(())
}
