//! Experiment configuration: flat INI-style sections, a canonical hash,
//! and `--set section.key=value` overrides.
//!
//! Every stage draws randomness from the single top-level seed through
//! named substreams, so stages can be re-run in isolation and still
//! reproduce.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::contrastive::{ContrastiveConfig, MaskTransform, ENCODER_ARCHITECTURES};
use crate::data::SyntheticVeinConfig;
use crate::error::{AmclError, Result};
use crate::evalkit::{Matcher, PretrainMode};
use crate::gan::GanTrainConfig;
use crate::masking::MaskSamplerConfig;

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Directory,
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Root of a `class_<id>/session_<s>` tree (directory source).
    pub root: Option<PathBuf>,
    pub train_session: u8,
    pub synthetic: SyntheticVeinConfig,
}

#[derive(Debug, Clone)]
pub struct GanStageConfig {
    /// Architecture preset: `desk` (CPU-scale, default) or `paper`
    /// (canonical full width).
    pub arch: String,
    pub train: GanTrainConfig,
    /// Train on a deterministic subsample of the corpus; 0 uses all masks.
    pub corpus_subsample: usize,
}

/// Which pretraining the `pretrain` stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainKind {
    Amcl,
    MaskedSimclr,
    Simclr,
}

impl PretrainKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PretrainKind::Amcl => "amcl",
            PretrainKind::MaskedSimclr => "masked-simclr",
            PretrainKind::Simclr => "simclr",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "amcl" => Ok(PretrainKind::Amcl),
            "masked-simclr" => Ok(PretrainKind::MaskedSimclr),
            "simclr" => Ok(PretrainKind::Simclr),
            other => Err(AmclError::InvalidConfig(format!(
                "unknown pretrain mode {other:?} (available: amcl, masked-simclr, simclr)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinetuneFrom {
    Pretrained,
    Scratch,
}

#[derive(Debug, Clone)]
pub struct EvalStageConfig {
    pub finetune_epochs: usize,
    pub finetune_lr: f64,
    pub finetune_from: FinetuneFrom,
    pub matcher: Matcher,
    pub compare_modes: Vec<PretrainMode>,
}

/// The full experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub masking: MaskSamplerConfig,
    pub gan: GanStageConfig,
    pub contrastive: ContrastiveConfig,
    pub pretrain_mode: PretrainKind,
    pub eval: EvalStageConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            output_dir: PathBuf::from("amcl-out"),
            dataset: DatasetConfig {
                source: DataSource::Synthetic,
                root: None,
                train_session: 1,
                synthetic: SyntheticVeinConfig::default(),
            },
            masking: MaskSamplerConfig::default(),
            gan: GanStageConfig {
                arch: "desk".into(),
                train: GanTrainConfig {
                    epochs: 4,
                    batch_size: 64,
                    ..Default::default()
                },
                corpus_subsample: 4096,
            },
            contrastive: ContrastiveConfig {
                encoder_arch: "cnn-compact".into(),
                batch_size: 16,
                epochs: 50,
                t1: 2,
                ..Default::default()
            },
            pretrain_mode: PretrainKind::Amcl,
            eval: EvalStageConfig {
                finetune_epochs: 30,
                finetune_lr: 0.05,
                finetune_from: FinetuneFrom::Pretrained,
                matcher: Matcher::EmbeddingCosine,
                compare_modes: vec![PretrainMode::Scratch, PretrainMode::Simclr, PretrainMode::Amcl],
            },
        }
    }
}

type RawSections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_ini(text: &str, origin: &str) -> Result<RawSections> {
    let mut out: RawSections = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            out.entry(section.clone()).or_default();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(AmclError::InvalidConfig(format!(
                "{origin}:{}: expected `key = value`, got {line:?}",
                lineno + 1
            )));
        };
        if section.is_empty() {
            return Err(AmclError::InvalidConfig(format!(
                "{origin}:{}: key {key:?} outside any [section]",
                lineno + 1
            )));
        }
        out.entry(section.clone())
            .or_default()
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        AmclError::InvalidConfig(format!(
            "{section}.{key}: cannot parse {value:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(AmclError::InvalidConfig(format!(
            "{section}.{key}: cannot parse {value:?} as bool"
        ))),
    }
}

impl ExperimentConfig {
    /// Load from an optional INI file, then apply `--set section.key=value`
    /// overrides, then `AMCL_OUTPUT_DIR`, then validate.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut raw = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| AmclError::io(p, e))?;
                parse_ini(&text, &p.display().to_string())?
            }
            None => RawSections::new(),
        };
        for item in overrides {
            let Some((path_part, value)) = item.split_once('=') else {
                return Err(AmclError::InvalidConfig(format!(
                    "--set expects section.key=value, got {item:?}"
                )));
            };
            let Some((section, key)) = path_part.split_once('.') else {
                return Err(AmclError::InvalidConfig(format!(
                    "--set expects section.key=value, got {item:?}"
                )));
            };
            raw.entry(section.trim().to_string())
                .or_default()
                .insert(key.trim().to_string(), value.trim().to_string());
        }
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&raw)?;
        if let Ok(dir) = std::env::var("AMCL_OUTPUT_DIR") {
            if !dir.is_empty() {
                cfg.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, raw: &RawSections) -> Result<()> {
        for (section, entries) in raw {
            for (key, value) in entries {
                self.apply_one(section, key, value)?;
            }
        }
        // Propagate the experiment seed into every stage config.
        self.dataset.synthetic.seed = self.seed;
        self.masking.seed = self.seed;
        self.gan.train.seed = self.seed;
        self.contrastive.seed = self.seed;
        Ok(())
    }

    fn apply_one(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || {
            Err(AmclError::InvalidConfig(format!(
                "unknown config key {section}.{key}"
            )))
        };
        match section {
            "pipeline" => match key {
                "seed" => self.seed = parse_value(section, key, value)?,
                "output_dir" => self.output_dir = PathBuf::from(value),
                _ => return unknown(),
            },
            "dataset" => match key {
                "source" => {
                    self.dataset.source = match value {
                        "synthetic" => DataSource::Synthetic,
                        "directory" => DataSource::Directory,
                        _ => {
                            return Err(AmclError::InvalidConfig(format!(
                                "dataset.source must be synthetic or directory, got {value:?}"
                            )))
                        }
                    }
                }
                "root" => self.dataset.root = Some(PathBuf::from(value)),
                "train_session" => self.dataset.train_session = parse_value(section, key, value)?,
                "num_classes" => {
                    self.dataset.synthetic.num_classes = parse_value(section, key, value)?
                }
                "images_per_class_per_session" => {
                    self.dataset.synthetic.images_per_class_per_session =
                        parse_value(section, key, value)?
                }
                "vessel_count_min" => {
                    self.dataset.synthetic.vessel_count_range.0 = parse_value(section, key, value)?
                }
                "vessel_count_max" => {
                    self.dataset.synthetic.vessel_count_range.1 = parse_value(section, key, value)?
                }
                "vessel_width_min" => {
                    self.dataset.synthetic.vessel_width_range.0 = parse_value(section, key, value)?
                }
                "vessel_width_max" => {
                    self.dataset.synthetic.vessel_width_range.1 = parse_value(section, key, value)?
                }
                "noise_level" => {
                    self.dataset.synthetic.noise_level = parse_value(section, key, value)?
                }
                "session_shift" => {
                    self.dataset.synthetic.session_shift = parse_value(section, key, value)?
                }
                _ => return unknown(),
            },
            "masking" => match key {
                "patch_size" => self.masking.patch_size = parse_value(section, key, value)?,
                "ratio_min" => self.masking.ratio_min = parse_value(section, key, value)?,
                "ratio_max" => self.masking.ratio_max = parse_value(section, key, value)?,
                "corpus_size" => self.masking.corpus_size = parse_value(section, key, value)?,
                _ => return unknown(),
            },
            "gan" => match key {
                "arch" => self.gan.arch = value.to_string(),
                "epochs" => self.gan.train.epochs = parse_value(section, key, value)?,
                "batch_size" => self.gan.train.batch_size = parse_value(section, key, value)?,
                "learning_rate" => {
                    self.gan.train.learning_rate = parse_value(section, key, value)?
                }
                "beta1" => self.gan.train.momentum_decay_pair.0 = parse_value(section, key, value)?,
                "beta2" => self.gan.train.momentum_decay_pair.1 = parse_value(section, key, value)?,
                "corpus_subsample" => self.gan.corpus_subsample = parse_value(section, key, value)?,
                _ => return unknown(),
            },
            "contrastive" => match key {
                "encoder" => self.contrastive.encoder_arch = value.to_string(),
                "batch_size" => self.contrastive.batch_size = parse_value(section, key, value)?,
                "temperature" => self.contrastive.temperature = parse_value(section, key, value)?,
                "lambda" => self.contrastive.lambda_reg = parse_value(section, key, value)?,
                "alpha" => self.contrastive.alpha = parse_value(section, key, value)?,
                "beta" => self.contrastive.beta = parse_value(section, key, value)?,
                "epochs" => self.contrastive.epochs = parse_value(section, key, value)?,
                "t1" => self.contrastive.t1 = parse_value(section, key, value)?,
                "t2" => self.contrastive.t2 = parse_value(section, key, value)?,
                "latent_set_size" => {
                    let k: usize = parse_value(section, key, value)?;
                    self.contrastive.latent_set_size = (k > 0).then_some(k);
                }
                "include_positive_in_denominator" => {
                    self.contrastive.include_positive_in_denominator =
                        parse_bool(section, key, value)?
                }
                "projection_head" => {
                    self.contrastive.projection_head = parse_bool(section, key, value)?
                }
                "mask_transform" => {
                    self.contrastive.mask_transform = match value {
                        "hard" => MaskTransform::Hard,
                        "soft" => MaskTransform::Soft,
                        _ => {
                            return Err(AmclError::InvalidConfig(format!(
                                "contrastive.mask_transform must be hard or soft, got {value:?}"
                            )))
                        }
                    }
                }
                "crop_scale_min" => {
                    self.contrastive.augmentation.crop_scale_range.0 =
                        parse_value(section, key, value)?
                }
                "crop_scale_max" => {
                    self.contrastive.augmentation.crop_scale_range.1 =
                        parse_value(section, key, value)?
                }
                "flip_prob" => {
                    self.contrastive.augmentation.flip_prob = parse_value(section, key, value)?
                }
                "jitter_strength" => {
                    self.contrastive.augmentation.jitter_strength =
                        parse_value(section, key, value)?
                }
                "blur_prob" => {
                    self.contrastive.augmentation.blur_prob = parse_value(section, key, value)?
                }
                "grayscale_prob" => {
                    self.contrastive.augmentation.grayscale_prob = parse_value(section, key, value)?
                }
                "pretrain_mode" => self.pretrain_mode = PretrainKind::parse(value)?,
                _ => return unknown(),
            },
            "evalkit" => match key {
                "finetune_epochs" => self.eval.finetune_epochs = parse_value(section, key, value)?,
                "finetune_lr" => self.eval.finetune_lr = parse_value(section, key, value)?,
                "finetune_from" => {
                    self.eval.finetune_from = match value {
                        "pretrained" => FinetuneFrom::Pretrained,
                        "scratch" => FinetuneFrom::Scratch,
                        _ => {
                            return Err(AmclError::InvalidConfig(format!(
                                "evalkit.finetune_from must be pretrained or scratch, got {value:?}"
                            )))
                        }
                    }
                }
                "matcher" => self.eval.matcher = Matcher::parse(value)?,
                "compare_modes" => {
                    self.eval.compare_modes = value
                        .split(',')
                        .map(|m| PretrainMode::parse(m.trim()))
                        .collect::<Result<Vec<_>>>()?
                }
                _ => return unknown(),
            },
            _ => {
                return Err(AmclError::InvalidConfig(format!(
                    "unknown config section [{section}]"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.source == DataSource::Directory && self.dataset.root.is_none() {
            return Err(AmclError::InvalidConfig(
                "dataset.source = directory requires dataset.root".into(),
            ));
        }
        if !(1..=2).contains(&self.dataset.train_session) {
            return Err(AmclError::InvalidConfig(
                "dataset.train_session must be 1 or 2".into(),
            ));
        }
        self.dataset.synthetic.validate()?;
        self.masking.validate()?;
        crate::gan::GanArchitecture::by_name(&self.gan.arch)?;
        self.gan.train.validate()?;
        if !ENCODER_ARCHITECTURES.contains(&self.contrastive.encoder_arch.as_str()) {
            return Err(AmclError::InvalidConfig(format!(
                "unknown encoder architecture {:?} (available: {})",
                self.contrastive.encoder_arch,
                ENCODER_ARCHITECTURES.join(", ")
            )));
        }
        self.contrastive.validate()?;
        if self.eval.finetune_lr <= 0.0 {
            return Err(AmclError::InvalidConfig(
                "evalkit.finetune_lr must be positive".into(),
            ));
        }
        if self.eval.compare_modes.is_empty() {
            return Err(AmclError::InvalidConfig(
                "evalkit.compare_modes must name at least one mode".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text: every key in a fixed order, defaults included.
    /// The config hash is the SHA-256 of this text, so it is stable under
    /// key reordering in the source file.
    pub fn canonical_text(&self) -> String {
        let aug = &self.contrastive.augmentation;
        let compare = self
            .eval
            .compare_modes
            .iter()
            .map(|m| m.as_str())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "[contrastive]\n\
             alpha = {}\nbatch_size = {}\nbeta = {}\nblur_prob = {}\n\
             crop_scale_max = {}\ncrop_scale_min = {}\nencoder = {}\nepochs = {}\n\
             flip_prob = {}\ngrayscale_prob = {}\ninclude_positive_in_denominator = {}\n\
             jitter_strength = {}\nlambda = {}\nlatent_set_size = {}\nmask_transform = {}\n\
             pretrain_mode = {}\nprojection_head = {}\nt1 = {}\nt2 = {}\ntemperature = {}\n\
             [dataset]\n\
             images_per_class_per_session = {}\nnoise_level = {}\nnum_classes = {}\n\
             root = {}\nsession_shift = {}\nsource = {}\ntrain_session = {}\nvessel_count_max = {}\n\
             vessel_count_min = {}\nvessel_width_max = {}\nvessel_width_min = {}\n\
             [evalkit]\n\
             compare_modes = {}\nfinetune_epochs = {}\nfinetune_from = {}\nfinetune_lr = {}\n\
             matcher = {:?}\n\
             [gan]\n\
             arch = {}\nbatch_size = {}\nbeta1 = {}\nbeta2 = {}\ncorpus_subsample = {}\n\
             epochs = {}\nlearning_rate = {}\n\
             [masking]\n\
             corpus_size = {}\npatch_size = {}\nratio_max = {}\nratio_min = {}\n\
             [pipeline]\nseed = {}\n",
            self.contrastive.alpha,
            self.contrastive.batch_size,
            self.contrastive.beta,
            aug.blur_prob,
            aug.crop_scale_range.1,
            aug.crop_scale_range.0,
            self.contrastive.encoder_arch,
            self.contrastive.epochs,
            aug.flip_prob,
            aug.grayscale_prob,
            self.contrastive.include_positive_in_denominator,
            aug.jitter_strength,
            self.contrastive.lambda_reg,
            self.contrastive.latent_set_size.unwrap_or(0),
            match self.contrastive.mask_transform {
                MaskTransform::Hard => "hard",
                MaskTransform::Soft => "soft",
            },
            self.pretrain_mode.as_str(),
            self.contrastive.projection_head,
            self.contrastive.t1,
            self.contrastive.t2,
            self.contrastive.temperature,
            self.dataset.synthetic.images_per_class_per_session,
            self.dataset.synthetic.noise_level,
            self.dataset.synthetic.num_classes,
            self.dataset
                .root
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            self.dataset.synthetic.session_shift,
            match self.dataset.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Directory => "directory",
            },
            self.dataset.train_session,
            self.dataset.synthetic.vessel_count_range.1,
            self.dataset.synthetic.vessel_count_range.0,
            self.dataset.synthetic.vessel_width_range.1,
            self.dataset.synthetic.vessel_width_range.0,
            compare,
            self.eval.finetune_epochs,
            match self.eval.finetune_from {
                FinetuneFrom::Pretrained => "pretrained",
                FinetuneFrom::Scratch => "scratch",
            },
            self.eval.finetune_lr,
            self.eval.matcher,
            self.gan.arch,
            self.gan.train.batch_size,
            self.gan.train.momentum_decay_pair.0,
            self.gan.train.momentum_decay_pair.1,
            self.gan.corpus_subsample,
            self.gan.train.epochs,
            self.gan.train.learning_rate,
            self.masking.corpus_size,
            self.masking.patch_size,
            self.masking.ratio_max,
            self.masking.ratio_min,
            self.seed,
        )
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_text().as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn file_and_overrides_are_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.ini");
        let mut f = fs::File::create(&path).unwrap();
        writeln!(f, "# comment\n[pipeline]\nseed = 7\n\n[contrastive]\nlambda = 0.25").unwrap();
        drop(f);

        let cfg = ExperimentConfig::load(
            Some(&path),
            &["contrastive.alpha=0.5".into(), "gan.epochs=2".into()],
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.contrastive.lambda_reg, 0.25);
        assert_eq!(cfg.contrastive.alpha, 0.5);
        assert_eq!(cfg.gan.train.epochs, 2);
        // The seed propagates into stage configs.
        assert_eq!(cfg.masking.seed, 7);
        assert_eq!(cfg.contrastive.seed, 7);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::load(None, &["pipeline.sed=3".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["nosection.key=3".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["contrastive.lambda=-1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["contrastive.lambda=abc".into()]).is_err());
    }

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ini");
        let b = dir.path().join("b.ini");
        fs::write(&a, "[contrastive]\nalpha = 0.5\nlambda = 0.25\n").unwrap();
        fs::write(&b, "[contrastive]\nlambda = 0.25\nalpha = 0.5\n").unwrap();
        let ca = ExperimentConfig::load(Some(&a), &[]).unwrap();
        let cb = ExperimentConfig::load(Some(&b), &[]).unwrap();
        assert_eq!(ca.hash(), cb.hash());

        let cc = ExperimentConfig::load(Some(&a), &["contrastive.alpha=0.6".into()]).unwrap();
        assert_ne!(ca.hash(), cc.hash());
    }

    #[test]
    fn output_dir_env_override_wins() {
        // Serialized by a lock in practice; this test sets and clears the
        // variable around the load.
        std::env::set_var("AMCL_OUTPUT_DIR", "/tmp/amcl-env-test");
        let cfg = ExperimentConfig::load(None, &[]).unwrap();
        std::env::remove_var("AMCL_OUTPUT_DIR");
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/amcl-env-test"));
    }
}
