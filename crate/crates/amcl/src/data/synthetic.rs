//! Procedural vein-like image generator for desk-scale experiments.
//!
//! Each class owns a fixed identity template: a handful of smooth dark
//! curvilinear strokes (anti-aliased quadratic Béziers) on a brighter,
//! slowly varying background. Per image the template is perturbed by a
//! small affine jitter, a brightness shift and additive noise; the two
//! capture sessions additionally differ by a larger global
//! brightness/contrast change, which is what makes the session split a
//! domain-shift benchmark.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use super::{DatasetSplit, Image, IMAGE_SIZE};
use crate::error::{AmclError, Result};
use crate::rng::stream;

/// Points sampled along each Bézier stroke when rasterizing.
const CURVE_SAMPLES: usize = 48;
/// Frame margin (pixels) that stroke control points keep clear.
const MARGIN: f64 = 6.0;

/// Configuration of the synthetic corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVeinConfig {
    pub num_classes: usize,
    pub images_per_class_per_session: usize,
    /// Inclusive range for the number of strokes per identity.
    pub vessel_count_range: (usize, usize),
    /// Stroke width range in pixels.
    pub vessel_width_range: (f64, f64),
    /// Standard deviation of the per-pixel additive noise.
    pub noise_level: f64,
    /// Strength of the global brightness/contrast change between capture
    /// sessions (0 disables the domain shift, 1 is the full canonical
    /// shift: brightness -0.10, contrast x0.85).
    pub session_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticVeinConfig {
    fn default() -> Self {
        SyntheticVeinConfig {
            num_classes: 20,
            images_per_class_per_session: 5,
            vessel_count_range: (3, 6),
            vessel_width_range: (1.5, 3.5),
            noise_level: 0.02,
            session_shift: 0.35,
            seed: 42,
        }
    }
}

impl SyntheticVeinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(AmclError::InvalidConfig(
                "num_classes must be >= 2: verification metrics are undefined without impostor pairs"
                    .into(),
            ));
        }
        if self.images_per_class_per_session == 0 {
            return Err(AmclError::InvalidConfig(
                "images_per_class_per_session must be positive".into(),
            ));
        }
        let (clo, chi) = self.vessel_count_range;
        if clo == 0 || clo > chi {
            return Err(AmclError::InvalidConfig(format!(
                "vessel_count_range ({clo}, {chi}) must be non-empty and positive"
            )));
        }
        let (wlo, whi) = self.vessel_width_range;
        if !(wlo > 0.0 && wlo <= whi) {
            return Err(AmclError::InvalidConfig(format!(
                "vessel_width_range ({wlo}, {whi}) must be non-empty and positive"
            )));
        }
        if self.noise_level < 0.0 {
            return Err(AmclError::InvalidConfig(
                "noise_level must be non-negative".into(),
            ));
        }
        if self.session_shift < 0.0 {
            return Err(AmclError::InvalidConfig(
                "session_shift must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Flat key-value serialization checked into experiment outputs.
    pub fn to_key_value(&self) -> String {
        format!(
            "num_classes = {}\nimages_per_class_per_session = {}\n\
             vessel_count_min = {}\nvessel_count_max = {}\n\
             vessel_width_min = {}\nvessel_width_max = {}\n\
             noise_level = {}\nsession_shift = {}\nseed = {}\n",
            self.num_classes,
            self.images_per_class_per_session,
            self.vessel_count_range.0,
            self.vessel_count_range.1,
            self.vessel_width_range.0,
            self.vessel_width_range.1,
            self.noise_level,
            self.session_shift,
            self.seed
        )
    }
}

/// One anti-aliased quadratic Bézier stroke.
#[derive(Debug, Clone)]
pub(crate) struct Stroke {
    pub p0: (f64, f64),
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    pub width: f64,
    /// Multiplicative darkening in (0, 1).
    pub depth: f64,
}

/// The fixed identity template of a class.
#[derive(Debug, Clone)]
pub(crate) struct ClassTemplate {
    pub strokes: Vec<Stroke>,
    pub bg_base: f64,
    pub bg_amp: f64,
    pub bg_freq: (f64, f64),
    pub bg_phase: f64,
}

/// Per-image perturbation parameters.
#[derive(Debug, Clone)]
pub(crate) struct Jitter {
    pub rot: f64,
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
    pub brightness: f64,
}

/// Per-image global session effect.
#[derive(Debug, Clone)]
pub(crate) struct SessionEffect {
    pub brightness: f64,
    pub contrast: f64,
}

pub(crate) fn class_template(cfg: &SyntheticVeinConfig, class: usize) -> ClassTemplate {
    let mut rng = stream(cfg.seed, &format!("synth:template:{class}"));
    let n = rng.random_range(cfg.vessel_count_range.0..=cfg.vessel_count_range.1);
    let side = IMAGE_SIZE as f64;
    let pt = |rng: &mut ChaCha8Rng| {
        (
            rng.random_range(MARGIN..side - MARGIN),
            rng.random_range(MARGIN..side - MARGIN),
        )
    };
    let strokes = (0..n)
        .map(|_| Stroke {
            p0: pt(&mut rng),
            p1: pt(&mut rng),
            p2: pt(&mut rng),
            width: rng.random_range(cfg.vessel_width_range.0..=cfg.vessel_width_range.1),
            depth: rng.random_range(0.45..0.75),
        })
        .collect();
    ClassTemplate {
        strokes,
        bg_base: rng.random_range(0.78..0.86),
        bg_amp: rng.random_range(0.02..0.05),
        bg_freq: (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5)),
        bg_phase: rng.random_range(0.0..std::f64::consts::TAU),
    }
}

pub(crate) fn sample_jitter(rng: &mut ChaCha8Rng) -> Jitter {
    Jitter {
        rot: rng.random_range(-0.06..0.06),
        scale: rng.random_range(0.96..1.04),
        dx: rng.random_range(-1.5..1.5),
        dy: rng.random_range(-1.5..1.5),
        brightness: rng.random_range(-0.03..0.03),
    }
}

pub(crate) fn sample_session_effect(session: u8, shift: f64, rng: &mut ChaCha8Rng) -> SessionEffect {
    let normal = Normal::new(0.0, 1.0).unwrap();
    if session == 1 {
        SessionEffect {
            brightness: 0.015 * rng.sample::<f64, _>(normal),
            contrast: 1.0 + 0.02 * rng.sample::<f64, _>(normal),
        }
    } else {
        SessionEffect {
            brightness: -0.10 * shift + 0.015 * rng.sample::<f64, _>(normal),
            contrast: 1.0 - 0.15 * shift + 0.02 * rng.sample::<f64, _>(normal),
        }
    }
}

fn transform(p: (f64, f64), j: &Jitter) -> (f64, f64) {
    let c = IMAGE_SIZE as f64 / 2.0;
    let (sin, cos) = j.rot.sin_cos();
    let (x, y) = (p.0 - c, p.1 - c);
    (
        c + j.scale * (cos * x - sin * y) + j.dx,
        c + j.scale * (sin * x + cos * y) + j.dy,
    )
}

fn dist_point_segment(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let len2 = abx * abx + aby * aby;
    let t = if len2 > 0.0 {
        (((px - a.0) * abx + (py - a.1) * aby) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * abx, a.1 + t * aby);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render one image from its template and perturbation parameters.
///
/// `noise_rng` is consumed only when `noise_level > 0`, so noise-free
/// renders are a pure function of the other arguments.
pub(crate) fn render(
    template: &ClassTemplate,
    jitter: &Jitter,
    effect: &SessionEffect,
    noise_level: f64,
    noise_rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let side = IMAGE_SIZE as f64;
    let mut img = Array2::<f64>::zeros((IMAGE_SIZE, IMAGE_SIZE));

    // Background.
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let arg = std::f64::consts::TAU
                * (template.bg_freq.0 * x as f64 / side + template.bg_freq.1 * y as f64 / side)
                + template.bg_phase;
            img[[y, x]] = template.bg_base + template.bg_amp * arg.cos();
        }
    }

    // Strokes, control points moved by the affine jitter.
    for stroke in &template.strokes {
        let p0 = transform(stroke.p0, jitter);
        let p1 = transform(stroke.p1, jitter);
        let p2 = transform(stroke.p2, jitter);
        let pts: Vec<(f64, f64)> = (0..=CURVE_SAMPLES)
            .map(|i| {
                let t = i as f64 / CURVE_SAMPLES as f64;
                let u = 1.0 - t;
                (
                    u * u * p0.0 + 2.0 * u * t * p1.0 + t * t * p2.0,
                    u * u * p0.1 + 2.0 * u * t * p1.1 + t * t * p2.1,
                )
            })
            .collect();
        let half = stroke.width * jitter.scale / 2.0;
        let reach = half + 1.0;
        for y in 0..IMAGE_SIZE {
            for x in 0..IMAGE_SIZE {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut d = f64::MAX;
                for seg in pts.windows(2) {
                    d = d.min(dist_point_segment(px, py, seg[0], seg[1]));
                    if d <= 0.0 {
                        break;
                    }
                }
                if d < reach {
                    let cov = (half + 0.5 - d).clamp(0.0, 1.0);
                    img[[y, x]] *= 1.0 - stroke.depth * cov;
                }
            }
        }
    }

    // Per-image brightness, session contrast/brightness, then noise.
    let total_b = jitter.brightness + effect.brightness;
    img.mapv_inplace(|v| (v - 0.5) * effect.contrast + 0.5 + total_b);
    if noise_level > 0.0 {
        let normal = Normal::new(0.0, noise_level).unwrap();
        img.mapv_inplace(|v| v + noise_rng.sample::<f64, _>(normal));
    }
    img.mapv_inplace(|v| v.clamp(0.0, 1.0));
    img
}

/// Generate a deterministic synthetic split: session 1 → train, session 2 →
/// test.
pub fn generate_synthetic_dataset(cfg: &SyntheticVeinConfig) -> Result<DatasetSplit> {
    cfg.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..cfg.num_classes {
        let template = class_template(cfg, class);
        for session in 1..=2u8 {
            for idx in 0..cfg.images_per_class_per_session {
                let mut rng = stream(cfg.seed, &format!("synth:img:{class}:{session}:{idx}"));
                let jitter = sample_jitter(&mut rng);
                let effect = sample_session_effect(session, cfg.session_shift, &mut rng);
                let pixels = render(&template, &jitter, &effect, cfg.noise_level, &mut rng);
                let img = Image::new(pixels, class, session)?;
                if session == 1 {
                    train.push(img);
                } else {
                    test.push(img);
                }
            }
        }
    }
    let split = DatasetSplit {
        train,
        test,
        num_classes: cfg.num_classes,
    };
    split.validate()?;
    Ok(split)
}
