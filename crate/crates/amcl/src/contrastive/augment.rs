//! Classical augmentation pipeline producing two views per image.

use ndarray::{s, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::resize::resize_area;
use crate::data::{Image, IMAGE_SIZE};
use crate::error::{AmclError, Result};
use crate::masking::{apply_mask, Mask};

/// Augmentation knobs. The pipeline is grayscale throughout, so the random
/// grayscale conversion of the usual recipe is an identity here and
/// `grayscale_prob` is kept only for interface parity.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPolicy {
    /// Random-crop side fraction, within (0, 1].
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Scales the brightness/contrast jitter amplitude (0 disables).
    pub jitter_strength: f64,
    pub blur_prob: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        AugmentationPolicy {
            crop_scale_range: (0.8, 1.0),
            flip_prob: 0.5,
            jitter_strength: 0.5,
            blur_prob: 0.0,
            grayscale_prob: 0.0,
        }
    }
}

impl AugmentationPolicy {
    /// A policy that maps every image to itself.
    pub fn identity() -> Self {
        AugmentationPolicy {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_strength: 0.0,
            blur_prob: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(AmclError::InvalidConfig(format!(
                "crop_scale_range ({lo}, {hi}) must lie within (0, 1]"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("blur_prob", self.blur_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AmclError::InvalidConfig(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if self.jitter_strength < 0.0 {
            return Err(AmclError::InvalidConfig(
                "jitter_strength must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn horizontal_mirror(p: &Array2<f64>) -> Array2<f64> {
    p.slice(s![.., ..;-1]).to_owned()
}

fn gaussian_blur3(p: &Array2<f64>) -> Array2<f64> {
    let (h, w) = p.dim();
    let clamp = |v: isize, max: usize| v.clamp(0, max as isize - 1) as usize;
    let kernel = [1.0, 2.0, 1.0];
    // Separable 3x3 binomial with replicated edges.
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * p[[y, clamp(x as isize + i as isize - 1, w)]];
            }
            tmp[[y, x]] = acc / 4.0;
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                acc += k * tmp[[clamp(y as isize + i as isize - 1, h), x]];
            }
            out[[y, x]] = acc / 4.0;
        }
    }
    out
}

/// Apply one random augmentation draw to one image.
pub fn augment_pixels(
    pixels: &Array2<f64>,
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    let side = IMAGE_SIZE;
    let mut out = pixels.clone();

    // Random resized crop (covers the scaling augmentation).
    let (lo, hi) = policy.crop_scale_range;
    let scale = if lo == hi { lo } else { rng.random_range(lo..hi) };
    let crop_side = ((side as f64 * scale).round() as usize).clamp(1, side);
    if crop_side < side {
        let y0 = rng.random_range(0..=side - crop_side);
        let x0 = rng.random_range(0..=side - crop_side);
        let crop = out.slice(s![y0..y0 + crop_side, x0..x0 + crop_side]).to_owned();
        out = resize_area(&crop, side, side);
    }

    if policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob) {
        out = horizontal_mirror(&out);
    }

    if policy.jitter_strength > 0.0 {
        let amp = 0.3 * policy.jitter_strength;
        let brightness = rng.random_range(-amp..amp);
        let contrast = rng.random_range(1.0 - amp..1.0 + amp);
        out.mapv_inplace(|v| (((v - 0.5) * contrast + 0.5) + brightness).clamp(0.0, 1.0));
    }

    if policy.blur_prob > 0.0 && rng.random_bool(policy.blur_prob) {
        out = gaussian_blur3(&out);
    }

    // grayscale_prob: inputs are already single-channel; nothing to do.
    out
}

/// A minibatch with two augmented views per original, plus the optional
/// masked variant of view A.
///
/// Positive pair for index i: (`view_a_masked[i]` when present, otherwise
/// `view_a[i]`) against `view_b[i]`; any cross-index pairing is negative.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub originals: Vec<Image>,
    pub view_a: Vec<Image>,
    pub view_b: Vec<Image>,
    pub view_a_masked: Option<Vec<Image>>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.originals.len();
        if self.view_a.len() != n || self.view_b.len() != n {
            return Err(AmclError::ShapeMismatch(format!(
                "view batch misaligned: {n} originals, {} view_a, {} view_b",
                self.view_a.len(),
                self.view_b.len()
            )));
        }
        if let Some(masked) = &self.view_a_masked {
            if masked.len() != n {
                return Err(AmclError::ShapeMismatch(format!(
                    "view batch misaligned: {n} originals, {} masked views",
                    masked.len()
                )));
            }
        }
        Ok(())
    }

    /// The anchor views: masked when available, plain view A otherwise.
    pub fn anchors(&self) -> &[Image] {
        self.view_a_masked.as_deref().unwrap_or(&self.view_a)
    }

    /// Attach masked anchors built by the Hadamard product of view A with
    /// the given masks.
    pub fn with_masks(mut self, masks: &[Mask]) -> Result<ViewBatch> {
        if masks.len() != self.view_a.len() {
            return Err(AmclError::ShapeMismatch(format!(
                "{} masks for {} views",
                masks.len(),
                self.view_a.len()
            )));
        }
        let masked = self
            .view_a
            .iter()
            .zip(masks)
            .map(|(img, m)| apply_mask(img, m))
            .collect::<Result<Vec<_>>>()?;
        self.view_a_masked = Some(masked);
        Ok(self)
    }
}

/// Draw two independent augmentations of every image.
pub fn augment_views(
    batch: &[Image],
    policy: &AugmentationPolicy,
    rng: &mut ChaCha8Rng,
) -> Result<ViewBatch> {
    policy.validate()?;
    let mut view_a = Vec::with_capacity(batch.len());
    let mut view_b = Vec::with_capacity(batch.len());
    for img in batch {
        let a = augment_pixels(&img.pixels, policy, rng);
        let b = augment_pixels(&img.pixels, policy, rng);
        view_a.push(Image {
            pixels: a,
            class_id: img.class_id,
            session_id: img.session_id,
        });
        view_b.push(Image {
            pixels: b,
            class_id: img.class_id,
            session_id: img.session_id,
        });
    }
    let out = ViewBatch {
        originals: batch.to_vec(),
        view_a,
        view_b,
        view_a_masked: None,
    };
    out.validate()?;
    Ok(out)
}
