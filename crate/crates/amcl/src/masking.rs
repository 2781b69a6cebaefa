//! Patch-aligned binary masks: the corpus the GAN learns from, plus mask
//! application by Hadamard product.
//!
//! Polarity: 1 = keep, 0 = occlude, so multiplying by the mask zeroes the
//! occluded pixels. Sampled masks are constant on an aligned `patch_size`
//! grid; generator-produced masks carry `patch_size = 1` because the GAN is
//! not constrained to the grid.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Image, IMAGE_SIZE};
use crate::error::{AmclError, Result};
use crate::rng::stream;

/// A binary occlusion grid over a 64×64 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    /// 64×64 entries in {0, 1}; 1 = keep, 0 = occlude.
    pub grid: Array2<u8>,
    /// Sampling grid pitch; 1 for masks without alignment guarantees.
    pub patch_size: usize,
    /// Occluded fraction, exactly zeros / 4096.
    pub ratio: f64,
}

impl Mask {
    pub fn from_grid(grid: Array2<u8>, patch_size: usize) -> Result<Self> {
        if grid.dim() != (IMAGE_SIZE, IMAGE_SIZE) {
            return Err(AmclError::ShapeMismatch(format!(
                "mask must be {IMAGE_SIZE}x{IMAGE_SIZE}, got {:?}",
                grid.dim()
            )));
        }
        if !grid.iter().all(|v| *v <= 1) {
            return Err(AmclError::InvalidConfig("mask entries must be 0 or 1".into()));
        }
        if patch_size == 0 || IMAGE_SIZE % patch_size != 0 {
            return Err(AmclError::InvalidConfig(format!(
                "patch_size {patch_size} must divide {IMAGE_SIZE}"
            )));
        }
        let zeros = grid.iter().filter(|v| **v == 0).count();
        let ratio = zeros as f64 / (IMAGE_SIZE * IMAGE_SIZE) as f64;
        Ok(Mask {
            grid,
            patch_size,
            ratio,
        })
    }

    /// Build a 64×64 mask from its patch bitmap (1 = keep).
    pub fn from_patch_bitmap(bits: &Array2<u8>, patch_size: usize) -> Result<Self> {
        let p = IMAGE_SIZE / patch_size;
        if bits.dim() != (p, p) {
            return Err(AmclError::ShapeMismatch(format!(
                "patch bitmap must be {p}x{p} for patch_size {patch_size}"
            )));
        }
        let grid = Array2::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE), |(y, x)| {
            bits[[y / patch_size, x / patch_size]]
        });
        Mask::from_grid(grid, patch_size)
    }

    /// Per-patch bitmap, valid only when the mask is patch-aligned.
    pub fn patch_bitmap(&self) -> Result<Array2<u8>> {
        if !self.is_patch_aligned() {
            return Err(AmclError::InvalidConfig(
                "mask is not constant on its patch grid".into(),
            ));
        }
        let p = IMAGE_SIZE / self.patch_size;
        Ok(Array2::from_shape_fn((p, p), |(by, bx)| {
            self.grid[[by * self.patch_size, bx * self.patch_size]]
        }))
    }

    /// True when every aligned `patch_size` block is constant.
    pub fn is_patch_aligned(&self) -> bool {
        let s = self.patch_size;
        let p = IMAGE_SIZE / s;
        for by in 0..p {
            for bx in 0..p {
                let v = self.grid[[by * s, bx * s]];
                for y in 0..s {
                    for x in 0..s {
                        if self.grid[[by * s + y, bx * s + x]] != v {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }

    /// Number of occluded patches (requires alignment).
    pub fn occluded_patches(&self) -> Result<usize> {
        Ok(self.patch_bitmap()?.iter().filter(|v| **v == 0).count())
    }

    /// The mask as an f64 field in {0, 1}.
    pub fn as_field(&self) -> Array2<f64> {
        self.grid.mapv(|v| v as f64)
    }

    /// The mask encoded to {-1, +1} for GAN training against tanh outputs.
    pub fn as_pm1_field(&self) -> Array2<f64> {
        self.grid.mapv(|v| if v == 1 { 1.0 } else { -1.0 })
    }
}

/// Sampler configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSamplerConfig {
    pub patch_size: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub corpus_size: usize,
    pub seed: u64,
}

impl Default for MaskSamplerConfig {
    fn default() -> Self {
        MaskSamplerConfig {
            patch_size: 16,
            ratio_min: 0.20,
            ratio_max: 0.80,
            corpus_size: 100_000,
            seed: 42,
        }
    }
}

impl MaskSamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || IMAGE_SIZE % self.patch_size != 0 {
            return Err(AmclError::InvalidConfig(format!(
                "patch_size {} must divide {IMAGE_SIZE}",
                self.patch_size
            )));
        }
        if !(0.0 <= self.ratio_min && self.ratio_min <= self.ratio_max && self.ratio_max <= 1.0) {
            return Err(AmclError::InvalidConfig(format!(
                "need 0 <= ratio_min <= ratio_max <= 1, got ({}, {})",
                self.ratio_min, self.ratio_max
            )));
        }
        if self.corpus_size == 0 {
            return Err(AmclError::InvalidConfig("corpus_size must be positive".into()));
        }
        Ok(())
    }
}

fn round_half_up(v: f64) -> usize {
    (v + 0.5).floor() as usize
}

/// Draw one mask: ratio r ~ U[ratio_min, ratio_max], then round(r·P²)
/// patches occluded uniformly without replacement.
pub fn sample_mask(cfg: &MaskSamplerConfig, rng: &mut ChaCha8Rng) -> Result<Mask> {
    cfg.validate()?;
    let p = IMAGE_SIZE / cfg.patch_size;
    let total = p * p;
    let r = if cfg.ratio_min == cfg.ratio_max {
        cfg.ratio_min
    } else {
        rng.random_range(cfg.ratio_min..cfg.ratio_max)
    };
    let k = round_half_up(r * total as f64).min(total);
    let mut bits = Array2::<u8>::ones((p, p));
    for idx in rand::seq::index::sample(rng, total, k) {
        bits[[idx / p, idx % p]] = 0;
    }
    Mask::from_patch_bitmap(&bits, cfg.patch_size)
}

/// Sample the whole corpus deterministically from the config seed.
pub fn build_mask_corpus(cfg: &MaskSamplerConfig) -> Result<Vec<Mask>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "mask-corpus");
    (0..cfg.corpus_size).map(|_| sample_mask(cfg, &mut rng)).collect()
}

/// Analytic distribution of occluded-patch counts: the push-forward of
/// U[ratio_min, ratio_max] through k = round(r·P²). Returns (k, probability)
/// for every k with non-zero mass.
pub fn occlusion_count_distribution(cfg: &MaskSamplerConfig) -> Vec<(usize, f64)> {
    let p = IMAGE_SIZE / cfg.patch_size;
    let total = (p * p) as f64;
    let width = cfg.ratio_max - cfg.ratio_min;
    let mut out = Vec::new();
    if width <= 0.0 {
        out.push((round_half_up(cfg.ratio_min * total).min(p * p), 1.0));
        return out;
    }
    let k_lo = round_half_up(cfg.ratio_min * total);
    let k_hi = round_half_up(cfg.ratio_max * total).min(p * p);
    for k in k_lo..=k_hi {
        // round(r*total) = k on r in [(k-0.5)/total, (k+0.5)/total)
        let lo = ((k as f64 - 0.5) / total).max(cfg.ratio_min);
        let hi = ((k as f64 + 0.5) / total).min(cfg.ratio_max);
        if hi > lo {
            out.push((k, (hi - lo) / width));
        }
    }
    out
}

const CORPUS_MAGIC: &str = "AMCL-MASKS v1";

/// Persist a corpus: header `AMCL-MASKS v1 <patch_size> <count>`, then one
/// hex-encoded P×P patch bitmap per line (row-major, MSB first, 1 = keep).
pub fn save_mask_corpus(path: &Path, masks: &[Mask], patch_size: usize) -> Result<()> {
    let p = IMAGE_SIZE / patch_size;
    let digits = (p * p).div_ceil(4);
    let mut out = String::with_capacity(masks.len() * (digits + 1) + 32);
    out.push_str(&format!("{CORPUS_MAGIC} {patch_size} {}\n", masks.len()));
    for mask in masks {
        if mask.patch_size != patch_size {
            return Err(AmclError::InvalidConfig(format!(
                "corpus is declared patch_size {patch_size} but contains a {}-pitch mask",
                mask.patch_size
            )));
        }
        let bits = mask.patch_bitmap()?;
        let mut nibble = 0u8;
        let mut filled = 0;
        let mut line = String::with_capacity(digits);
        for v in bits.iter() {
            nibble = (nibble << 1) | v;
            filled += 1;
            if filled == 4 {
                line.push(char::from_digit(nibble as u32, 16).unwrap());
                nibble = 0;
                filled = 0;
            }
        }
        if filled > 0 {
            nibble <<= 4 - filled;
            line.push(char::from_digit(nibble as u32, 16).unwrap());
        }
        out.push_str(&line);
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| AmclError::io(parent, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| AmclError::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| AmclError::io(path, e))?;
    Ok(())
}

/// Load a corpus saved by [`save_mask_corpus`].
pub fn load_mask_corpus(path: &Path) -> Result<Vec<Mask>> {
    let corrupt = |reason: String| AmclError::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| AmclError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| corrupt("empty file".into()))?
        .map_err(|e| AmclError::io(path, e))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 4 || parts[0] != "AMCL-MASKS" || parts[1] != "v1" {
        return Err(corrupt(format!("bad header {header:?}")));
    }
    let patch_size: usize = parts[2]
        .parse()
        .map_err(|_| corrupt(format!("bad patch size {:?}", parts[2])))?;
    let count: usize = parts[3]
        .parse()
        .map_err(|_| corrupt(format!("bad count {:?}", parts[3])))?;
    if patch_size == 0 || IMAGE_SIZE % patch_size != 0 {
        return Err(corrupt(format!(
            "patch size {patch_size} does not divide {IMAGE_SIZE}"
        )));
    }
    let p = IMAGE_SIZE / patch_size;
    let digits = (p * p).div_ceil(4);

    let mut masks = Vec::with_capacity(count);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| AmclError::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        if line.len() != digits {
            return Err(corrupt(format!(
                "record {i} has {} hex digits, expected {digits}",
                line.len()
            )));
        }
        let mut bits = Array2::<u8>::zeros((p, p));
        for (d, ch) in line.chars().enumerate() {
            let nibble = ch
                .to_digit(16)
                .ok_or_else(|| corrupt(format!("record {i}: bad hex digit {ch:?}")))?
                as u8;
            for b in 0..4 {
                let bit_idx = d * 4 + b;
                if bit_idx < p * p {
                    bits[[bit_idx / p, bit_idx % p]] = (nibble >> (3 - b)) & 1;
                }
            }
        }
        masks.push(Mask::from_patch_bitmap(&bits, patch_size)?);
    }
    if masks.len() != count {
        return Err(corrupt(format!(
            "header declares {count} masks, found {}",
            masks.len()
        )));
    }
    Ok(masks)
}

/// Hadamard product of an image and a mask; labels are preserved.
pub fn apply_mask(x: &Image, m: &Mask) -> Result<Image> {
    if x.pixels.dim() != m.grid.dim() {
        return Err(AmclError::ShapeMismatch(format!(
            "image {:?} vs mask {:?}",
            x.pixels.dim(),
            m.grid.dim()
        )));
    }
    let mut pixels = x.pixels.clone();
    pixels.zip_mut_with(&m.grid, |p, v| *p *= *v as f64);
    Ok(Image {
        pixels,
        class_id: x.class_id,
        session_id: x.session_id,
    })
}

/// Majority-vote snap of an arbitrary mask onto an aligned patch grid.
/// Ties occlude (strictly more than half the block must be kept to keep).
pub fn snap_to_grid(mask: &Mask, patch_size: usize) -> Result<Mask> {
    if patch_size == 0 || IMAGE_SIZE % patch_size != 0 {
        return Err(AmclError::InvalidConfig(format!(
            "patch_size {patch_size} must divide {IMAGE_SIZE}"
        )));
    }
    let p = IMAGE_SIZE / patch_size;
    let block = (patch_size * patch_size) as u32;
    let mut bits = Array2::<u8>::zeros((p, p));
    for by in 0..p {
        for bx in 0..p {
            let mut keep = 0u32;
            for y in 0..patch_size {
                for x in 0..patch_size {
                    keep += mask.grid[[by * patch_size + y, bx * patch_size + x]] as u32;
                }
            }
            bits[[by, bx]] = u8::from(keep * 2 > block);
        }
    }
    Mask::from_patch_bitmap(&bits, patch_size)
}
