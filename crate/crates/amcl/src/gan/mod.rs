//! The mask-distribution GAN: a DCGAN-style generator/discriminator pair
//! trained on the sampled mask corpus, plus mask synthesis from latent
//! vectors.
//!
//! The canonical architecture (`GanArchitecture::paper`) is a 5-layer
//! transposed-convolution generator (128 → 2048 → 1024 → 512 → 256 → 1
//! channels, 1×1 → 64×64 spatial) and a 4-layer convolution discriminator
//! (1 → 32 → 64 → 128 → 1, 64×64 → 1×1). It is far too wide to *train* on
//! two CPU cores, so the pipeline defaults to a proportionally narrower
//! `desk` preset with the same depth, strides and activations; the canonical
//! preset remains available for shape audits and GPU-class machines.

pub mod train;

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{AmclError, Result};
use crate::masking::Mask;
use crate::nn::ckpt::{checkpoint_net, restore_net, Checkpoint};
use crate::nn::{ActKind, Activation, BatchNorm2d, Conv2d, ConvTranspose2d, Mode, Net, Param, WeightInit};

pub use train::{train_gan, write_gan_loss_csv, GanEpochLoss, GanTrainConfig};

pub type Arr4 = Array4<f64>;

/// One convolutional stage of either network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    fn new(out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        ConvSpec {
            out_channels,
            kernel,
            stride,
            pad,
        }
    }
}

/// Layer plan for the GAN pair. `gen_leaky_slope = None` means plain
/// rectification in the generator; the discriminator defaults to leaky
/// rectification with slope 0.2. Both are overridable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanArchitecture {
    pub id: String,
    pub latent_dim: usize,
    pub image_size: usize,
    pub gen_layers: Vec<ConvSpec>,
    pub disc_layers: Vec<ConvSpec>,
    pub gen_leaky_slope: Option<f64>,
    pub disc_leaky_slope: Option<f64>,
}

impl GanArchitecture {
    /// The canonical full-width architecture.
    pub fn paper() -> Self {
        GanArchitecture {
            id: "paper-64".into(),
            latent_dim: 128,
            image_size: 64,
            gen_layers: vec![
                ConvSpec::new(2048, 4, 1, 0),
                ConvSpec::new(1024, 4, 2, 1),
                ConvSpec::new(512, 4, 2, 1),
                ConvSpec::new(256, 4, 2, 1),
                ConvSpec::new(1, 4, 2, 1),
            ],
            disc_layers: vec![
                ConvSpec::new(32, 8, 4, 2),
                ConvSpec::new(64, 4, 2, 1),
                ConvSpec::new(128, 4, 2, 1),
                ConvSpec::new(1, 4, 1, 0),
            ],
            gen_leaky_slope: None,
            disc_leaky_slope: Some(0.2),
        }
    }

    /// Narrow preset with identical depth/strides for CPU-scale training.
    pub fn desk() -> Self {
        GanArchitecture {
            id: "desk-64".into(),
            latent_dim: 128,
            image_size: 64,
            gen_layers: vec![
                ConvSpec::new(128, 4, 1, 0),
                ConvSpec::new(64, 4, 2, 1),
                ConvSpec::new(32, 4, 2, 1),
                ConvSpec::new(16, 4, 2, 1),
                ConvSpec::new(1, 4, 2, 1),
            ],
            disc_layers: vec![
                ConvSpec::new(16, 8, 4, 2),
                ConvSpec::new(32, 4, 2, 1),
                ConvSpec::new(64, 4, 2, 1),
                ConvSpec::new(1, 4, 1, 0),
            ],
            gen_leaky_slope: None,
            disc_leaky_slope: Some(0.2),
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "paper" | "paper-64" => Ok(Self::paper()),
            "desk" | "desk-64" => Ok(Self::desk()),
            other => Err(AmclError::InvalidConfig(format!(
                "unknown gan architecture {other:?} (available: paper, desk)"
            ))),
        }
    }

    /// Per-layer generator output shapes (c, h, w), ending at the image.
    pub fn gen_output_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut h = 1;
        let mut shapes = Vec::new();
        for spec in &self.gen_layers {
            h = (h - 1) * spec.stride + spec.kernel - 2 * spec.pad;
            shapes.push((spec.out_channels, h, h));
        }
        shapes
    }

    /// Per-layer discriminator output shapes (c, h, w), ending at 1×1×1.
    pub fn disc_output_shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut h = self.image_size;
        let mut shapes = Vec::new();
        for spec in &self.disc_layers {
            h = (h + 2 * spec.pad - spec.kernel) / spec.stride + 1;
            shapes.push((spec.out_channels, h, h));
        }
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(AmclError::InvalidConfig("latent_dim must be positive".into()));
        }
        let gen = self.gen_output_shapes();
        match gen.last() {
            Some(&(1, h, w)) if h == self.image_size && w == self.image_size => {}
            other => {
                return Err(AmclError::InvalidConfig(format!(
                    "generator stack ends at {other:?}, expected (1, {s}, {s})",
                    s = self.image_size
                )))
            }
        }
        let disc = self.disc_output_shapes();
        match disc.last() {
            Some(&(1, 1, 1)) => {}
            other => {
                return Err(AmclError::InvalidConfig(format!(
                    "discriminator stack ends at {other:?}, expected (1, 1, 1)"
                )))
            }
        }
        Ok(())
    }
}

/// A single generator input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVariable {
    pub vector: Array1<f64>,
}

impl LatentVariable {
    pub fn new(vector: Array1<f64>) -> Self {
        LatentVariable { vector }
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Draw `count` standard-normal latent vectors.
pub fn sample_latents(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<LatentVariable> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..count)
        .map(|_| LatentVariable::new(Array1::from_shape_fn(dim, |_| rng.sample(normal))))
        .collect()
}

/// Stack latent vectors into an (n, dim) batch.
pub fn latent_batch(zs: &[LatentVariable]) -> Result<Array2<f64>> {
    let dim = zs
        .first()
        .map(|z| z.dim())
        .ok_or_else(|| AmclError::InvalidConfig("empty latent batch".into()))?;
    let mut out = Array2::zeros((zs.len(), dim));
    for (i, z) in zs.iter().enumerate() {
        if z.dim() != dim {
            return Err(AmclError::ShapeMismatch(format!(
                "latent {i} has dim {}, expected {dim}",
                z.dim()
            )));
        }
        out.row_mut(i).assign(&z.vector);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
struct GenBlock {
    convt: ConvTranspose2d,
    bn: Option<BatchNorm2d>,
    act: Activation,
}

/// The mask generator G.
#[derive(Debug, Clone)]
pub struct MaskGenerator {
    pub arch: GanArchitecture,
    blocks: Vec<GenBlock>,
}

impl MaskGenerator {
    pub fn new(arch: &GanArchitecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.gen_layers.len());
        let mut in_ch = arch.latent_dim;
        let last = arch.gen_layers.len() - 1;
        for (i, spec) in arch.gen_layers.iter().enumerate() {
            let name = format!("gen.{i}");
            let convt = ConvTranspose2d::new(
                &name,
                in_ch,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                spec.pad,
                i == last,
                WeightInit::Normal(0.02),
                rng,
            );
            let (bn, act) = if i == last {
                (None, Activation::new(ActKind::Tanh))
            } else {
                let mut bn = BatchNorm2d::new(&format!("{name}.bn"), spec.out_channels);
                bn.init_dcgan(rng);
                let kind = match arch.gen_leaky_slope {
                    Some(slope) => ActKind::LeakyRelu(slope),
                    None => ActKind::Relu,
                };
                (Some(bn), Activation::new(kind))
            };
            blocks.push(GenBlock { convt, bn, act });
            in_ch = spec.out_channels;
        }
        Ok(MaskGenerator {
            arch: arch.clone(),
            blocks,
        })
    }

    /// Map an (n, latent_dim) batch to (n, 1, size, size) fields in [-1, 1].
    pub fn forward(&mut self, z: &Array2<f64>, mode: Mode) -> Result<Arr4> {
        Ok(self.forward_traced(z, mode)?.0)
    }

    /// Forward pass that additionally records each block's output shape.
    pub fn forward_traced(
        &mut self,
        z: &Array2<f64>,
        mode: Mode,
    ) -> Result<(Arr4, Vec<(usize, usize, usize)>)> {
        let (n, dim) = z.dim();
        if dim != self.arch.latent_dim {
            return Err(AmclError::ShapeMismatch(format!(
                "latent batch has dim {dim}, generator expects {}",
                self.arch.latent_dim
            )));
        }
        let mut x = z
            .clone()
            .into_shape_with_order((n, dim, 1, 1))
            .expect("latent batch is contiguous");
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            x = block.convt.forward(x);
            if let Some(bn) = &mut block.bn {
                x = bn.forward(x, mode);
            }
            x = block.act.forward(x);
            let (_, c, h, w) = x.dim();
            shapes.push((c, h, w));
        }
        Ok((x, shapes))
    }

    /// Backpropagate to the latent batch: returns (n, latent_dim) gradients.
    pub fn backward(&mut self, dy: &Arr4) -> Array2<f64> {
        let mut grad = dy.clone();
        for block in self.blocks.iter_mut().rev() {
            grad = block.act.backward(&grad);
            if let Some(bn) = &mut block.bn {
                grad = bn.backward(&grad);
            }
            grad = block.convt.backward(&grad);
        }
        let (n, c, _, _) = grad.dim();
        grad.into_shape_with_order((n, c))
            .expect("latent gradient is contiguous")
    }

    /// Zero the final layer (weights and bias); the output becomes tanh(0).
    pub fn zero_final_layer(&mut self) {
        let block = self.blocks.last_mut().unwrap();
        block.convt.w.value.fill(0.0);
        if let Some(b) = &mut block.convt.b {
            b.value.fill(0.0);
        }
    }
}

impl Net for MaskGenerator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for block in &mut self.blocks {
            block.convt.visit_params(f);
            if let Some(bn) = &mut block.bn {
                bn.visit_params(f);
            }
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        for block in &mut self.blocks {
            if let Some(bn) = &mut block.bn {
                bn.visit_buffers(f);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DiscBlock {
    conv: Conv2d,
    bn: Option<BatchNorm2d>,
    act: Activation,
}

/// The mask discriminator D.
#[derive(Debug, Clone)]
pub struct MaskDiscriminator {
    pub arch: GanArchitecture,
    blocks: Vec<DiscBlock>,
}

impl MaskDiscriminator {
    pub fn new(arch: &GanArchitecture, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        let mut blocks = Vec::with_capacity(arch.disc_layers.len());
        let mut in_ch = 1;
        let last = arch.disc_layers.len() - 1;
        for (i, spec) in arch.disc_layers.iter().enumerate() {
            let name = format!("disc.{i}");
            let conv = Conv2d::new(
                &name,
                in_ch,
                spec.out_channels,
                spec.kernel,
                spec.stride,
                spec.pad,
                i == last,
                WeightInit::Normal(0.02),
                rng,
            );
            let (bn, act) = if i == last {
                (None, Activation::new(ActKind::Sigmoid))
            } else {
                let mut bn = BatchNorm2d::new(&format!("{name}.bn"), spec.out_channels);
                bn.init_dcgan(rng);
                let kind = match arch.disc_leaky_slope {
                    Some(slope) => ActKind::LeakyRelu(slope),
                    None => ActKind::Relu,
                };
                (Some(bn), Activation::new(kind))
            };
            blocks.push(DiscBlock { conv, bn, act });
            in_ch = spec.out_channels;
        }
        Ok(MaskDiscriminator {
            arch: arch.clone(),
            blocks,
        })
    }

    /// Map (n, 1, size, size) fields to probabilities in (0, 1).
    pub fn forward(&mut self, x: Arr4, mode: Mode) -> Result<Array1<f64>> {
        Ok(self.forward_traced(x, mode)?.0)
    }

    pub fn forward_traced(
        &mut self,
        x: Arr4,
        mode: Mode,
    ) -> Result<(Array1<f64>, Vec<(usize, usize, usize)>)> {
        let (n, c, h, w) = x.dim();
        if (c, h, w) != (1, self.arch.image_size, self.arch.image_size) {
            return Err(AmclError::ShapeMismatch(format!(
                "discriminator expects (1, {s}, {s}) inputs, got ({c}, {h}, {w})",
                s = self.arch.image_size
            )));
        }
        let mut cur = x;
        let mut shapes = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            cur = block.conv.forward(cur);
            if let Some(bn) = &mut block.bn {
                cur = bn.forward(cur, mode);
            }
            cur = block.act.forward(cur);
            let (_, c, h, w) = cur.dim();
            shapes.push((c, h, w));
        }
        let flat = cur
            .into_shape_with_order((n,))
            .expect("discriminator output is a per-sample scalar");
        Ok((flat, shapes))
    }

    /// Backpropagate from per-sample probability gradients; returns dx.
    pub fn backward(&mut self, dprob: &Array1<f64>) -> Arr4 {
        let n = dprob.len();
        let mut grad = dprob
            .clone()
            .into_shape_with_order((n, 1, 1, 1))
            .expect("probability gradient is contiguous");
        for block in self.blocks.iter_mut().rev() {
            grad = block.act.backward(&grad);
            if let Some(bn) = &mut block.bn {
                grad = bn.backward(&grad);
            }
            grad = block.conv.backward(&grad);
        }
        grad
    }

    pub fn zero_final_layer(&mut self) {
        let block = self.blocks.last_mut().unwrap();
        block.conv.w.value.fill(0.0);
        if let Some(b) = &mut block.conv.b {
            b.value.fill(0.0);
        }
    }
}

impl Net for MaskDiscriminator {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for block in &mut self.blocks {
            block.conv.visit_params(f);
            if let Some(bn) = &mut block.bn {
                bn.visit_params(f);
            }
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        for block in &mut self.blocks {
            if let Some(bn) = &mut block.bn {
                bn.visit_buffers(f);
            }
        }
    }
}

/// Threshold a continuous generator field at 0: tanh output > 0 keeps the
/// pixel, anything else occludes it.
pub fn binarize_field(field: &Arr4) -> Result<Vec<Mask>> {
    let (n, c, h, w) = field.dim();
    if c != 1 {
        return Err(AmclError::ShapeMismatch(format!(
            "mask field must have one channel, got {c}"
        )));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let grid = Array2::from_shape_fn((h, w), |(y, x)| u8::from(field[[i, 0, y, x]] > 0.0));
        out.push(Mask::from_grid(grid, 1)?);
    }
    Ok(out)
}

/// Generate binary masks from a trained generator in evaluation mode.
pub fn sample_masks(g_star: &mut MaskGenerator, zs: &[LatentVariable]) -> Result<Vec<Mask>> {
    let z = latent_batch(zs)?;
    let field = g_star.forward(&z, Mode::Eval)?;
    binarize_field(&field)
}

/// Persist a generator or discriminator with its architecture description.
pub fn save_gan_net<N: Net>(path: &Path, kind: &str, arch: &GanArchitecture, net: &mut N) -> Result<()> {
    let meta = serde_json::json!({
        "architecture_id": arch.id,
        "arch": arch,
    });
    checkpoint_net(kind, meta, net).save(path)
}

fn load_arch(ckpt: &Checkpoint) -> Result<GanArchitecture> {
    let arch_value = ckpt
        .meta
        .get("arch")
        .ok_or_else(|| AmclError::Checkpoint("missing architecture metadata".into()))?;
    serde_json::from_value(arch_value.clone())
        .map_err(|e| AmclError::Checkpoint(format!("bad architecture metadata: {e}")))
}

/// Load a generator checkpoint, validating every tensor shape against the
/// architecture stored in the header.
pub fn load_generator(path: &Path) -> Result<MaskGenerator> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "generator" {
        return Err(AmclError::Checkpoint(format!(
            "expected a generator checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let arch = load_arch(&ckpt)?;
    let mut rng = crate::rng::stream(0, "gan:load");
    let mut net = MaskGenerator::new(&arch, &mut rng)?;
    restore_net(&ckpt, &mut net)?;
    Ok(net)
}

pub fn load_discriminator(path: &Path) -> Result<MaskDiscriminator> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "discriminator" {
        return Err(AmclError::Checkpoint(format!(
            "expected a discriminator checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let arch = load_arch(&ckpt)?;
    let mut rng = crate::rng::stream(0, "gan:load");
    let mut net = MaskDiscriminator::new(&arch, &mut rng)?;
    restore_net(&ckpt, &mut net)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn canonical_shapes_match_the_architecture_tables() {
        let arch = GanArchitecture::paper();
        arch.validate().unwrap();
        assert_eq!(arch.latent_dim, 128);
        assert_eq!(
            arch.gen_output_shapes(),
            vec![
                (2048, 4, 4),
                (1024, 8, 8),
                (512, 16, 16),
                (256, 32, 32),
                (1, 64, 64)
            ]
        );
        assert_eq!(
            arch.disc_output_shapes(),
            vec![(32, 16, 16), (64, 8, 8), (128, 4, 4), (1, 1, 1)]
        );
    }

    #[test]
    fn desk_preset_is_valid_and_ends_at_the_image() {
        let arch = GanArchitecture::desk();
        arch.validate().unwrap();
        assert_eq!(arch.gen_output_shapes().last(), Some(&(1, 64, 64)));
    }

    #[test]
    fn generator_output_shape_range_and_trace() {
        let arch = GanArchitecture::desk();
        let mut rng = stream(5, "gan");
        let mut gen = MaskGenerator::new(&arch, &mut rng).unwrap();
        let zs = sample_latents(2, arch.latent_dim, &mut rng);
        let z = latent_batch(&zs).unwrap();
        let (out, shapes) = gen.forward_traced(&z, Mode::Frozen).unwrap();
        assert_eq!(out.dim(), (2, 1, 64, 64));
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(shapes, arch.gen_output_shapes());
    }

    #[test]
    fn zeroed_final_layers_pin_the_outputs() {
        let arch = GanArchitecture::desk();
        let mut rng = stream(6, "gan");
        let mut gen = MaskGenerator::new(&arch, &mut rng).unwrap();
        gen.zero_final_layer();
        let z = latent_batch(&sample_latents(3, arch.latent_dim, &mut rng)).unwrap();
        let out = gen.forward(&z, Mode::Frozen).unwrap();
        assert!(out.iter().all(|v| *v == 0.0), "tanh(0) must be exactly 0");

        let mut disc = MaskDiscriminator::new(&arch, &mut rng).unwrap();
        disc.zero_final_layer();
        let p = disc.forward(Arr4::zeros((3, 1, 64, 64)), Mode::Frozen).unwrap();
        assert!(p.iter().all(|v| (*v - 0.5).abs() < 1e-15), "sigmoid(0) = 0.5");
    }

    #[test]
    fn discriminator_fuzzed_outputs_stay_in_unit_interval() {
        let arch = GanArchitecture::desk();
        let mut rng = stream(7, "gan");
        let mut disc = MaskDiscriminator::new(&arch, &mut rng).unwrap();
        for _ in 0..10 {
            let mut x = Arr4::zeros((10, 1, 64, 64));
            for v in x.iter_mut() {
                *v = rng.random_range(-3.0..3.0);
            }
            let (p, shapes) = disc.forward_traced(x, Mode::Frozen).unwrap();
            assert!(p.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0));
            assert_eq!(shapes, arch.disc_output_shapes());
        }
    }

    #[test]
    fn eval_mode_sampling_is_deterministic() {
        let arch = GanArchitecture::desk();
        let mut rng = stream(8, "gan");
        let mut gen = MaskGenerator::new(&arch, &mut rng).unwrap();
        let zs = sample_latents(4, arch.latent_dim, &mut rng);
        let a = sample_masks(&mut gen, &zs).unwrap();
        let b = sample_masks(&mut gen, &zs).unwrap();
        assert_eq!(a, b);
        for m in &a {
            assert_eq!(m.grid.dim(), (64, 64));
            assert_eq!(m.patch_size, 1);
        }
    }

    #[test]
    fn binarization_is_monotone() {
        // Raising any continuous value never flips a kept pixel to occluded.
        let mut field = Arr4::zeros((1, 1, 64, 64));
        let mut rng = stream(9, "gan");
        for v in field.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let base = binarize_field(&field).unwrap();
        let mut raised = field.clone();
        raised.mapv_inplace(|v| v + rng.random_range(0.0..0.5));
        let up = binarize_field(&raised).unwrap();
        for (b, u) in base[0].grid.iter().zip(up[0].grid.iter()) {
            assert!(u >= b);
        }
    }

    #[test]
    fn generator_checkpoint_roundtrip_validates_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let arch = GanArchitecture::desk();
        let mut rng = stream(10, "gan");
        let mut gen = MaskGenerator::new(&arch, &mut rng).unwrap();
        let z = latent_batch(&sample_latents(1, arch.latent_dim, &mut rng)).unwrap();
        let before = gen.forward(&z, Mode::Eval).unwrap();

        save_gan_net(&path, "generator", &arch, &mut gen).unwrap();
        let mut loaded = load_generator(&path).unwrap();
        let after = loaded.forward(&z, Mode::Eval).unwrap();
        assert_eq!(before, after);

        // A discriminator checkpoint must be refused.
        let mut disc = MaskDiscriminator::new(&arch, &mut rng).unwrap();
        let dpath = dir.path().join("d.ckpt");
        save_gan_net(&dpath, "discriminator", &arch, &mut disc).unwrap();
        assert!(load_generator(&dpath).is_err());
        assert!(load_discriminator(&dpath).is_ok());
    }
}
