//! Encoder abstraction, augmentation pipeline and contrastive objectives.

pub mod augment;
pub mod loss;

use ndarray::{Array1, Array2, Array4};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::data::{Image, IMAGE_SIZE};
use crate::error::{AmclError, Result};
use crate::nn::ckpt::{checkpoint_net, restore_net, Checkpoint};
use crate::nn::{
    ActKind, Activation, BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Mode, Net, Param, WeightInit,
};

pub use augment::{augment_views, AugmentationPolicy, ViewBatch};
pub use loss::{cosine_similarity, masked_simclr_loss, simclr_loss};

pub type Arr4 = Array4<f64>;

/// How the generator's continuous output becomes the multiplicative mask.
///
/// `Hard` thresholds at 0 and routes gradients through the straight-through
/// rule; `Soft` multiplies by the continuous relaxation `(tanh + 1) / 2`,
/// which makes the whole objective differentiable (used by the gradient
/// oracles and available for ablation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskTransform {
    Hard,
    Soft,
}

/// Hyperparameters of contrastive pretraining (plain and adversarial).
#[derive(Debug, Clone)]
pub struct ContrastiveConfig {
    /// Minibatch size N (number of positive pairs).
    pub batch_size: usize,
    /// Softmax temperature; 1.0 is the literal objective.
    pub temperature: f64,
    /// Weight of the image-space cosine regularizer.
    pub lambda_reg: f64,
    /// Encoder learning rate (vanilla SGD).
    pub alpha: f64,
    /// Latent ascent step size.
    pub beta: f64,
    pub epochs: usize,
    /// Encoder steps per epoch.
    pub t1: usize,
    /// Latent steps per epoch.
    pub t2: usize,
    /// Latent pool size K; `None` keeps one latent per anchor (K = N).
    pub latent_set_size: Option<usize>,
    /// Restore the canonical NT-Xent denominator (positive pair included).
    /// Off by default: the implemented objective excludes it.
    pub include_positive_in_denominator: bool,
    /// Attach a 2-layer projection head for the loss computation.
    pub projection_head: bool,
    pub encoder_arch: String,
    pub augmentation: AugmentationPolicy,
    pub mask_transform: MaskTransform,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            batch_size: 16,
            temperature: 1.0,
            lambda_reg: 0.5,
            alpha: 1e-2,
            beta: 1e-1,
            epochs: 50,
            t1: 1,
            t2: 1,
            latent_set_size: None,
            include_positive_in_denominator: false,
            projection_head: false,
            encoder_arch: "resnet-small".into(),
            augmentation: AugmentationPolicy::default(),
            mask_transform: MaskTransform::Hard,
            seed: 42,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(AmclError::InvalidConfig(
                "batch_size must be at least 2: the contrastive denominator needs a negative pair"
                    .into(),
            ));
        }
        if self.temperature <= 0.0 {
            return Err(AmclError::InvalidConfig("temperature must be positive".into()));
        }
        for (name, v) in [
            ("lambda_reg", self.lambda_reg),
            ("alpha", self.alpha),
            ("beta", self.beta),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(AmclError::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if self.latent_set_size == Some(0) {
            return Err(AmclError::InvalidConfig("latent_set_size must be >= 1".into()));
        }
        self.augmentation.validate()?;
        Ok(())
    }
}

/// Stem convolution: conv → batchnorm → relu.
#[derive(Debug, Clone)]
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
    act: Activation,
}

impl ConvBnRelu {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(name, cin, cout, 3, stride, 1, false, WeightInit::HeNormal, rng),
            bn: BatchNorm2d::new(&format!("{name}.bn"), cout),
            act: Activation::new(ActKind::Relu),
        }
    }

    fn forward(&mut self, x: Arr4, mode: Mode) -> Arr4 {
        let x = self.conv.forward(x);
        let x = self.bn.forward(x, mode);
        self.act.forward(x)
    }

    fn backward(&mut self, dy: &Arr4) -> Arr4 {
        let d = self.act.backward(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }
}

/// Basic residual block: two 3×3 convolutions with a projection shortcut
/// whenever shape changes.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act1: Activation,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
    act_out: Activation,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let shortcut = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(
                    &format!("{name}.down"),
                    cin,
                    cout,
                    1,
                    stride,
                    0,
                    false,
                    WeightInit::HeNormal,
                    rng,
                ),
                BatchNorm2d::new(&format!("{name}.down.bn"), cout),
            )
        });
        ResBlock {
            conv1: Conv2d::new(
                &format!("{name}.conv1"),
                cin,
                cout,
                3,
                stride,
                1,
                false,
                WeightInit::HeNormal,
                rng,
            ),
            bn1: BatchNorm2d::new(&format!("{name}.bn1"), cout),
            act1: Activation::new(ActKind::Relu),
            conv2: Conv2d::new(
                &format!("{name}.conv2"),
                cout,
                cout,
                3,
                1,
                1,
                false,
                WeightInit::HeNormal,
                rng,
            ),
            bn2: BatchNorm2d::new(&format!("{name}.bn2"), cout),
            shortcut,
            act_out: Activation::new(ActKind::Relu),
        }
    }

    fn forward(&mut self, x: Arr4, mode: Mode) -> Arr4 {
        let skip_input = x.clone();
        let b = self.conv1.forward(x);
        let b = self.bn1.forward(b, mode);
        let b = self.act1.forward(b);
        let b = self.conv2.forward(b);
        let b = self.bn2.forward(b, mode);
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => bn.forward(conv.forward(skip_input), mode),
            None => skip_input,
        };
        self.act_out.forward(b + skip)
    }

    fn backward(&mut self, dy: &Arr4) -> Arr4 {
        let dsum = self.act_out.backward(dy);
        let d = self.bn2.backward(&dsum);
        let d = self.conv2.backward(&d);
        let d = self.act1.backward(&d);
        let d = self.bn1.backward(&d);
        let dbranch = self.conv1.backward(&d);
        let dskip = match &mut self.shortcut {
            Some((conv, bn)) => conv.backward(&bn.backward(&dsum)),
            None => dsum,
        };
        dbranch + dskip
    }

    fn visit(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_params(f);
            bn.visit_params(f);
        }
    }

    fn visit_buf(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_buffers(f);
        }
    }
}

/// Optional 2-layer projection head applied only inside the contrastive
/// losses.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    l1: Linear,
    l2: Linear,
    pre_act: Option<Array2<f64>>,
}

impl ProjectionHead {
    fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        ProjectionHead {
            l1: Linear::new("proj.l1", dim, dim, WeightInit::XavierUniform, rng),
            l2: Linear::new("proj.l2", dim, dim, WeightInit::XavierUniform, rng),
            pre_act: None,
        }
    }

    pub fn forward(&mut self, emb: Array2<f64>) -> Array2<f64> {
        let pre = self.l1.forward(emb);
        let hidden = pre.mapv(|v| v.max(0.0));
        self.pre_act = Some(pre);
        self.l2.forward(hidden)
    }

    pub fn backward(&mut self, dout: &Array2<f64>) -> Array2<f64> {
        let pre = self.pre_act.take().expect("projection backward before forward");
        let mut dh = self.l2.backward(dout);
        dh.zip_mut_with(&pre, |d, p| {
            if *p <= 0.0 {
                *d = 0.0;
            }
        });
        self.l1.backward(&dh)
    }
}

/// The embedding network E with weights ϑ.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub architecture_id: String,
    pub embed_dim: usize,
    /// Expected input side length.
    pub input_hw: usize,
    stem: ConvBnRelu,
    blocks: Vec<ResBlock>,
    pool: GlobalAvgPool,
    final_channels: usize,
    pub projection: Option<ProjectionHead>,
}

impl Encoder {
    /// Assemble an encoder from a stem spec and residual block specs
    /// `(cin, cout, stride)`. Used by the registry and by toy configurations
    /// in tests.
    pub fn from_parts(
        architecture_id: &str,
        input_hw: usize,
        stem_out: usize,
        stem_stride: usize,
        block_specs: &[(usize, usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stem = ConvBnRelu::new("stem", 1, stem_out, stem_stride, rng);
        let mut blocks = Vec::with_capacity(block_specs.len());
        for (i, &(cin, cout, stride)) in block_specs.iter().enumerate() {
            blocks.push(ResBlock::new(&format!("block{}", i + 1), cin, cout, stride, rng));
        }
        let final_channels = block_specs.last().map(|&(_, c, _)| c).unwrap_or(stem_out);
        Encoder {
            architecture_id: architecture_id.to_string(),
            embed_dim: final_channels,
            input_hw,
            stem,
            blocks,
            pool: GlobalAvgPool::new(),
            final_channels,
            projection: None,
        }
    }

    pub fn with_projection_head(mut self, rng: &mut ChaCha8Rng) -> Self {
        self.projection = Some(ProjectionHead::new(self.embed_dim, rng));
        self
    }

    /// Backbone forward: (n, 1, hw, hw) → (n, embed_dim).
    pub fn forward_batch(&mut self, x: Arr4, mode: Mode) -> Result<Array2<f64>> {
        let (_, c, h, w) = x.dim();
        if (c, h, w) != (1, self.input_hw, self.input_hw) {
            return Err(AmclError::ShapeMismatch(format!(
                "encoder {:?} expects (1, {s}, {s}) inputs, got ({c}, {h}, {w})",
                self.architecture_id,
                s = self.input_hw
            )));
        }
        let mut cur = self.stem.forward(x, mode);
        for block in &mut self.blocks {
            cur = block.forward(cur, mode);
        }
        Ok(self.pool.forward(&cur))
    }

    /// Backbone backward from embedding gradients; returns input gradients.
    pub fn backward_batch(&mut self, d_embed: &Array2<f64>) -> Arr4 {
        let mut grad = self.pool.backward(d_embed, self.final_channels);
        for block in self.blocks.iter_mut().rev() {
            grad = block.backward(&grad);
        }
        self.stem.backward(&grad)
    }

    /// Embed a batch of images (stacked in order).
    pub fn embed_images(&mut self, imgs: &[&Image], mode: Mode) -> Result<Array2<f64>> {
        self.forward_batch(images_to_batch(imgs), mode)
    }
}

impl Net for Encoder {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.conv.visit_params(f);
        self.stem.bn.visit_params(f);
        for block in &mut self.blocks {
            block.visit(f);
        }
        if let Some(proj) = &mut self.projection {
            proj.l1.visit_params(f);
            proj.l2.visit_params(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ndarray::ArrayD<f64>)) {
        self.stem.bn.visit_buffers(f);
        for block in &mut self.blocks {
            block.visit_buf(f);
        }
    }
}

/// Registered encoder architectures. `resnet-small` is the default; the
/// others are compact stand-ins covering the same API.
pub const ENCODER_ARCHITECTURES: &[&str] = &["resnet-small", "cnn-compact", "cnn-tiny"];

/// Build a registered encoder.
pub fn build_encoder(architecture_id: &str, rng: &mut ChaCha8Rng) -> Result<Encoder> {
    let enc = match architecture_id {
        "resnet-small" => Encoder::from_parts(
            architecture_id,
            IMAGE_SIZE,
            64,
            1,
            &[(64, 64, 2), (64, 128, 2), (128, 256, 2), (256, 512, 2)],
            rng,
        ),
        "cnn-compact" => Encoder::from_parts(
            architecture_id,
            IMAGE_SIZE,
            16,
            1,
            &[(16, 32, 2), (32, 64, 2), (64, 64, 2)],
            rng,
        ),
        "cnn-tiny" => Encoder::from_parts(
            architecture_id,
            IMAGE_SIZE,
            8,
            2,
            &[(8, 16, 2), (16, 32, 2)],
            rng,
        ),
        other => {
            return Err(AmclError::InvalidConfig(format!(
                "unknown encoder architecture {other:?} (available: {})",
                ENCODER_ARCHITECTURES.join(", ")
            )))
        }
    };
    Ok(enc)
}

/// Embed a single image in evaluation mode (deterministic).
pub fn encode(encoder: &mut Encoder, img: &Image) -> Result<Array1<f64>> {
    let batch = pixels_to_batch(&[&img.pixels]);
    let emb = encoder.forward_batch(batch, Mode::Eval)?;
    Ok(emb.row(0).to_owned())
}

/// Stack images into an (n, 1, h, w) batch.
pub fn images_to_batch(imgs: &[&Image]) -> Arr4 {
    pixels_to_batch(&imgs.iter().map(|i| &i.pixels).collect::<Vec<_>>())
}

pub fn pixels_to_batch(pixels: &[&Array2<f64>]) -> Arr4 {
    let (h, w) = pixels
        .first()
        .map(|p| p.dim())
        .unwrap_or((IMAGE_SIZE, IMAGE_SIZE));
    let mut out = Arr4::zeros((pixels.len(), 1, h, w));
    for (i, p) in pixels.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(p);
    }
    out
}

/// Save an encoder checkpoint carrying its architecture id.
pub fn save_encoder(path: &Path, encoder: &mut Encoder, config_hash: &str) -> Result<()> {
    let meta = serde_json::json!({
        "architecture_id": encoder.architecture_id,
        "embed_dim": encoder.embed_dim,
        "config_hash": config_hash,
    });
    checkpoint_net("encoder", meta, encoder).save(path)
}

/// Load an encoder checkpoint; the stored architecture id must be known and
/// is rebuilt before shape-validated restoration.
pub fn load_encoder(path: &Path) -> Result<Encoder> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "encoder" {
        return Err(AmclError::Checkpoint(format!(
            "expected an encoder checkpoint, found kind {:?}",
            ckpt.kind
        )));
    }
    let arch = ckpt.meta_str("architecture_id")?.to_string();
    let mut rng = crate::rng::stream(0, "encoder:load");
    let mut enc = build_encoder(&arch, &mut rng)?;
    restore_net(&ckpt, &mut enc)?;
    Ok(enc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng) -> Image {
        Image::new(
            Array2::from_shape_fn((IMAGE_SIZE, IMAGE_SIZE), |_| rng.random_range(0.0..1.0)),
            0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn registered_encoders_produce_their_embed_dim() {
        let mut rng = stream(1, "enc");
        for (&id, dim) in ENCODER_ARCHITECTURES.iter().zip([512usize, 64, 32]) {
            let mut enc = build_encoder(id, &mut rng).unwrap();
            assert_eq!(enc.embed_dim, dim);
            let img = random_image(&mut rng);
            let emb = encode(&mut enc, &img).unwrap();
            assert_eq!(emb.len(), dim);
            assert!(emb.iter().all(|v| v.is_finite()));
        }
        assert!(build_encoder("resnet-huge", &mut rng).is_err());
    }

    #[test]
    fn eval_encoding_is_deterministic() {
        let mut rng = stream(2, "enc");
        let mut enc = build_encoder("cnn-tiny", &mut rng).unwrap();
        let img = random_image(&mut rng);
        let a = encode(&mut enc, &img).unwrap();
        let b = encode(&mut enc, &img).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn embedding_is_locally_lipschitz() {
        // ||E(x + eps) - E(x)|| must scale like O(eps) for eps = 1e-4.
        let mut rng = stream(3, "enc");
        let mut enc = build_encoder("cnn-tiny", &mut rng).unwrap();
        let img = random_image(&mut rng);
        let base = encode(&mut enc, &img).unwrap();

        let eps = 1e-4;
        let mut bumped = img.clone();
        bumped.pixels.mapv_inplace(|v| (v + eps).min(1.0));
        let moved = encode(&mut enc, &bumped).unwrap();
        let delta = (&moved - &base).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(delta > 0.0, "a perturbation must move the embedding");
        assert!(delta < 1e-1, "embedding jump {delta} too large for eps {eps}");
    }

    #[test]
    fn encoder_rejects_wrong_input_size() {
        let mut rng = stream(4, "enc");
        let mut enc = build_encoder("cnn-tiny", &mut rng).unwrap();
        let bad = Arr4::zeros((1, 1, 32, 32));
        assert!(enc.forward_batch(bad, Mode::Eval).is_err());
    }

    #[test]
    fn encoder_checkpoint_refuses_mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let mut rng = stream(5, "enc");
        let mut enc = build_encoder("cnn-tiny", &mut rng).unwrap();
        save_encoder(&path, &mut enc, "cafebabe").unwrap();

        let loaded = load_encoder(&path).unwrap();
        assert_eq!(loaded.architecture_id, "cnn-tiny");

        // Tamper with the id: the loader must refuse the unknown id.
        let mut ckpt = Checkpoint::load(&path).unwrap();
        ckpt.meta["architecture_id"] = serde_json::json!("made-up");
        ckpt.save(&path).unwrap();
        assert!(load_encoder(&path).is_err());
    }

    #[test]
    fn encoder_backward_matches_finite_differences_on_toy() {
        // 2-layer toy: stem + one residual block on 8x8 inputs.
        let mut rng = stream(6, "enc-fd");
        let mut enc = Encoder::from_parts("toy", 8, 3, 1, &[(3, 4, 2)], &mut rng);
        let x = Arr4::from_shape_fn((2, 1, 8, 8), |_| rng.random_range(0.0..1.0));

        let emb = enc.forward_batch(x.clone(), Mode::Frozen).unwrap();
        let dx = enc.backward_batch(&emb.clone());

        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in (0..x.len()).step_by(7) {
            let mut xp = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            let up = {
                let e = enc.clone().forward_batch(xp.clone(), Mode::Frozen).unwrap();
                0.5 * e.iter().map(|v| v * v).sum::<f64>()
            };
            xp.as_slice_mut().unwrap()[idx] -= 2.0 * h;
            let down = {
                let e = enc.clone().forward_batch(xp, Mode::Frozen).unwrap();
                0.5 * e.iter().map(|v| v * v).sum::<f64>()
            };
            let fd = (up - down) / (2.0 * h);
            let got = dx.as_slice().unwrap()[idx];
            worst = worst.max((fd - got).abs() / fd.abs().max(1.0));
        }
        assert!(worst < 1e-6, "worst encoder dx rel err {worst}");
    }
}
