//! Minimal f64 layer stack with hand-written backward passes.
//!
//! The networks in this crate are small and fixed, so instead of a tape
//! autodiff each layer caches what its backward pass needs and exposes
//! `forward`/`backward` directly. This keeps three things easy that a
//! framework would make hard:
//!
//! * exact central-finite-difference checks of every gradient,
//! * gradients with respect to *inputs* (the latent-ascent path differentiates
//!   through a frozen generator into its input vectors),
//! * bit-reproducible runs — reductions happen in a fixed order and the
//!   only parallelism is across disjoint batch slices.

pub mod ckpt;
pub mod conv;
pub mod layers;
pub mod optim;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

pub use conv::{Conv2d, ConvTranspose2d};
pub use layers::{ActKind, Activation, BatchNorm2d, GlobalAvgPool, Linear};
pub use optim::{Adam, Sgd};

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Batch statistics, but no state mutation. Used for loss probes and for
    /// the latent-ascent phase, where the encoder must stay untouched.
    Frozen,
    /// Running statistics; fully deterministic inference.
    Eval,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Mode::Train | Mode::Frozen)
    }
}

/// A named parameter tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Param::new(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// N(0, std); the DCGAN convention uses std = 0.02.
    Normal(f64),
    /// N(0, sqrt(2 / fan_in)).
    HeNormal,
    /// U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    XavierUniform,
}

impl WeightInit {
    pub fn sample(
        self,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ArrayD<f64> {
        let mut arr = ArrayD::zeros(IxDyn(shape));
        match self {
            WeightInit::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("std must be positive");
                for v in arr.iter_mut() {
                    *v = rng.sample(dist);
                }
            }
            WeightInit::HeNormal => {
                let std = (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("fan_in must be positive");
                for v in arr.iter_mut() {
                    *v = rng.sample(dist);
                }
            }
            WeightInit::XavierUniform => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for v in arr.iter_mut() {
                    *v = rng.random_range(-a..a);
                }
            }
        }
        arr
    }
}

/// Anything that exposes trainable parameters (and, optionally, persistent
/// buffers such as batch-norm running statistics).
pub trait Net {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Persistent non-trainable state, visited as (name, tensor).
    fn visit_buffers(&mut self, _f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {}

    fn zero_grads(&mut self) {
        self.visit_params(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    /// True when every parameter gradient is finite.
    fn grads_finite(&mut self) -> bool {
        let mut ok = true;
        self.visit_params(&mut |p| {
            if !p.grad.iter().all(|v| v.is_finite()) {
                ok = false;
            }
        });
        ok
    }
}

/// Collect flat copies of all parameter values (finite-difference harnesses
/// and bitwise-equality checks use this).
pub fn snapshot_params<N: Net + ?Sized>(net: &mut N) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    net.visit_params(&mut |p| out.push((p.name.clone(), p.value.clone())));
    out
}

/// Parameters plus buffers, for whole-network bitwise comparisons.
pub fn snapshot_state<N: Net + ?Sized>(net: &mut N) -> Vec<(String, ArrayD<f64>)> {
    let mut out = snapshot_params(net);
    net.visit_buffers(&mut |name, buf| out.push((name.to_string(), buf.clone())));
    out
}
