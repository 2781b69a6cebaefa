//! Batch normalization, activations, linear layer and global pooling.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;

use super::{Mode, Net, Param, WeightInit};

pub type Arr4 = Array4<f64>;

/// 2-D batch normalization over the channel axis.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    name: String,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: ArrayD<f64>,
    pub running_var: ArrayD<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x: Arr4,
    mean: Array1<f64>,
    inv_std: Array1<f64>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            ),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    /// DCGAN-style scale initialization: gamma ~ N(1, 0.02).
    pub fn init_dcgan(&mut self, rng: &mut ChaCha8Rng) {
        let c = self.gamma.value.len();
        let noise = WeightInit::Normal(0.02).sample(&[c], c, c, rng);
        self.gamma.value = noise.mapv(|v| 1.0 + v);
    }

    pub fn forward(&mut self, x: Arr4, mode: Mode) -> Arr4 {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();

        let (mean, var) = if mode.uses_batch_stats() {
            let mut mean = Array1::<f64>::zeros(c);
            let mut var = Array1::<f64>::zeros(c);
            for ch in 0..c {
                let slab = x.index_axis(Axis(1), ch);
                let mu = slab.sum() / m;
                mean[ch] = mu;
                var[ch] = slab.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m;
            }
            (mean, var)
        } else {
            (
                self.running_mean.view().into_dimensionality().unwrap().to_owned(),
                self.running_var.view().into_dimensionality().unwrap().to_owned(),
            )
        };

        if mode == Mode::Train {
            // Torch convention: running stats use the unbiased variance.
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            for ch in 0..c {
                let rm = &mut self.running_mean[ch];
                *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch];
                let rv = &mut self.running_var[ch];
                *rv = (1.0 - self.momentum) * *rv + self.momentum * var[ch] * unbias;
            }
        }

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut y = x.clone();
        for ch in 0..c {
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            y.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mu) * is * g + b);
        }
        self.cache = Some(BnCache {
            x,
            mean,
            inv_std,
            batch_stats: mode.uses_batch_stats(),
        });
        y
    }

    pub fn backward(&mut self, dy: &Arr4) -> Arr4 {
        let cache = self.cache.take().expect("batchnorm backward before forward");
        let (n, c, h, w) = cache.x.dim();
        let m = (n * h * w) as f64;
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dgamma = self.gamma.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dbeta = self.beta.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();

        let mut dx = Arr4::zeros(cache.x.raw_dim());
        for ch in 0..c {
            let (mu, is) = (cache.mean[ch], cache.inv_std[ch]);
            let xs = cache.x.index_axis(Axis(1), ch);
            let dys = dy.index_axis(Axis(1), ch);

            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for (xv, dv) in xs.iter().zip(dys.iter()) {
                let xhat = (xv - mu) * is;
                sum_dy += dv;
                sum_dy_xhat += dv * xhat;
            }
            dgamma[ch] += sum_dy_xhat;
            dbeta[ch] += sum_dy;

            let g = gamma[ch];
            let mut dxs = dx.index_axis_mut(Axis(1), ch);
            if cache.batch_stats {
                // dx = (gamma * inv_std / m) * (m*dy - sum(dy) - xhat * sum(dy*xhat))
                let scale = g * is / m;
                for ((dst, xv), dv) in dxs.iter_mut().zip(xs.iter()).zip(dys.iter()) {
                    let xhat = (xv - mu) * is;
                    *dst = scale * (m * dv - sum_dy - xhat * sum_dy_xhat);
                }
            } else {
                let scale = g * is;
                for (dst, dv) in dxs.iter_mut().zip(dys.iter()) {
                    *dst = scale * dv;
                }
            }
        }
        dx
    }
}

impl Net for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut ArrayD<f64>)) {
        let name = self.name.clone();
        f(&format!("{name}.running_mean"), &mut self.running_mean);
        f(&format!("{name}.running_var"), &mut self.running_var);
    }
}

/// Pointwise nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActKind {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActKind,
    /// ReLU variants cache the input; tanh/sigmoid cache the output.
    cache: Option<Arr4>,
}

impl Activation {
    pub fn new(kind: ActKind) -> Self {
        Activation { kind, cache: None }
    }

    pub fn forward(&mut self, x: Arr4) -> Arr4 {
        match self.kind {
            ActKind::Relu => {
                let y = x.mapv(|v| v.max(0.0));
                self.cache = Some(x);
                y
            }
            ActKind::LeakyRelu(slope) => {
                let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
                self.cache = Some(x);
                y
            }
            ActKind::Tanh => {
                let y = x.mapv(f64::tanh);
                self.cache = Some(y.clone());
                y
            }
            ActKind::Sigmoid => {
                let y = x.mapv(|v| 1.0 / (1.0 + (-v).exp()));
                self.cache = Some(y.clone());
                y
            }
        }
    }

    pub fn backward(&mut self, dy: &Arr4) -> Arr4 {
        let cached = self.cache.take().expect("activation backward before forward");
        match self.kind {
            ActKind::Relu => {
                let mut dx = dy.clone();
                dx.zip_mut_with(&cached, |d, x| {
                    if *x <= 0.0 {
                        *d = 0.0;
                    }
                });
                dx
            }
            ActKind::LeakyRelu(slope) => {
                let mut dx = dy.clone();
                dx.zip_mut_with(&cached, |d, x| {
                    if *x <= 0.0 {
                        *d *= slope;
                    }
                });
                dx
            }
            ActKind::Tanh => {
                let mut dx = dy.clone();
                dx.zip_mut_with(&cached, |d, y| *d *= 1.0 - y * y);
                dx
            }
            ActKind::Sigmoid => {
                let mut dx = dy.clone();
                dx.zip_mut_with(&cached, |d, y| *d *= y * (1.0 - y));
                dx
            }
        }
    }
}

/// Fully connected layer on (N, in) batches.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub in_features: usize,
    pub out_features: usize,
    cache: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(
        name: &str,
        in_features: usize,
        out_features: usize,
        init: WeightInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = init.sample(&[out_features, in_features], in_features, out_features, rng);
        Linear {
            w: Param::new(format!("{name}.weight"), w),
            b: Param::zeros(format!("{name}.bias"), &[out_features]),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: Array2<f64>) -> Array2<f64> {
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b = self.b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut y = x.dot(&w.t());
        y += &b;
        self.cache = Some(x);
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>) -> Array2<f64> {
        let x = self.cache.take().expect("linear backward before forward");
        {
            let mut dw = self.w.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            dw += &dy.t().dot(&x);
            let mut db = self.b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            db += &dy.sum_axis(Axis(0));
        }
        let w = self.w.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        dy.dot(&w)
    }
}

impl Net for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Mean over the spatial axes: (N, C, H, W) -> (N, C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    spatial: Option<(usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Arr4) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        self.spatial = Some((h, w));
        let m = (h * w) as f64;
        let mut y = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                y[[i, ch]] = x.index_axis(Axis(0), i).index_axis(Axis(0), ch).sum() / m;
            }
        }
        y
    }

    pub fn backward(&mut self, dy: &Array2<f64>, channels: usize) -> Arr4 {
        let (h, w) = self.spatial.expect("pool backward before forward");
        let n = dy.dim().0;
        let m = (h * w) as f64;
        let mut dx = Arr4::zeros((n, channels, h, w));
        for i in 0..n {
            for ch in 0..channels {
                let g = dy[[i, ch]] / m;
                dx.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .fill(g);
            }
        }
        dx
    }
}
