//! Convolution and transposed convolution with im2col/col2im backends.
//!
//! Both directions of both operators reduce to one matrix product per
//! sample. Batch samples are processed in parallel only where the outputs
//! are disjoint slices; weight-gradient accumulation runs over a fixed
//! small number of chunks summed in a fixed order, so results do not
//! depend on the thread count.

use ndarray::linalg::general_mat_mul;
use ndarray::parallel::prelude::*;
use ndarray::{Array2, Array4, ArrayViewMut3, Axis, Zip};
use rand_chacha::ChaCha8Rng;

use super::{Param, WeightInit};

/// Number of fixed batch chunks used for weight-gradient accumulation.
const BWD_CHUNKS: usize = 2;

pub type Arr4 = Array4<f64>;

/// Gather `x` (C,H,W) into `cols` ((C*k*k), lh*lw); out-of-range taps are 0.
///
/// `lh × lw` is the sliding-window grid: entry `[(c,ki,kj), (oh,ow)]` reads
/// `x[c, oh*stride + ki - pad, ow*stride + kj - pad]`.
fn im2col(
    x: &ndarray::ArrayView3<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    lh: usize,
    lw: usize,
    cols: &mut Array2<f64>,
) {
    let (c_in, h, w) = x.dim();
    debug_assert_eq!(cols.dim(), (c_in * k * k, lh * lw));
    cols.fill(0.0);
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let mut cols_row = cols.row_mut(row);
                for oh in 0..lh {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..lw {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols_row[oh * lw + ow] = x[[c, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
}

/// Scatter-add the exact inverse of [`im2col`] into `img`.
fn col2im(
    cols: &ndarray::ArrayView2<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    lh: usize,
    lw: usize,
    img: &mut ArrayViewMut3<f64>,
) {
    let (c_in, h, w) = img.dim();
    debug_assert_eq!(cols.dim(), (c_in * k * k, lh * lw));
    for c in 0..c_in {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let cols_row = cols.row(row);
                for oh in 0..lh {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..lw {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        img[[c, ih as usize, iw as usize]] += cols_row[oh * lw + ow];
                    }
                }
            }
        }
    }
}

fn chunk_ranges(n: usize) -> Vec<(usize, usize)> {
    let chunks = BWD_CHUNKS.min(n.max(1));
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut start = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < rem);
        out.push((start, start + len));
        start += len;
    }
    out
}

/// 2-D convolution, NCHW, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Arr4>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: WeightInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let w = init.sample(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            fan_out,
            rng,
        );
        Conv2d {
            w: Param::new(format!("{name}.weight"), w),
            b: bias.then(|| Param::zeros(format!("{name}.bias"), &[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&mut self, x: Arr4) -> Arr4 {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_channels, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let cik2 = c_in * k * k;
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((self.out_channels, cik2))
            .expect("contiguous conv weight");

        let mut out = Array4::<f64>::zeros((n, self.out_channels, ho, wo));
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(x.axis_iter(Axis(0)))
            .par_for_each(|on, xn| {
                let mut cols = Array2::<f64>::zeros((cik2, ho * wo));
                im2col(&xn, k, s, p, ho, wo, &mut cols);
                let mut o2 = on
                    .into_shape_with_order((self.out_channels, ho * wo))
                    .expect("contiguous out slab");
                general_mat_mul(1.0, &w2, &cols, 0.0, &mut o2);
            });

        if let Some(b) = &self.b {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for c in 0..self.out_channels {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bv[c]);
            }
        }
        self.cache = Some(x);
        out
    }

    pub fn backward(&mut self, dy: &Arr4) -> Arr4 {
        let x = self.cache.take().expect("conv backward before forward");
        let (n, c_in, h, w) = x.dim();
        let (_, c_out, ho, wo) = dy.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let cik2 = c_in * k * k;

        if let Some(b) = &mut self.b {
            let mut bg = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for c in 0..c_out {
                bg[c] += dy.index_axis(Axis(1), c).sum();
            }
        }

        // Weight gradient: fixed chunks, serial within a chunk, summed in order.
        let ranges = chunk_ranges(n);
        let partials: Vec<Array2<f64>> = ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let mut dw = Array2::<f64>::zeros((c_out, cik2));
                let mut cols = Array2::<f64>::zeros((cik2, ho * wo));
                for i in lo..hi {
                    im2col(&x.index_axis(Axis(0), i), k, s, p, ho, wo, &mut cols);
                    let dy2 = dy
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((c_out, ho * wo))
                        .expect("contiguous dy slab");
                    general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut dw);
                }
                dw
            })
            .collect();
        {
            let mut dw2 = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((c_out, cik2))
                .expect("contiguous conv weight grad");
            for partial in &partials {
                dw2 += partial;
            }
        }

        // Input gradient.
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((c_out, cik2))
            .expect("contiguous conv weight");
        let mut dx = Array4::<f64>::zeros((n, c_in, h, w));
        Zip::from(dx.axis_iter_mut(Axis(0)))
            .and(dy.axis_iter(Axis(0)))
            .par_for_each(|mut dxn, dyn_| {
                let dy2 = dyn_
                    .into_shape_with_order((c_out, ho * wo))
                    .expect("contiguous dy slab");
                let mut dcols = Array2::<f64>::zeros((cik2, ho * wo));
                general_mat_mul(1.0, &w2.t(), &dy2, 0.0, &mut dcols);
                col2im(&dcols.view(), k, s, p, ho, wo, &mut dxn);
            });
        dx
    }
}

/// 2-D transposed convolution (fractionally-strided), NCHW, square kernel.
///
/// Weight layout is (in, out, k, k). The forward pass is exactly the input
/// gradient of a convolution mapping the *output* back to the *input*, so
/// it shares the im2col/col2im kernels above.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Param,
    pub b: Option<Param>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<Arr4>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        init: WeightInit,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let fan_out = out_channels * kernel * kernel;
        let w = init.sample(
            &[in_channels, out_channels, kernel, kernel],
            fan_in,
            fan_out,
            rng,
        );
        ConvTranspose2d {
            w: Param::new(format!("{name}.weight"), w),
            b: bias.then(|| Param::zeros(format!("{name}.bias"), &[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.kernel - 2 * self.pad,
            (w - 1) * self.stride + self.kernel - 2 * self.pad,
        )
    }

    pub fn forward(&mut self, x: Arr4) -> Arr4 {
        let (n, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.in_channels, "conv-transpose input channels");
        let (ho, wo) = self.out_hw(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let cok2 = self.out_channels * k * k;
        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((c_in, cok2))
            .expect("contiguous conv-transpose weight");

        let mut out = Array4::<f64>::zeros((n, self.out_channels, ho, wo));
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(x.axis_iter(Axis(0)))
            .par_for_each(|mut on, xn| {
                let x2 = xn
                    .into_shape_with_order((c_in, h * w))
                    .expect("contiguous input slab");
                let mut cols = Array2::<f64>::zeros((cok2, h * w));
                general_mat_mul(1.0, &w2.t(), &x2, 0.0, &mut cols);
                col2im(&cols.view(), k, s, p, h, w, &mut on.view_mut());
            });

        if let Some(b) = &self.b {
            let bv = b.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for c in 0..self.out_channels {
                out.index_axis_mut(Axis(1), c).mapv_inplace(|v| v + bv[c]);
            }
        }
        self.cache = Some(x);
        out
    }

    pub fn backward(&mut self, dy: &Arr4) -> Arr4 {
        let x = self
            .cache
            .take()
            .expect("conv-transpose backward before forward");
        let (n, c_in, h, w) = x.dim();
        let (_, c_out, _ho, _wo) = dy.dim();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        let cok2 = c_out * k * k;

        if let Some(b) = &mut self.b {
            let mut bg = b.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            for c in 0..c_out {
                bg[c] += dy.index_axis(Axis(1), c).sum();
            }
        }

        let ranges = chunk_ranges(n);
        let partials: Vec<Array2<f64>> = ranges
            .par_iter()
            .map(|&(lo, hi)| {
                let mut dw = Array2::<f64>::zeros((c_in, cok2));
                let mut cols = Array2::<f64>::zeros((cok2, h * w));
                for i in lo..hi {
                    im2col(&dy.index_axis(Axis(0), i), k, s, p, h, w, &mut cols);
                    let x2 = x
                        .index_axis(Axis(0), i)
                        .into_shape_with_order((c_in, h * w))
                        .expect("contiguous input slab");
                    general_mat_mul(1.0, &x2, &cols.t(), 1.0, &mut dw);
                }
                dw
            })
            .collect();
        {
            let mut dw2 = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((c_in, cok2))
                .expect("contiguous conv-transpose weight grad");
            for partial in &partials {
                dw2 += partial;
            }
        }

        let w2 = self
            .w
            .value
            .view()
            .into_shape_with_order((c_in, cok2))
            .expect("contiguous conv-transpose weight");
        let mut dx = Array4::<f64>::zeros((n, c_in, h, w));
        Zip::from(dx.axis_iter_mut(Axis(0)))
            .and(dy.axis_iter(Axis(0)))
            .par_for_each(|mut dxn, dyn_| {
                let mut cols = Array2::<f64>::zeros((cok2, h * w));
                im2col(&dyn_, k, s, p, h, w, &mut cols);
                let mut dx2 = dxn
                    .view_mut()
                    .into_shape_with_order((c_in, h * w))
                    .expect("contiguous dx slab");
                general_mat_mul(1.0, &w2, &cols, 0.0, &mut dx2);
            });
        dx
    }
}

impl super::Net for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

impl super::Net for ConvTranspose2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Net;
    use crate::rng::stream;
    use ndarray::{ArrayD, IxDyn};
    use rand::Rng;

    fn random_arr4(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Arr4 {
        let mut a = Array4::zeros(dim);
        for v in a.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        a
    }

    /// Loss = 0.5 * sum(y^2); its gradient wrt y is y itself.
    fn half_sq_sum(y: &Arr4) -> f64 {
        0.5 * y.iter().map(|v| v * v).sum::<f64>()
    }

    fn fd_param_grad<F: FnMut(&ArrayD<f64>) -> f64>(
        value: &ArrayD<f64>,
        mut loss: F,
        h: f64,
    ) -> ArrayD<f64> {
        let mut g = ArrayD::zeros(value.raw_dim());
        let mut v = value.clone();
        for idx in 0..value.len() {
            let orig = v.as_slice().unwrap()[idx];
            v.as_slice_mut().unwrap()[idx] = orig + h;
            let up = loss(&v);
            v.as_slice_mut().unwrap()[idx] = orig - h;
            let down = loss(&v);
            v.as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
        }
        g
    }

    fn rel_err(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        let num: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let den = a.iter().map(|v| v * v).sum::<f64>().sqrt()
            + b.iter().map(|v| v * v).sum::<f64>().sqrt()
            + 1e-12;
        num / den
    }

    #[test]
    fn conv_shapes_match_hand_computation() {
        let mut rng = stream(7, "conv-shapes");
        let mut c = Conv2d::new("c", 1, 32, 8, 4, 2, false, WeightInit::Normal(0.02), &mut rng);
        assert_eq!(c.out_hw(64, 64), (16, 16));
        let y = c.forward(Array4::zeros((2, 1, 64, 64)));
        assert_eq!(y.dim(), (2, 32, 16, 16));

        let mut t = ConvTranspose2d::new("t", 8, 4, 4, 2, 1, false, WeightInit::Normal(0.02), &mut rng);
        assert_eq!(t.out_hw(8, 8), (16, 16));
        let y = t.forward(Array4::zeros((3, 8, 8, 8)));
        assert_eq!(y.dim(), (3, 4, 16, 16));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = stream(11, "conv-fd");
        let x = random_arr4(&mut rng, (2, 2, 5, 5));
        let mut conv = Conv2d::new("c", 2, 3, 3, 2, 1, true, WeightInit::Normal(0.3), &mut rng);

        let y = conv.forward(x.clone());
        let dx = conv.backward(&y.clone());

        // dW and db against finite differences of the scalar loss.
        let w0 = conv.w.value.clone();
        let fd_dw = fd_param_grad(
            &w0,
            |w| {
                let mut c2 = conv.clone();
                c2.w.value = w.clone();
                half_sq_sum(&c2.forward(x.clone()))
            },
            1e-6,
        );
        assert!(rel_err(&conv.w.grad, &fd_dw) < 1e-8, "dW mismatch");

        let b0 = conv.b.as_ref().unwrap().value.clone();
        let fd_db = fd_param_grad(
            &b0,
            |b| {
                let mut c2 = conv.clone();
                c2.b.as_mut().unwrap().value = b.clone();
                half_sq_sum(&c2.forward(x.clone()))
            },
            1e-6,
        );
        assert!(rel_err(&conv.b.as_ref().unwrap().grad, &fd_db) < 1e-8, "db mismatch");

        // dx against finite differences.
        let fd_dx = fd_param_grad(
            &x.clone().into_dyn(),
            |xv| {
                let mut c2 = conv.clone();
                let x4 = xv.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
                half_sq_sum(&c2.forward(x4))
            },
            1e-6,
        );
        assert!(rel_err(&dx.into_dyn(), &fd_dx) < 1e-8, "dx mismatch");
    }

    #[test]
    fn conv_transpose_backward_matches_finite_differences() {
        let mut rng = stream(13, "convt-fd");
        let x = random_arr4(&mut rng, (2, 3, 4, 4));
        let mut ct =
            ConvTranspose2d::new("t", 3, 2, 4, 2, 1, true, WeightInit::Normal(0.3), &mut rng);

        let y = ct.forward(x.clone());
        assert_eq!(y.dim(), (2, 2, 8, 8));
        let dx = ct.backward(&y.clone());

        let w0 = ct.w.value.clone();
        let fd_dw = fd_param_grad(
            &w0,
            |w| {
                let mut c2 = ct.clone();
                c2.w.value = w.clone();
                half_sq_sum(&c2.forward(x.clone()))
            },
            1e-6,
        );
        assert!(rel_err(&ct.w.grad, &fd_dw) < 1e-8, "dW mismatch");

        let fd_dx = fd_param_grad(
            &x.clone().into_dyn(),
            |xv| {
                let mut c2 = ct.clone();
                let x4 = xv.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
                half_sq_sum(&c2.forward(x4))
            },
            1e-6,
        );
        assert!(rel_err(&dx.into_dyn(), &fd_dx) < 1e-8, "dx mismatch");
    }

    #[test]
    fn grads_accumulate_until_zeroed() {
        let mut rng = stream(17, "conv-acc");
        let x = random_arr4(&mut rng, (1, 1, 4, 4));
        let mut conv = Conv2d::new("c", 1, 1, 3, 1, 1, false, WeightInit::Normal(0.3), &mut rng);
        let y = conv.forward(x.clone());
        conv.backward(&y);
        let g1 = conv.w.grad.clone();
        let y = conv.forward(x);
        conv.backward(&y);
        let g2 = conv.w.grad.clone();
        assert!(rel_err(&(g1.clone() * 2.0), &g2) < 1e-12);
        conv.zero_grads();
        assert_eq!(conv.w.grad, ArrayD::<f64>::zeros(IxDyn(&[1, 1, 3, 3])));
    }
}
