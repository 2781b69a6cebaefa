//! Area-average resampling.
//!
//! Each destination pixel integrates the source image (treated as piecewise
//! constant) over its footprint. Exact for integer downscale factors,
//! monotone and range-preserving in general.

use ndarray::Array2;

/// Resample `src` to `(out_h, out_w)`. Same-size inputs are copied.
pub fn resize_area(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (in_h, in_w) = src.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut out = Array2::<f64>::zeros((out_h, out_w));
    for oy in 0..out_h {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..out_w {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = 0.0;
            let mut area = 0.0;
            let iy0 = y0.floor() as usize;
            let iy1 = (y1.ceil() as usize).min(in_h);
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(in_w);
            for iy in iy0..iy1 {
                let oy_cov = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if oy_cov == 0.0 {
                    continue;
                }
                for ix in ix0..ix1 {
                    let ox_cov = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    if ox_cov == 0.0 {
                        continue;
                    }
                    let w = oy_cov * ox_cov;
                    acc += src[[iy, ix]] * w;
                    area += w;
                }
            }
            out[[oy, ox]] = if area > 0.0 { acc / area } else { 0.0 };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent reference: brute-force overlap integration on a dense
    /// sub-pixel grid.
    fn reference_resize(src: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
        const SUB: usize = 8;
        let (in_h, in_w) = src.dim();
        let mut out = Array2::<f64>::zeros((out_h, out_w));
        for oy in 0..out_h {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for sy in 0..SUB {
                    for sx in 0..SUB {
                        let fy = (oy as f64 + (sy as f64 + 0.5) / SUB as f64) / out_h as f64;
                        let fx = (ox as f64 + (sx as f64 + 0.5) / SUB as f64) / out_w as f64;
                        let iy = ((fy * in_h as f64).floor() as usize).min(in_h - 1);
                        let ix = ((fx * in_w as f64).floor() as usize).min(in_w - 1);
                        acc += src[[iy, ix]];
                    }
                }
                out[[oy, ox]] = acc / (SUB * SUB) as f64;
            }
        }
        out
    }

    fn checkerboard(n: usize, cell: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, n), |(y, x)| ((y / cell + x / cell) % 2) as f64)
    }

    #[test]
    fn same_size_is_identity() {
        let src = checkerboard(64, 8);
        assert_eq!(resize_area(&src, 64, 64), src);
    }

    #[test]
    fn integer_downscale_averages_blocks() {
        let src = checkerboard(128, 1); // 2x2-periodic pattern
        let dst = resize_area(&src, 64, 64);
        // Every destination pixel covers one white and one black source pixel
        // per row, i.e. the average is exactly 0.5.
        assert!(dst.iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn downscale_matches_independent_reference_on_checkerboard() {
        let src = checkerboard(200, 25);
        let got = resize_area(&src, 64, 64);
        let want = reference_resize(&src, 64, 64);
        let worst = got
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        // The sub-pixel reference quantizes footprints at 1/8 pixel.
        assert!(worst < 0.07, "worst deviation {worst}");
        assert!(got.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
