//! Test-only reference implementations, kept independent of the kernels they
//! check: plain nested loops, no im2col, no shared helpers.

use crate::tensor::Shape;

/// Six-nested-loop cross-correlation.
pub(crate) fn naive_conv2d(
    xs: Shape,
    x: &[f64],
    ws: Shape,
    w: &[f64],
    bias: Option<&[f64]>,
    stride: usize,
    pad_h: usize,
    pad_w: usize,
) -> Vec<f64> {
    let oh = (xs.h + 2 * pad_h - ws.h) / stride + 1;
    let ow = (xs.w + 2 * pad_w - ws.w) / stride + 1;
    let mut out = vec![0.0; xs.n * ws.n * oh * ow];
    for n in 0..xs.n {
        for co in 0..ws.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..xs.c {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = oy * stride + ky;
                                let ix = ox * stride + kx;
                                if iy < pad_h || ix < pad_w {
                                    continue;
                                }
                                let (iy, ix) = (iy - pad_h, ix - pad_w);
                                if iy >= xs.h || ix >= xs.w {
                                    continue;
                                }
                                acc += x[xs.at(n, ci, iy, ix)] * w[ws.at(co, ci, ky, kx)];
                            }
                        }
                    }
                    out[((n * ws.n + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Closed-form bilinear interpolation of a single output pixel,
/// align-corners-false: source centers sit at `(i + 0.5) / factor - 0.5`.
pub(crate) fn bilinear_point(plane: &[f64], h: usize, w: usize, oy: usize, ox: usize, factor: usize) -> f64 {
    let sample = |y: f64, x: f64| -> f64 {
        let yc = y.max(0.0).min(h as f64 - 1.0);
        let xc = x.max(0.0).min(w as f64 - 1.0);
        let y0 = yc.floor() as usize;
        let x0 = xc.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = yc - y0 as f64;
        let fx = xc - x0 as f64;
        let v00 = plane[y0 * w + x0];
        let v01 = plane[y0 * w + x1];
        let v10 = plane[y1 * w + x0];
        let v11 = plane[y1 * w + x1];
        v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
    };
    let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
    let sx = (ox as f64 + 0.5) / factor as f64 - 0.5;
    sample(sy, sx)
}

/// Scalar log-sum-exp based cross-entropy for one pixel.
pub(crate) fn lse_cross_entropy(logits: &[f64], target: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[target]
}
