//! im2col convolution kernels shared by `conv2d` and `deconv2d`.
//!
//! One geometry describes both directions: a transposed convolution is the
//! adjoint map of the convolution with the same weights, so its forward pass
//! is `conv_dx` and its backward pass reuses `conv_fwd` / `conv_dw` with the
//! roles of input and output gradient swapped.
//!
//! Parallelism is over the batch only; per-sample partial results are reduced
//! in index order so outputs do not depend on worker count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Shape;

/// Geometry of one convolution, in conv-direction terms: `(n, cin, h, w)`
/// input, `(cout, cin, kh, kw)` weights, `(n, cout, oh, ow)` output.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn for_conv(
        op: &'static str,
        x: Shape,
        w: Shape,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Self> {
        if stride < 1 {
            return Err(Error::arg(op, "stride must be >= 1"));
        }
        if x.c != w.c {
            return Err(Error::shape(
                op,
                format!("input has {} channels, kernel expects {}", x.c, w.c),
            ));
        }
        let oh = out_dim(op, x.h, w.h, stride, pad_h)?;
        let ow = out_dim(op, x.w, w.w, stride, pad_w)?;
        Ok(ConvGeom {
            n: x.n,
            cin: x.c,
            h: x.h,
            w: x.w,
            cout: w.n,
            kh: w.h,
            kw: w.w,
            stride,
            pad_h,
            pad_w,
            oh,
            ow,
        })
    }

    /// Geometry for `deconv2d(x, w)` where `w` is `(c_x, c_out, kh, kw)`.
    /// Expressed as the conv that maps the deconv *output* back onto `x`.
    pub fn for_deconv(op: &'static str, x: Shape, w: Shape, stride: usize, pad: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::arg(op, "stride must be >= 1"));
        }
        if x.c != w.n {
            return Err(Error::shape(
                op,
                format!("input has {} channels, kernel expects {}", x.c, w.n),
            ));
        }
        let full_h = (stride * (x.h - 1) + w.h).checked_sub(2 * pad);
        let full_w = (stride * (x.w - 1) + w.w).checked_sub(2 * pad);
        match (full_h, full_w) {
            (Some(h), Some(v)) if h > 0 && v > 0 => Ok(ConvGeom {
                n: x.n,
                cin: w.c,
                h,
                w: v,
                cout: w.n,
                kh: w.h,
                kw: w.w,
                stride,
                pad_h: pad,
                pad_w: pad,
                oh: x.h,
                ow: x.w,
            }),
            _ => Err(Error::shape(op, "non-positive output dimension")),
        }
    }

    pub fn in_shape(&self) -> Shape {
        Shape::new(self.n, self.cin, self.h, self.w)
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn m(&self) -> usize {
        self.oh * self.ow
    }
}

fn out_dim(op: &'static str, i: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = i + 2 * pad;
    if padded < k {
        return Err(Error::shape(op, "non-positive output dimension"));
    }
    Ok((padded - k) / stride + 1)
}

/// Unpack one sample into a `(m, k)` patch matrix; out-of-bounds taps stay 0.
fn im2col(g: &ConvGeom, xs: &[f64], col: &mut [f64]) {
    let k = g.k();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut col[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            for ci in 0..g.cin {
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad_h);
                    if iy >= g.h {
                        continue;
                    }
                    let src = &xs[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    let dst = &mut row[(ci * g.kh + ky) * g.kw..(ci * g.kh + ky + 1) * g.kw];
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx).wrapping_sub(g.pad_w);
                        if ix < g.w {
                            dst[kx] = src[ix];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of `im2col`: scatter-add patch rows back into a sample.
fn col2im(g: &ConvGeom, col: &[f64], xs: &mut [f64]) {
    let k = g.k();
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &col[(oy * g.ow + ox) * k..(oy * g.ow + ox + 1) * k];
            for ci in 0..g.cin {
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky).wrapping_sub(g.pad_h);
                    if iy >= g.h {
                        continue;
                    }
                    let dst = &mut xs[(ci * g.h + iy) * g.w..(ci * g.h + iy + 1) * g.w];
                    let src = &row[(ci * g.kh + ky) * g.kw..(ci * g.kh + ky + 1) * g.kw];
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx).wrapping_sub(g.pad_w);
                        if ix < g.w {
                            dst[ix] += src[kx];
                        }
                    }
                }
            }
        }
    }
}

/// `out[co][m] = dot(w[co], col[m]) + bias[co]`, four output channels at a time.
fn gemm_nt(m_rows: usize, k: usize, cout: usize, col: &[f64], w: &[f64], bias: Option<&[f64]>, out: &mut [f64]) {
    let mut co = 0;
    while co + 4 <= cout {
        let w0 = &w[co * k..(co + 1) * k];
        let w1 = &w[(co + 1) * k..(co + 2) * k];
        let w2 = &w[(co + 2) * k..(co + 3) * k];
        let w3 = &w[(co + 3) * k..(co + 4) * k];
        let (b0, b1, b2, b3) = match bias {
            Some(b) => (b[co], b[co + 1], b[co + 2], b[co + 3]),
            None => (0.0, 0.0, 0.0, 0.0),
        };
        for m in 0..m_rows {
            let a = &col[m * k..(m + 1) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                let av = a[i];
                s0 += av * w0[i];
                s1 += av * w1[i];
                s2 += av * w2[i];
                s3 += av * w3[i];
            }
            out[co * m_rows + m] = s0 + b0;
            out[(co + 1) * m_rows + m] = s1 + b1;
            out[(co + 2) * m_rows + m] = s2 + b2;
            out[(co + 3) * m_rows + m] = s3 + b3;
        }
        co += 4;
    }
    while co < cout {
        let wr = &w[co * k..(co + 1) * k];
        let b = bias.map_or(0.0, |b| b[co]);
        for m in 0..m_rows {
            let a = &col[m * k..(m + 1) * k];
            let mut s = 0.0;
            for i in 0..k {
                s += a[i] * wr[i];
            }
            out[co * m_rows + m] = s + b;
        }
        co += 1;
    }
}

pub(crate) fn conv_fwd(g: &ConvGeom, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (k, m) = (g.k(), g.m());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * m;
    let mut out = vec![0.0; g.n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(s, out_s)| {
        let mut col = vec![0.0; m * k];
        im2col(g, &x[s * in_sz..(s + 1) * in_sz], &mut col);
        gemm_nt(m, k, g.cout, &col, w, bias, out_s);
    });
    out
}

/// Gradient w.r.t. the conv input; also the forward pass of `deconv2d`.
pub(crate) fn conv_dx(g: &ConvGeom, og: &[f64], w: &[f64]) -> Vec<f64> {
    let (k, m) = (g.k(), g.m());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * m;
    let mut dx = vec![0.0; g.n * in_sz];
    dx.par_chunks_mut(in_sz).enumerate().for_each(|(s, dx_s)| {
        let og_s = &og[s * out_sz..(s + 1) * out_sz];
        let mut dcol = vec![0.0; m * k];
        for co in 0..g.cout {
            let wr = &w[co * k..(co + 1) * k];
            for mi in 0..m {
                let gv = og_s[co * m + mi];
                if gv != 0.0 {
                    let row = &mut dcol[mi * k..(mi + 1) * k];
                    for i in 0..k {
                        row[i] += gv * wr[i];
                    }
                }
            }
        }
        col2im(g, &dcol, dx_s);
    });
    dx
}

/// Gradient w.r.t. the conv weights; per-sample partials summed in batch order.
pub(crate) fn conv_dw(g: &ConvGeom, x: &[f64], og: &[f64]) -> Vec<f64> {
    let (k, m) = (g.k(), g.m());
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * m;
    let partials: Vec<Vec<f64>> = (0..g.n)
        .into_par_iter()
        .map(|s| {
            let og_s = &og[s * out_sz..(s + 1) * out_sz];
            let mut col = vec![0.0; m * k];
            im2col(g, &x[s * in_sz..(s + 1) * in_sz], &mut col);
            let mut dw = vec![0.0; g.cout * k];
            for co in 0..g.cout {
                let dwr = &mut dw[co * k..(co + 1) * k];
                for mi in 0..m {
                    let gv = og_s[co * m + mi];
                    if gv != 0.0 {
                        let row = &col[mi * k..(mi + 1) * k];
                        for i in 0..k {
                            dwr[i] += gv * row[i];
                        }
                    }
                }
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0; g.cout * k];
    for p in partials {
        for (a, v) in dw.iter_mut().zip(p) {
            *a += v;
        }
    }
    dw
}

pub(crate) fn conv_db(g: &ConvGeom, og: &[f64]) -> Vec<f64> {
    let m = g.m();
    let mut db = vec![0.0; g.cout];
    for s in 0..g.n {
        for co in 0..g.cout {
            let base = (s * g.cout + co) * m;
            let mut acc = 0.0;
            for mi in 0..m {
                acc += og[base + mi];
            }
            db[co] += acc;
        }
    }
    db
}
