//! The differentiable op set: elementwise arithmetic, convolution and its
//! transpose, upsampling, pooling, batch norm and the losses.
//!
//! Broadcasting is deliberately absent; shapes must match exactly so that
//! wiring mistakes surface at the op boundary.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::conv::{conv_db, conv_dw, conv_dx, conv_fwd, ConvGeom};
use crate::tensor::{Graph, Labels, Shape, Tensor};

impl Graph {
    fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                op,
                format!("{} vs {}", a.shape(), b.shape()),
            ));
        }
        Ok(())
    }

    /// Elementwise sum; shapes must be identical.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::check_same("add", a, b)?;
        let out: Vec<f64> = {
            let (ad, bd) = (a.data(), b.data());
            ad.iter().zip(bd.iter()).map(|(x, y)| x + y).collect()
        };
        let out = self.finish("add", a.shape(), out, &[a, b])?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(&out, move |og| {
            if ac.requires_grad() {
                ac.accumulate_grad(og);
            }
            if bc.requires_grad() {
                bc.accumulate_grad(og);
            }
        });
        Ok(out)
    }

    /// Elementwise product; shapes must be identical.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        Self::check_same("mul", a, b)?;
        let out: Vec<f64> = {
            let (ad, bd) = (a.data(), b.data());
            ad.iter().zip(bd.iter()).map(|(x, y)| x * y).collect()
        };
        let out = self.finish("mul", a.shape(), out, &[a, b])?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(&out, move |og| {
            if ac.requires_grad() {
                let bd = bc.data();
                let g: Vec<f64> = og.iter().zip(bd.iter()).map(|(g, v)| g * v).collect();
                drop(bd);
                ac.accumulate_grad(&g);
            }
            if bc.requires_grad() {
                let ad = ac.data();
                let g: Vec<f64> = og.iter().zip(ad.iter()).map(|(g, v)| g * v).collect();
                drop(ad);
                bc.accumulate_grad(&g);
            }
        });
        Ok(out)
    }

    /// Multiply by a constant.
    pub fn scale(&self, x: &Tensor, k: f64) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|v| v * k).collect();
        let out = self.finish("scale", x.shape(), out, &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            let g: Vec<f64> = og.iter().map(|v| v * k).collect();
            xc.accumulate_grad(&g);
        });
        Ok(out)
    }

    pub fn relu(&self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = self.finish("relu", x.shape(), out, &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            let xd = xc.data();
            let g: Vec<f64> = og
                .iter()
                .zip(xd.iter())
                .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                .collect();
            drop(xd);
            xc.accumulate_grad(&g);
        });
        Ok(out)
    }

    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let out = self.finish("sum", Shape::scalar(), vec![s], &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            let g = vec![og[0]; xc.numel()];
            xc.accumulate_grad(&g);
        });
        Ok(out)
    }

    /// Concatenate along the channel axis; batch and spatial dims must agree.
    pub fn concat_channels(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::arg("concat_channels", "no inputs"));
        }
        let first = xs[0].shape();
        let mut c_total = 0;
        for x in xs {
            let s = x.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{} vs {}", s, first),
                ));
            }
            c_total += s.c;
        }
        let shape = Shape::new(first.n, c_total, first.h, first.w);
        let hw = first.h * first.w;
        let mut out = vec![0.0; shape.numel()];
        for n in 0..first.n {
            let mut c_off = 0;
            for x in xs {
                let s = x.shape();
                let xd = x.data();
                let src = &xd[n * s.c * hw..(n + 1) * s.c * hw];
                out[(n * c_total + c_off) * hw..(n * c_total + c_off + s.c) * hw]
                    .copy_from_slice(src);
                c_off += s.c;
            }
        }
        let out = self.finish("concat_channels", shape, out, xs)?;
        let parts: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
        self.record(&out, move |og| {
            for n in 0..first.n {
                let mut c_off = 0;
                for x in &parts {
                    let s = x.shape();
                    if x.requires_grad() {
                        let mut g = vec![0.0; s.numel()];
                        g[n * s.c * hw..(n + 1) * s.c * hw].copy_from_slice(
                            &og[(n * c_total + c_off) * hw..(n * c_total + c_off + s.c) * hw],
                        );
                        x.accumulate_grad(&g);
                    }
                    c_off += s.c;
                }
            }
        });
        Ok(out)
    }

    /// Cross-correlation with symmetric padding. Weights are
    /// `(c_out, c_in, kh, kw)`; see [`Graph::conv2d_rect`] for separable
    /// kernels that need different padding per axis.
    pub fn conv2d(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        self.conv2d_rect(x, w, b, stride, pad, pad)
    }

    pub fn conv2d_rect(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: Option<&Tensor>,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Tensor> {
        let geom = ConvGeom::for_conv("conv2d", x.shape(), w.shape(), stride, pad_h, pad_w)?;
        if let Some(bias) = b {
            if bias.numel() != geom.cout {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias has {} values, expected {}", bias.numel(), geom.cout),
                ));
            }
        }
        let out = {
            let xd = x.data();
            let wd = w.data();
            match b {
                Some(bias) => conv_fwd(&geom, &xd, &wd, Some(&bias.data())),
                None => conv_fwd(&geom, &xd, &wd, None),
            }
        };
        let mut inputs = vec![x, w];
        if let Some(bias) = b {
            inputs.push(bias);
        }
        let out = self.finish("conv2d", geom.out_shape(), out, &inputs)?;
        let (xc, wc, bc) = (x.clone(), w.clone(), b.cloned());
        self.record(&out, move |og| {
            if wc.requires_grad() {
                let xd = xc.data();
                wc.accumulate_grad(&conv_dw(&geom, &xd, og));
            }
            if xc.requires_grad() {
                let wd = wc.data();
                xc.accumulate_grad(&conv_dx(&geom, og, &wd));
            }
            if let Some(bias) = &bc {
                if bias.requires_grad() {
                    bias.accumulate_grad(&conv_db(&geom, og));
                }
            }
        });
        Ok(out)
    }

    /// Transposed convolution: the adjoint of [`Graph::conv2d`] with the same
    /// weights. Weights are `(c_in, c_out, kh, kw)`; the output spatial size
    /// is `stride·(i−1)+k−2·pad`.
    pub fn deconv2d(&self, x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let geom = ConvGeom::for_deconv("deconv2d", x.shape(), w.shape(), stride, pad)?;
        let out = {
            let xd = x.data();
            let wd = w.data();
            conv_dx(&geom, &xd, &wd)
        };
        let out = self.finish("deconv2d", geom.in_shape(), out, &[x, w])?;
        let (xc, wc) = (x.clone(), w.clone());
        self.record(&out, move |og| {
            if wc.requires_grad() {
                let xd = xc.data();
                wc.accumulate_grad(&conv_dw(&geom, og, &xd));
            }
            if xc.requires_grad() {
                let wd = wc.data();
                xc.accumulate_grad(&conv_fwd(&geom, og, &wd, None));
            }
        });
        Ok(out)
    }

    /// Bilinear upsampling by an integer factor, align-corners-false:
    /// source centers sit at `(i + 0.5)/factor − 0.5`, clamped at the border.
    pub fn bilinear_upsample(&self, x: &Tensor, factor: usize) -> Result<Tensor> {
        if factor < 1 {
            return Err(Error::arg("bilinear_upsample", "factor must be >= 1"));
        }
        let s = x.shape();
        let (oh, ow) = (s.h * factor, s.w * factor);
        let axis = |in_len: usize, out_len: usize| -> Vec<(usize, usize, f64)> {
            (0..out_len)
                .map(|i| {
                    let src = ((i as f64 + 0.5) / factor as f64 - 0.5)
                        .max(0.0)
                        .min(in_len as f64 - 1.0);
                    let i0 = src.floor() as usize;
                    let i1 = (i0 + 1).min(in_len - 1);
                    (i0, i1, src - i0 as f64)
                })
                .collect()
        };
        let ys = axis(s.h, oh);
        let xs = axis(s.w, ow);
        let out_shape = Shape::new(s.n, s.c, oh, ow);
        let mut out = vec![0.0; out_shape.numel()];
        {
            let xd = x.data();
            for plane in 0..s.n * s.c {
                let src = &xd[plane * s.h * s.w..(plane + 1) * s.h * s.w];
                let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        dst[oy * ow + ox] = src[y0 * s.w + x0] * (1.0 - fy) * (1.0 - fx)
                            + src[y0 * s.w + x1] * (1.0 - fy) * fx
                            + src[y1 * s.w + x0] * fy * (1.0 - fx)
                            + src[y1 * s.w + x1] * fy * fx;
                    }
                }
            }
        }
        let out = self.finish("bilinear_upsample", out_shape, out, &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            let mut g = vec![0.0; s.numel()];
            for plane in 0..s.n * s.c {
                let dst = &mut g[plane * s.h * s.w..(plane + 1) * s.h * s.w];
                let src = &og[plane * oh * ow..(plane + 1) * oh * ow];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let v = src[oy * ow + ox];
                        dst[y0 * s.w + x0] += v * (1.0 - fy) * (1.0 - fx);
                        dst[y0 * s.w + x1] += v * (1.0 - fy) * fx;
                        dst[y1 * s.w + x0] += v * fy * (1.0 - fx);
                        dst[y1 * s.w + x1] += v * fy * fx;
                    }
                }
            }
            xc.accumulate_grad(&g);
        });
        Ok(out)
    }

    /// Rearrange `(n, c·r², h, w)` into `(n, c, r·h, r·w)`:
    /// `out[n, c, r·i+a, r·j+b] = x[n, c·r² + a·r + b, i, j]`.
    /// A pure permutation; the gradient is the inverse permutation.
    pub fn sub_pixel_shuffle(&self, x: &Tensor, r: usize) -> Result<Tensor> {
        if r < 1 {
            return Err(Error::arg("sub_pixel_shuffle", "factor must be >= 1"));
        }
        let s = x.shape();
        if s.c % (r * r) != 0 {
            return Err(Error::arg(
                "sub_pixel_shuffle",
                format!("{} channels not divisible by {}", s.c, r * r),
            ));
        }
        let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
        let out = {
            let xd = x.data();
            shuffle_raw(s, &xd, r)
        };
        let out = self.finish("sub_pixel_shuffle", out_shape, out, &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            xc.accumulate_grad(&unshuffle_raw(out_shape, og, r));
        });
        Ok(out)
    }

    /// 2×2 max pooling with stride 2; spatial dims must be even.
    /// Ties route the gradient to the first maximum in scan order.
    pub fn max_pool2(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.h % 2 != 0 || s.w % 2 != 0 {
            return Err(Error::shape(
                "max_pool2",
                format!("spatial dims must be even, got {}", s),
            ));
        }
        let (oh, ow) = (s.h / 2, s.w / 2);
        let out_shape = Shape::new(s.n, s.c, oh, ow);
        let mut out = vec![0.0; out_shape.numel()];
        let mut arg = vec![0u32; out_shape.numel()];
        {
            let xd = x.data();
            for plane in 0..s.n * s.c {
                let src = &xd[plane * s.h * s.w..(plane + 1) * s.h * s.w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0usize;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = (oy * 2 + dy) * s.w + ox * 2 + dx;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                        out[plane * oh * ow + oy * ow + ox] = best;
                        arg[plane * oh * ow + oy * ow + ox] = best_i as u32;
                    }
                }
            }
        }
        let out = self.finish("max_pool2", out_shape, out, &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            let mut g = vec![0.0; s.numel()];
            for plane in 0..s.n * s.c {
                for o in 0..oh * ow {
                    g[plane * s.h * s.w + arg[plane * oh * ow + o] as usize] +=
                        og[plane * oh * ow + o];
                }
            }
            xc.accumulate_grad(&g);
        });
        Ok(out)
    }

    /// Mean over the spatial dims, `(n, c, h, w) -> (n, c, 1, 1)`.
    pub fn global_avg_pool(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let hw = (s.h * s.w) as f64;
        let mut out = vec![0.0; s.n * s.c];
        {
            let xd = x.data();
            for plane in 0..s.n * s.c {
                out[plane] =
                    xd[plane * s.h * s.w..(plane + 1) * s.h * s.w].iter().sum::<f64>() / hw;
            }
        }
        let out = self.finish("global_avg_pool", Shape::new(s.n, s.c, 1, 1), out, &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            let mut g = vec![0.0; s.numel()];
            for plane in 0..s.n * s.c {
                let v = og[plane] / hw;
                for e in &mut g[plane * s.h * s.w..(plane + 1) * s.h * s.w] {
                    *e = v;
                }
            }
            xc.accumulate_grad(&g);
        });
        Ok(out)
    }

    /// Reverse the width axis.
    pub fn flip_w(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        let out = {
            let xd = x.data();
            flip_w_raw(s, &xd)
        };
        let out = self.finish("flip_w", s, out, &[x])?;
        let xc = x.clone();
        self.record(&out, move |og| {
            xc.accumulate_grad(&flip_w_raw(s, og));
        });
        Ok(out)
    }

    /// Batch normalization over `(n, h, w)` per channel. In training mode the
    /// batch statistics normalize and the running statistics are updated; in
    /// frozen mode the running statistics normalize and stay fixed.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        state: &BnState,
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<Tensor> {
        let s = x.shape();
        if gamma.numel() != s.c || beta.numel() != s.c {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must have {} values", s.c),
            ));
        }
        if state.mean.borrow().len() != s.c {
            return Err(Error::shape(
                "batch_norm",
                format!("running stats sized {}, expected {}", state.mean.borrow().len(), s.c),
            ));
        }
        let hw = s.h * s.w;
        let count = (s.n * hw) as f64;
        let (mean, var) = if training {
            let xd = x.data();
            let mut mean = vec![0.0; s.c];
            let mut var = vec![0.0; s.c];
            for c in 0..s.c {
                let mut acc = 0.0;
                for n in 0..s.n {
                    let base = (n * s.c + c) * hw;
                    for i in 0..hw {
                        acc += xd[base + i];
                    }
                }
                let m = acc / count;
                let mut vacc = 0.0;
                for n in 0..s.n {
                    let base = (n * s.c + c) * hw;
                    for i in 0..hw {
                        let d = xd[base + i] - m;
                        vacc += d * d;
                    }
                }
                mean[c] = m;
                var[c] = vacc / count;
            }
            {
                // running stats follow the op's precision so checkpoints
                // round-trip bit-exactly in single mode
                let round = self.precision() == crate::tensor::Precision::Single;
                let mut rm = state.mean.borrow_mut();
                let mut rv = state.var.borrow_mut();
                for c in 0..s.c {
                    rm[c] = (1.0 - momentum) * rm[c] + momentum * mean[c];
                    rv[c] = (1.0 - momentum) * rv[c] + momentum * var[c];
                    if round {
                        rm[c] = rm[c] as f32 as f64;
                        rv[c] = rv[c] as f32 as f64;
                    }
                }
            }
            (mean, var)
        } else {
            (state.mean.borrow().clone(), state.var.borrow().clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; s.numel()];
        {
            let xd = x.data();
            let gd = gamma.data();
            let bd = beta.data();
            for n in 0..s.n {
                for c in 0..s.c {
                    let base = (n * s.c + c) * hw;
                    let (m, is, g, b) = (mean[c], inv_std[c], gd[c], bd[c]);
                    for i in 0..hw {
                        out[base + i] = (xd[base + i] - m) * is * g + b;
                    }
                }
            }
        }
        let out = self.finish("batch_norm", s, out, &[x, gamma, beta])?;
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        self.record(&out, move |og| {
            let xd = xc.data();
            let gd = gc.data();
            let mut dgamma = vec![0.0; s.c];
            let mut dbeta = vec![0.0; s.c];
            let mut dx = vec![0.0; s.numel()];
            for c in 0..s.c {
                let (m, is) = (mean[c], inv_std[c]);
                let mut sum_og = 0.0;
                let mut sum_og_xhat = 0.0;
                for n in 0..s.n {
                    let base = (n * s.c + c) * hw;
                    for i in 0..hw {
                        let xh = (xd[base + i] - m) * is;
                        sum_og += og[base + i];
                        sum_og_xhat += og[base + i] * xh;
                    }
                }
                dbeta[c] = sum_og;
                dgamma[c] = sum_og_xhat;
                let gs = gd[c] * is;
                if training {
                    let mean_og = sum_og / count;
                    let mean_og_xhat = sum_og_xhat / count;
                    for n in 0..s.n {
                        let base = (n * s.c + c) * hw;
                        for i in 0..hw {
                            let xh = (xd[base + i] - m) * is;
                            dx[base + i] = gs * (og[base + i] - mean_og - xh * mean_og_xhat);
                        }
                    }
                } else {
                    for n in 0..s.n {
                        let base = (n * s.c + c) * hw;
                        for i in 0..hw {
                            dx[base + i] = gs * og[base + i];
                        }
                    }
                }
            }
            drop(xd);
            drop(gd);
            if xc.requires_grad() {
                xc.accumulate_grad(&dx);
            }
            if gc.requires_grad() {
                gc.accumulate_grad(&dgamma);
            }
            if bc.requires_grad() {
                bc.accumulate_grad(&dbeta);
            }
        });
        Ok(out)
    }

    /// Mean negative log-softmax over non-ignored pixels, stabilized by
    /// max-subtraction. With every pixel ignored the loss is 0 with zero
    /// gradient.
    pub fn softmax_cross_entropy(
        &self,
        logits: &Tensor,
        labels: &Labels,
        ignore_label: u8,
    ) -> Result<Tensor> {
        let s = logits.shape();
        if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!(
                    "labels ({}, {}, {}) vs logits {}",
                    labels.n, labels.h, labels.w, s
                ),
            ));
        }
        let classes = s.c;
        for &l in &labels.data {
            if l != ignore_label && l as usize >= classes {
                return Err(Error::arg(
                    "softmax_cross_entropy",
                    format!("label {l} out of range for {classes} classes"),
                ));
            }
        }
        let hw = s.h * s.w;
        let mut total = 0.0;
        let mut valid = 0usize;
        {
            let zd = logits.data();
            for n in 0..s.n {
                for p in 0..hw {
                    let t = labels.data[n * hw + p];
                    if t == ignore_label {
                        continue;
                    }
                    valid += 1;
                    let mut m = f64::NEG_INFINITY;
                    for c in 0..classes {
                        m = m.max(zd[(n * classes + c) * hw + p]);
                    }
                    let mut lse = 0.0;
                    for c in 0..classes {
                        lse += (zd[(n * classes + c) * hw + p] - m).exp();
                    }
                    total += m + lse.ln() - zd[(n * classes + t as usize) * hw + p];
                }
            }
        }
        let loss = if valid == 0 { 0.0 } else { total / valid as f64 };
        let out = self.finish("softmax_cross_entropy", Shape::scalar(), vec![loss], &[logits])?;
        let zc = logits.clone();
        let labels = labels.clone();
        self.record(&out, move |og| {
            if valid == 0 {
                return;
            }
            let scale = og[0] / valid as f64;
            let zd = zc.data();
            let mut g = vec![0.0; s.numel()];
            for n in 0..s.n {
                for p in 0..hw {
                    let t = labels.data[n * hw + p];
                    if t == ignore_label {
                        continue;
                    }
                    let mut m = f64::NEG_INFINITY;
                    for c in 0..classes {
                        m = m.max(zd[(n * classes + c) * hw + p]);
                    }
                    let mut denom = 0.0;
                    for c in 0..classes {
                        denom += (zd[(n * classes + c) * hw + p] - m).exp();
                    }
                    for c in 0..classes {
                        let p_c = (zd[(n * classes + c) * hw + p] - m).exp() / denom;
                        let y = if c == t as usize { 1.0 } else { 0.0 };
                        g[(n * classes + c) * hw + p] = (p_c - y) * scale;
                    }
                }
            }
            drop(zd);
            zc.accumulate_grad(&g);
        });
        Ok(out)
    }

    /// Mean binary cross-entropy with logits against constant multi-label
    /// targets in `[0, 1]`, one per `(n, c)`; logits are `(n, c, 1, 1)`.
    pub fn sigmoid_bce(&self, logits: &Tensor, targets: &[f64]) -> Result<Tensor> {
        let s = logits.shape();
        if (s.h, s.w) != (1, 1) || targets.len() != s.n * s.c {
            return Err(Error::shape(
                "sigmoid_bce",
                format!("logits {} with {} targets", s, targets.len()),
            ));
        }
        let count = targets.len() as f64;
        let mut total = 0.0;
        {
            let zd = logits.data();
            for (i, &t) in targets.iter().enumerate() {
                let z = zd[i];
                total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            }
        }
        let out = self.finish("sigmoid_bce", Shape::scalar(), vec![total / count], &[logits])?;
        let zc = logits.clone();
        let targets = targets.to_vec();
        self.record(&out, move |og| {
            let scale = og[0] / count;
            let zd = zc.data();
            let g: Vec<f64> = zd
                .iter()
                .zip(targets.iter())
                .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                .collect();
            drop(zd);
            zc.accumulate_grad(&g);
        });
        Ok(out)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn shuffle_raw(s: Shape, x: &[f64], r: usize) -> Vec<f64> {
    let oc = s.c / (r * r);
    let (oh, ow) = (s.h * r, s.w * r);
    let mut out = vec![0.0; x.len()];
    for n in 0..s.n {
        for c in 0..oc {
            for a in 0..r {
                for b in 0..r {
                    let ic = c * r * r + a * r + b;
                    for i in 0..s.h {
                        for j in 0..s.w {
                            out[((n * oc + c) * oh + r * i + a) * ow + r * j + b] =
                                x[((n * s.c + ic) * s.h + i) * s.w + j];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Inverse of [`shuffle_raw`]: `out_shape` is the shuffled shape.
pub(crate) fn unshuffle_raw(out_shape: Shape, y: &[f64], r: usize) -> Vec<f64> {
    let s = Shape::new(
        out_shape.n,
        out_shape.c * r * r,
        out_shape.h / r,
        out_shape.w / r,
    );
    let oc = out_shape.c;
    let (oh, ow) = (out_shape.h, out_shape.w);
    let mut out = vec![0.0; y.len()];
    for n in 0..s.n {
        for c in 0..oc {
            for a in 0..r {
                for b in 0..r {
                    let ic = c * r * r + a * r + b;
                    for i in 0..s.h {
                        for j in 0..s.w {
                            out[((n * s.c + ic) * s.h + i) * s.w + j] =
                                y[((n * oc + c) * oh + r * i + a) * ow + r * j + b];
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn flip_w_raw(s: Shape, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for plane in 0..s.n * s.c * s.h {
        let src = &x[plane * s.w..(plane + 1) * s.w];
        let dst = &mut out[plane * s.w..(plane + 1) * s.w];
        for j in 0..s.w {
            dst[j] = src[s.w - 1 - j];
        }
    }
    out
}

/// Running statistics of one batch-norm layer, shared with the checkpoint
/// store.
#[derive(Clone)]
pub struct BnState {
    pub mean: Rc<RefCell<Vec<f64>>>,
    pub var: Rc<RefCell<Vec<f64>>>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            mean: Rc::new(RefCell::new(vec![0.0; channels])),
            var: Rc::new(RefCell::new(vec![1.0; channels])),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_scalar_fn;
    use crate::tensor::reference::{bilinear_point, lse_cross_entropy, naive_conv2d};
    use crate::tensor::Precision;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn dg() -> Graph {
        Graph::new(Precision::Double)
    }

    fn randt(rng: &mut ChaCha8Rng, shape: Shape, requires_grad: bool) -> Tensor {
        let data: Vec<f64> = (0..shape.numel())
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        if requires_grad {
            Tensor::param(shape, data).unwrap()
        } else {
            Tensor::from_vec(shape, data).unwrap()
        }
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let g = dg();
        let x = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 3, 3), 1.0);
        let y = g.conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn identity_delta_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = dg();
        let x = randt(&mut rng, Shape::new(2, 3, 5, 4), false);
        let ws = Shape::new(3, 3, 3, 3);
        let mut w = vec![0.0; ws.numel()];
        for c in 0..3 {
            w[ws.at(c, c, 1, 1)] = 1.0;
        }
        let w = Tensor::from_vec(ws, w).unwrap();
        let y = g.conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_matches_six_nested_loop_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = dg();
        let xs = Shape::new(1, 2, 5, 5);
        let ws = Shape::new(3, 2, 3, 3);
        let x = randt(&mut rng, xs, false);
        let w = randt(&mut rng, ws, false);
        let y = g.conv2d(&x, &w, None, 1, 0).unwrap();
        let want = naive_conv2d(xs, &x.data(), ws, &w.data(), None, 1, 0, 0);
        for (a, e) in y.to_vec().iter().zip(&want) {
            assert!((a - e).abs() < 1e-13);
        }
    }

    #[test]
    fn deconv_stride2_scatters_to_even_positions() {
        let g = dg();
        let x = Tensor::full(Shape::new(1, 1, 2, 2), 1.0);
        let w = Tensor::full(Shape::new(1, 1, 1, 1), 1.0);
        let y = g.deconv2d(&x, &w, 2, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        let want = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(y.to_vec(), want);
    }

    #[test]
    fn deconv_identity_delta_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = dg();
        let x = randt(&mut rng, Shape::new(1, 2, 4, 4), false);
        let ws = Shape::new(2, 2, 3, 3);
        let mut w = vec![0.0; ws.numel()];
        for c in 0..2 {
            w[ws.at(c, c, 1, 1)] = 1.0;
        }
        let w = Tensor::from_vec(ws, w).unwrap();
        let y = g.deconv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv_and_deconv_are_adjoint() {
        // <conv2d(x, w), y> == <x, deconv2d(y, w)> within 1e-10, double mode,
        // on geometries where the conv consumes its whole input.
        for seed in 0..5u64 {
            let mut r = ChaCha8Rng::seed_from_u64(seed * 77 + 5);
            for &(h, w_dim, k, stride, pad) in &[(7usize, 7usize, 3usize, 2usize, 1usize), (6, 5, 3, 1, 1)] {
                let g = dg();
                let x = randt(&mut r, Shape::new(2, 3, h, w_dim), false);
                let w = randt(&mut r, Shape::new(4, 3, k, k), false);
                let cy = g.conv2d(&x, &w, None, stride, pad).unwrap();
                let y = randt(&mut r, cy.shape(), false);
                let dy = g.deconv2d(&y, &w, stride, pad).unwrap();
                assert_eq!(dy.shape(), x.shape());
                let lhs: f64 = cy.data().iter().zip(y.data().iter()).map(|(a, b)| a * b).sum();
                let rhs: f64 = x.data().iter().zip(dy.data().iter()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn bilinear_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = dg();
        let x = randt(&mut rng, Shape::new(1, 2, 3, 3), false);
        let y = g.bilinear_upsample(&x, 1).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn bilinear_preserves_constants() {
        let g = dg();
        let x = Tensor::full(Shape::new(2, 3, 2, 2), 3.5);
        let y = g.bilinear_upsample(&x, 4).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 8, 8));
        for v in y.to_vec() {
            assert!((v - 3.5).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_matches_closed_form_oracle() {
        let g = dg();
        let plane = vec![0.0, 1.0, 2.0, 3.0];
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), plane.clone()).unwrap();
        let y = g.bilinear_upsample(&x, 2).unwrap();
        let got = y.to_vec();
        for oy in 0..4 {
            for ox in 0..4 {
                let want = bilinear_point(&plane, 2, 2, oy, ox, 2);
                assert!((got[oy * 4 + ox] - want).abs() < 1e-12);
            }
        }
        // frozen values from the scalar oracle
        let want = vec![
            0.0, 0.25, 0.75, 1.0, //
            0.5, 0.75, 1.25, 1.5, //
            1.5, 1.75, 2.25, 2.5, //
            2.0, 2.25, 2.75, 3.0,
        ];
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffle_factor_one_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let g = dg();
        let x = randt(&mut rng, Shape::new(1, 3, 2, 2), false);
        assert_eq!(g.sub_pixel_shuffle(&x, 1).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn shuffle_places_channels_by_index_formula() {
        let g = dg();
        let x = Tensor::from_vec(Shape::new(1, 4, 1, 1), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = g.sub_pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.to_vec(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn shuffle_is_a_permutation_and_inverts_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = dg();
        let s = Shape::new(2, 8, 3, 5);
        let x = randt(&mut rng, s, false);
        let y = g.sub_pixel_shuffle(&x, 2).unwrap();
        let mut a = x.to_vec();
        let mut b = y.to_vec();
        let back = unshuffle_raw(y.shape(), &y.data(), 2);
        assert_eq!(back, x.to_vec());
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        // summed in one canonical (sorted) order both sums are bit-identical
        let sum_a: f64 = a.iter().sum();
        let sum_b: f64 = b.iter().sum();
        assert_eq!(sum_a, sum_b);
    }

    #[test]
    fn shuffle_rejects_indivisible_channels() {
        let g = dg();
        let x = Tensor::zeros(Shape::new(1, 6, 2, 2));
        assert!(g.sub_pixel_shuffle(&x, 2).is_err());
    }

    #[test]
    fn batch_norm_passes_through_normalized_data() {
        // per-channel zero-mean unit-variance data, gamma=1 beta=0
        let g = dg();
        let x = Tensor::from_vec(
            Shape::new(2, 2, 1, 2),
            vec![-1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0],
        )
        .unwrap();
        let gamma = Tensor::full(Shape::new(1, 1, 1, 2), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let st = BnState::new(2);
        let y = g.batch_norm(&x, &gamma, &beta, &st, 0.1, 1e-5, true).unwrap();
        for (a, b) in y.to_vec().iter().zip(x.to_vec().iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}"); // epsilon effect only
        }
    }

    #[test]
    fn batch_norm_with_zero_gamma_outputs_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let g = dg();
        let x = randt(&mut rng, Shape::new(2, 3, 4, 4), false);
        let gamma = Tensor::zeros(Shape::new(1, 1, 1, 3));
        let beta = Tensor::full(Shape::new(1, 1, 1, 3), 5.0);
        let st = BnState::new(3);
        let y = g.batch_norm(&x, &gamma, &beta, &st, 0.1, 1e-5, true).unwrap();
        for v in y.to_vec() {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn batch_norm_output_statistics_are_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = dg();
        let s = Shape::new(4, 3, 8, 8);
        // spread the data so the epsilon in 1/sqrt(var + eps) stays below the
        // 1e-5 tolerance on the output variance
        let data: Vec<f64> = (0..s.numel()).map(|_| rng.random::<f64>() * 6.0 - 1.0).collect();
        let x = Tensor::from_vec(s, data).unwrap();
        let gamma = Tensor::full(Shape::new(1, 1, 1, 3), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 1, 1, 3));
        let st = BnState::new(3);
        let y = g.batch_norm(&x, &gamma, &beta, &st, 0.1, 1e-5, true).unwrap();
        let yd = y.to_vec();
        let hw = 64;
        let count = (4 * hw) as f64;
        for c in 0..3 {
            let mut mean = 0.0;
            for n in 0..4 {
                for i in 0..hw {
                    mean += yd[(n * 3 + c) * hw + i];
                }
            }
            mean /= count;
            let mut var = 0.0;
            for n in 0..4 {
                for i in 0..hw {
                    let d = yd[(n * 3 + c) * hw + i] - mean;
                    var += d * d;
                }
            }
            var /= count;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn frozen_batch_norm_uses_running_stats_and_keeps_them() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let g = dg();
        let x = randt(&mut rng, Shape::new(2, 2, 3, 3), false);
        let gamma = Tensor::full(Shape::new(1, 1, 1, 2), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 1, 1, 2));
        let st = BnState::new(2);
        *st.mean.borrow_mut() = vec![0.25, -0.5];
        *st.var.borrow_mut() = vec![4.0, 0.25];
        let y = g.batch_norm(&x, &gamma, &beta, &st, 0.1, 1e-5, false).unwrap();
        let want: Vec<f64> = x
            .to_vec()
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = (i / 9) % 2;
                let (m, va) = if c == 0 { (0.25, 4.0) } else { (-0.5, 0.25) };
                (v - m) / (va + 1e-5f64).sqrt()
            })
            .collect();
        for (a, e) in y.to_vec().iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(*st.mean.borrow(), vec![0.25, -0.5]);
        assert_eq!(*st.var.borrow(), vec![4.0, 0.25]);
    }

    #[test]
    fn elementwise_examples() {
        let g = dg();
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![-1.0, 2.0]).unwrap();
        assert_eq!(g.relu(&x).unwrap().to_vec(), vec![0.0, 2.0]);

        let ones = Tensor::full(x.shape(), 1.0);
        assert_eq!(g.mul(&x, &ones).unwrap().to_vec(), x.to_vec());

        let a = Tensor::zeros(Shape::new(2, 3, 4, 5));
        let b = Tensor::zeros(Shape::new(2, 5, 4, 5));
        let c = g.concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 8, 4, 5));
    }

    #[test]
    fn no_implicit_broadcasting() {
        let g = dg();
        let a = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 2, 2, 1));
        assert!(g.add(&a, &b).is_err());
        assert!(g.mul(&a, &b).is_err());
    }

    #[test]
    fn concat_restores_parts_in_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let g = dg();
        let a = randt(&mut rng, Shape::new(2, 3, 2, 2), false);
        let b = randt(&mut rng, Shape::new(2, 2, 2, 2), false);
        let c = g.concat_channels(&[&a, &b]).unwrap();
        let cd = c.to_vec();
        let ad = a.to_vec();
        // sample 1 of `a` sits after sample 0 of the concat
        assert_eq!(&cd[0..12], &ad[0..12]);
        assert_eq!(&cd[20..32], &ad[12..24]);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let g = dg();
        let logits = Tensor::zeros(Shape::new(2, 4, 3, 3));
        let labels = Labels::new(2, 3, 3, vec![1; 18]).unwrap();
        let loss = g.softmax_cross_entropy(&logits, &labels, crate::tensor::IGNORE_LABEL).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_give_zero_loss() {
        let g = dg();
        let s = Shape::new(1, 3, 2, 2);
        let mut z = vec![0.0; s.numel()];
        for p in 0..4 {
            z[s.at(0, 2, p / 2, p % 2)] = 1000.0;
        }
        let logits = Tensor::from_vec(s, z).unwrap();
        let labels = Labels::new(1, 2, 2, vec![2; 4]).unwrap();
        let loss = g.softmax_cross_entropy(&logits, &labels, crate::tensor::IGNORE_LABEL).unwrap();
        assert!(loss.item().abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_matches_scalar_lse_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let g = dg();
        let s = Shape::new(2, 5, 3, 2);
        let logits = randt(&mut rng, s, false);
        let lbl: Vec<u8> = (0..12)
            .map(|_| {
                let v = rng.random_range(0..6);
                if v == 5 { crate::tensor::IGNORE_LABEL } else { v as u8 }
            })
            .collect();
        let labels = Labels::new(2, 3, 2, lbl.clone()).unwrap();
        let loss = g.softmax_cross_entropy(&logits, &labels, crate::tensor::IGNORE_LABEL).unwrap();

        let zd = logits.to_vec();
        let hw = 6;
        let mut total = 0.0;
        let mut cnt = 0;
        for n in 0..2 {
            for p in 0..hw {
                let t = lbl[n * hw + p];
                if t == crate::tensor::IGNORE_LABEL {
                    continue;
                }
                let pixel: Vec<f64> = (0..5).map(|c| zd[(n * 5 + c) * hw + p]).collect();
                total += lse_cross_entropy(&pixel, t as usize);
                cnt += 1;
            }
        }
        assert!(cnt > 0);
        assert!((loss.item() - total / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn fully_ignored_loss_is_zero_with_zero_gradient() {
        let g = dg();
        let logits = Tensor::param(Shape::new(1, 3, 2, 2), vec![0.5; 12]).unwrap();
        let labels = Labels::new(1, 2, 2, vec![crate::tensor::IGNORE_LABEL; 4]).unwrap();
        let loss = g.softmax_cross_entropy(&logits, &labels, crate::tensor::IGNORE_LABEL).unwrap();
        assert_eq!(loss.item(), 0.0);
        g.backward(&loss).unwrap();
        assert!(logits.grad().is_none() || logits.grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let g = dg();
        let logits = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let labels = Labels::new(1, 1, 1, vec![3]).unwrap();
        assert!(g.softmax_cross_entropy(&logits, &labels, crate::tensor::IGNORE_LABEL).is_err());
    }

    #[test]
    fn bce_of_zero_logits_is_ln_two() {
        let g = dg();
        let z = Tensor::zeros(Shape::new(2, 3, 1, 1));
        let loss = g.sigmoid_bce(&z, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((loss.item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_pool_takes_window_maxima() {
        let g = dg();
        let x = Tensor::from_vec(
            Shape::new(1, 1, 2, 4),
            vec![1.0, 2.0, 5.0, 4.0, 3.0, 0.0, -1.0, 6.0],
        )
        .unwrap();
        let y = g.max_pool2(&x).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 6.0]);
        assert!(g.max_pool2(&Tensor::zeros(Shape::new(1, 1, 3, 4))).is_err());
    }

    #[test]
    fn global_avg_pool_is_the_plane_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let g = dg();
        let x = randt(&mut rng, Shape::new(2, 3, 4, 5), false);
        let y = g.global_avg_pool(&x).unwrap();
        let xd = x.to_vec();
        for plane in 0..6 {
            let mean = xd[plane * 20..(plane + 1) * 20].iter().sum::<f64>() / 20.0;
            assert!((y.to_vec()[plane] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let g = dg();
        let x = randt(&mut rng, Shape::new(2, 3, 4, 5), false);
        let y = g.flip_w(&g.flip_w(&x).unwrap()).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn ops_are_deterministic_across_runs() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let g = dg();
            let x = randt(&mut rng, Shape::new(4, 6, 8, 8), false);
            let w = randt(&mut rng, Shape::new(5, 6, 3, 3), false);
            g.conv2d(&x, &w, None, 1, 1).unwrap().to_vec()
        };
        assert_eq!(run(), run());
    }

    // Gradient smoke checks per op; the full multi-seed suite lives in the
    // acceptance tests.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = randt(&mut rng, Shape::new(2, 4, 6, 6), true);
        let w = randt(&mut rng, Shape::new(3, 4, 3, 3), true);
        let b = randt(&mut rng, Shape::new(1, 1, 1, 3), true);
        let r = randt(&mut rng, Shape::new(2, 3, 6, 6), false);
        let report = check_scalar_fn(
            |g| {
                let y = g.conv2d(&x, &w, Some(&b), 1, 1)?;
                g.sum(&g.mul(&y, &r)?)
            },
            &[("x", &x), ("w", &w), ("b", &b)],
            1e-5,
            24,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "conv2d {report:?}");

        let x = randt(&mut rng, Shape::new(2, 3, 4, 4), true);
        let w = randt(&mut rng, Shape::new(3, 2, 2, 2), true);
        let rs = Shape::new(2, 2, 8, 8);
        let r = randt(&mut rng, rs, false);
        let report = check_scalar_fn(
            |g| {
                let y = g.deconv2d(&x, &w, 2, 0)?;
                g.sum(&g.mul(&y, &r)?)
            },
            &[("x", &x), ("w", &w)],
            1e-5,
            24,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "deconv2d {report:?}");

        let x = randt(&mut rng, Shape::new(1, 2, 3, 3), true);
        let r = randt(&mut rng, Shape::new(1, 2, 6, 6), false);
        let report = check_scalar_fn(
            |g| {
                let y = g.bilinear_upsample(&x, 2)?;
                g.sum(&g.mul(&y, &r)?)
            },
            &[("x", &x)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "bilinear {report:?}");

        let x = randt(&mut rng, Shape::new(1, 8, 3, 3), true);
        let r = randt(&mut rng, Shape::new(1, 2, 6, 6), false);
        let report = check_scalar_fn(
            |g| {
                let y = g.sub_pixel_shuffle(&x, 2)?;
                g.sum(&g.mul(&y, &r)?)
            },
            &[("x", &x)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "shuffle {report:?}");

        let x = randt(&mut rng, Shape::new(2, 3, 4, 4), true);
        let gamma = randt(&mut rng, Shape::new(1, 1, 1, 3), true);
        let beta = randt(&mut rng, Shape::new(1, 1, 1, 3), true);
        let st = BnState::new(3);
        let r = randt(&mut rng, Shape::new(2, 3, 4, 4), false);
        let report = check_scalar_fn(
            |g| {
                let y = g.batch_norm(&x, &gamma, &beta, &st, 0.0, 1e-5, true)?;
                g.sum(&g.mul(&y, &r)?)
            },
            &[("x", &x), ("gamma", &gamma), ("beta", &beta)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "batch_norm {report:?}");

        let z = randt(&mut rng, Shape::new(2, 4, 3, 3), true);
        let labels = Labels::new(
            2,
            3,
            3,
            (0..18)
                .map(|i| if i % 7 == 0 { crate::tensor::IGNORE_LABEL } else { (i % 4) as u8 })
                .collect(),
        )
        .unwrap();
        let report = check_scalar_fn(
            |g| g.softmax_cross_entropy(&z, &labels, crate::tensor::IGNORE_LABEL),
            &[("logits", &z)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "softmax_ce {report:?}");

        let z = randt(&mut rng, Shape::new(2, 5, 1, 1), true);
        let targets: Vec<f64> = (0..10).map(|i| (i % 2) as f64).collect();
        let report = check_scalar_fn(
            |g| g.sigmoid_bce(&z, &targets),
            &[("logits", &z)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "sigmoid_bce {report:?}");

        let x = randt(&mut rng, Shape::new(1, 2, 4, 4), true);
        let r = randt(&mut rng, Shape::new(1, 2, 2, 2), false);
        let report = check_scalar_fn(
            |g| {
                let y = g.max_pool2(&x)?;
                g.sum(&g.mul(&y, &r)?)
            },
            &[("x", &x)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "max_pool2 {report:?}");

        let x = randt(&mut rng, Shape::new(2, 3, 4, 4), true);
        let r = randt(&mut rng, Shape::new(2, 3, 1, 1), false);
        let report = check_scalar_fn(
            |g| {
                let y = g.global_avg_pool(&x)?;
                g.sum(&g.mul(&y, &r)?)
            },
            &[("x", &x)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "global_avg_pool {report:?}");
    }
}
