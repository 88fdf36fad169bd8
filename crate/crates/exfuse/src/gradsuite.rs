//! Gradient-check suite over every differentiable op and block, shared by
//! the CLI `grad-check` command and the acceptance tests.
//!
//! Each case builds a random scalar loss (a probe-weighted sum of the op
//! output) in double precision and compares reverse-mode gradients against
//! central differences.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{dap_forward, BoundaryRefine, EcreModule, EcreVariant, GcnBlock, SebBranch, SsHead};
use crate::config::ModelConfig;
use crate::encoder::StagePlan;
use crate::error::{Error, Result};
use crate::layers::Params;
use crate::model::Model;
use crate::tensor::gradcheck::{check_scalar_fn, GradReport};
use crate::tensor::{BnState, Labels, Shape, Tensor, IGNORE_LABEL};

pub const OP_NAMES: [&str; 13] = [
    "conv2d",
    "deconv2d",
    "bilinear_upsample",
    "sub_pixel_shuffle",
    "batch_norm",
    "softmax_cross_entropy",
    "relu_add_mul_concat",
    "max_pool2",
    "global_avg_pool",
    "gcn_block",
    "boundary_refine",
    "ss_head",
    "seb_ecre_dap",
];

fn randt(rng: &mut ChaCha8Rng, shape: Shape, param: bool) -> Tensor {
    let data: Vec<f64> = (0..shape.numel())
        .map(|_| rng.random::<f64>() * 2.0 - 1.0)
        .collect();
    if param {
        Tensor::param(shape, data).unwrap()
    } else {
        Tensor::from_vec(shape, data).unwrap()
    }
}

fn worst(a: GradReport, b: GradReport) -> GradReport {
    if a.max_rel_err >= b.max_rel_err {
        a
    } else {
        b
    }
}

/// Check one op/block family for a single seed. `eps` follows the invariant
/// (1e-5); probes per tensor are capped to keep the suite fast.
pub fn check_op(name: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let eps = 1e-5;
    let cap = 16;
    let r = &mut rng;
    let report = match name {
        "conv2d" => {
            let x = randt(r, Shape::new(2, 3, 6, 6), true);
            let w = randt(r, Shape::new(4, 3, 3, 3), true);
            let b = randt(r, Shape::new(1, 1, 1, 4), true);
            let probe = randt(r, Shape::new(2, 4, 3, 3), false);
            check_scalar_fn(
                |g| {
                    let y = g.conv2d(&x, &w, Some(&b), 2, 1)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x), ("w", &w), ("b", &b)],
                eps,
                cap,
            )?
        }
        "deconv2d" => {
            let x = randt(r, Shape::new(2, 4, 3, 3), true);
            let w = randt(r, Shape::new(4, 3, 2, 2), true);
            let probe = randt(r, Shape::new(2, 3, 6, 6), false);
            check_scalar_fn(
                |g| {
                    let y = g.deconv2d(&x, &w, 2, 0)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x), ("w", &w)],
                eps,
                cap,
            )?
        }
        "bilinear_upsample" => {
            let x = randt(r, Shape::new(1, 3, 3, 4), true);
            let probe = randt(r, Shape::new(1, 3, 6, 8), false);
            check_scalar_fn(
                |g| {
                    let y = g.bilinear_upsample(&x, 2)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x)],
                eps,
                0,
            )?
        }
        "sub_pixel_shuffle" => {
            let x = randt(r, Shape::new(1, 12, 2, 3), true);
            let probe = randt(r, Shape::new(1, 3, 4, 6), false);
            check_scalar_fn(
                |g| {
                    let y = g.sub_pixel_shuffle(&x, 2)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x)],
                eps,
                0,
            )?
        }
        "batch_norm" => {
            let x = randt(r, Shape::new(3, 4, 4, 4), true);
            let gamma = randt(r, Shape::new(1, 1, 1, 4), true);
            let beta = randt(r, Shape::new(1, 1, 1, 4), true);
            let probe = randt(r, Shape::new(3, 4, 4, 4), false);
            let st = BnState::new(4);
            let train = check_scalar_fn(
                |g| {
                    let y = g.batch_norm(&x, &gamma, &beta, &st, 0.0, 1e-5, true)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x), ("gamma", &gamma), ("beta", &beta)],
                eps,
                cap,
            )?;
            *st.mean.borrow_mut() = (0..4).map(|i| 0.1 * i as f64).collect();
            *st.var.borrow_mut() = (0..4).map(|i| 0.5 + 0.2 * i as f64).collect();
            let frozen = check_scalar_fn(
                |g| {
                    let y = g.batch_norm(&x, &gamma, &beta, &st, 0.0, 1e-5, false)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x), ("gamma", &gamma), ("beta", &beta)],
                eps,
                cap,
            )?;
            worst(train, frozen)
        }
        "softmax_cross_entropy" => {
            let z = randt(r, Shape::new(2, 4, 3, 3), true);
            let labels = Labels::new(
                2,
                3,
                3,
                (0..18)
                    .map(|_| {
                        let v = r.random_range(0..5);
                        if v == 4 {
                            IGNORE_LABEL
                        } else {
                            v as u8
                        }
                    })
                    .collect(),
            )
            .unwrap();
            let ce = check_scalar_fn(
                |g| g.softmax_cross_entropy(&z, &labels, IGNORE_LABEL),
                &[("logits", &z)],
                eps,
                0,
            )?;
            let zb = randt(r, Shape::new(2, 3, 1, 1), true);
            let targets: Vec<f64> = (0..6).map(|i| ((i * 7) % 2) as f64).collect();
            let bce = check_scalar_fn(|g| g.sigmoid_bce(&zb, &targets), &[("logits", &zb)], eps, 0)?;
            worst(ce, bce)
        }
        "relu_add_mul_concat" => {
            let a = randt(r, Shape::new(1, 2, 3, 3), true);
            let b = randt(r, Shape::new(1, 2, 3, 3), true);
            let c = randt(r, Shape::new(1, 3, 3, 3), true);
            let probe = randt(r, Shape::new(1, 7, 3, 3), false);
            check_scalar_fn(
                |g| {
                    let s = g.add(&a, &b)?;
                    let m = g.mul(&s, &b)?;
                    let rl = g.relu(&m)?;
                    let cat = g.concat_channels(&[&rl, &c, &a])?;
                    g.sum(&g.mul(&cat, &probe)?)
                },
                &[("a", &a), ("b", &b), ("c", &c)],
                eps,
                0,
            )?
        }
        "max_pool2" => {
            let x = randt(r, Shape::new(2, 2, 4, 6), true);
            let probe = randt(r, Shape::new(2, 2, 2, 3), false);
            check_scalar_fn(
                |g| {
                    let y = g.max_pool2(&x)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x)],
                eps,
                0,
            )?
        }
        "global_avg_pool" => {
            let x = randt(r, Shape::new(2, 3, 3, 4), true);
            let probe = randt(r, Shape::new(2, 3, 1, 1), false);
            check_scalar_fn(
                |g| {
                    let y = g.global_avg_pool(&x)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &[("x", &x)],
                eps,
                0,
            )?
        }
        "gcn_block" => {
            let blk = GcnBlock::new(r, 2, 3, 5)?;
            let x = randt(r, Shape::new(1, 2, 5, 5), true);
            let probe = randt(r, Shape::new(1, 3, 5, 5), false);
            let mut p = Params::default();
            blk.collect("gcn", &mut p);
            let mut wrt: Vec<(&str, &Tensor)> = vec![("x", &x)];
            for (n, t) in &p.trainable {
                wrt.push((n.as_str(), t));
            }
            check_scalar_fn(
                |g| {
                    let y = blk.forward(g, &x)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &wrt,
                eps,
                8,
            )?
        }
        "boundary_refine" => {
            let blk = BoundaryRefine::new(r, 3);
            let x = randt(r, Shape::new(1, 3, 4, 4), true);
            let probe = randt(r, Shape::new(1, 3, 4, 4), false);
            let mut p = Params::default();
            blk.collect("br", &mut p);
            let mut wrt: Vec<(&str, &Tensor)> = vec![("x", &x)];
            for (n, t) in &p.trainable {
                wrt.push((n.as_str(), t));
            }
            check_scalar_fn(
                |g| {
                    let y = blk.forward(g, &x)?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &wrt,
                eps,
                8,
            )?
        }
        "ss_head" => {
            let head = SsHead::new(r, 3, 4, 4, 3);
            let x = randt(r, Shape::new(2, 3, 4, 4), true);
            let probe_l = randt(r, Shape::new(2, 3, 1, 1), false);
            let probe_t = randt(r, Shape::new(2, 4, 4, 4), false);
            let mut p = Params::default();
            head.collect("ss", &mut p);
            let mut wrt: Vec<(&str, &Tensor)> = vec![("x", &x)];
            for (n, t) in &p.trainable {
                wrt.push((n.as_str(), t));
            }
            check_scalar_fn(
                |g| {
                    let (logits, tap) = head.forward(g, &x, true)?;
                    let a = g.sum(&g.mul(&logits, &probe_l)?)?;
                    let b = g.sum(&g.mul(&tap, &probe_t)?)?;
                    g.add(&a, &b)
                },
                &wrt,
                eps,
                8,
            )?
        }
        "seb_ecre_dap" => {
            let seb = SebBranch::new(r, 3, &[4, 5], 4);
            let low = randt(r, Shape::new(1, 3, 4, 4), true);
            let h1 = randt(r, Shape::new(1, 4, 2, 2), true);
            let h2 = randt(r, Shape::new(1, 5, 1, 1), true);
            let probe = randt(r, Shape::new(1, 4, 4, 4), false);
            let mut p = Params::default();
            seb.collect("seb", &mut p);
            let mut wrt: Vec<(&str, &Tensor)> = vec![("low", &low), ("h1", &h1), ("h2", &h2)];
            for (n, t) in &p.trainable {
                wrt.push((n.as_str(), t));
            }
            let seb_rep = check_scalar_fn(
                |g| {
                    let y = seb.forward(g, &low, &[&h1, &h2])?;
                    g.sum(&g.mul(&y, &probe)?)
                },
                &wrt,
                eps,
                8,
            )?;

            let ecre = EcreModule::new(r, 8, 2, 3, EcreVariant::Ecre)?;
            let x = randt(r, Shape::new(1, 8, 2, 2), true);
            let probe_u = randt(r, Shape::new(1, 2, 4, 4), false);
            let probe_a = randt(r, Shape::new(1, 3, 4, 4), false);
            let mut p = Params::default();
            ecre.collect("ecre", &mut p);
            let mut wrt: Vec<(&str, &Tensor)> = vec![("x", &x)];
            for (n, t) in &p.trainable {
                wrt.push((n.as_str(), t));
            }
            let ecre_rep = check_scalar_fn(
                |g| {
                    let (up, aux) = ecre.forward(g, &x)?;
                    let a = g.sum(&g.mul(&up, &probe_u)?)?;
                    let b = g.sum(&g.mul(&aux.expect("supervised"), &probe_a)?)?;
                    g.add(&a, &b)
                },
                &wrt,
                eps,
                8,
            )?;

            let xd = randt(r, Shape::new(1, 3 * 9, 4, 4), true);
            let probe_d = randt(r, Shape::new(1, 3, 4, 4), false);
            let dap_rep = check_scalar_fn(
                |g| {
                    let y = dap_forward(g, &xd, 3, 3)?;
                    g.sum(&g.mul(&y, &probe_d)?)
                },
                &[("x", &xd)],
                eps,
                32,
            )?;
            worst(worst(seb_rep, ecre_rep), dap_rep)
        }
        other => {
            return Err(Error::arg("grad-check", format!("unknown op `{other}`")))
        }
    };
    Ok(report)
}

/// The tiny end-to-end configuration: 8×8 inputs, 2 classes, widths ≤ 8,
/// every mechanism enabled.
pub fn tiny_e2e_config() -> ModelConfig {
    ModelConfig {
        classes: 2,
        input_size: 8,
        plan: StagePlan::new([1, 1, 1, 1], [4, 4, 6, 8], 4).unwrap(),
        ss: true,
        lr: false,
        ecre: true,
        seb: true,
        dap: true,
        decoder_width: 8,
        ..Default::default()
    }
}

/// Gradient-check the whole model through its total loss, probing a strided
/// subset of elements of every trainable tensor.
pub fn check_e2e(seed: u64, probes_per_tensor: usize) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(7));
    let model = Model::new(tiny_e2e_config(), seed)?;
    // move every parameter to a generic point: structured zero inits (biases,
    // residual-start gammas) sit exactly on relu kinks where one-sided
    // derivatives and central differences legitimately disagree
    for (_, t) in &model.params().trainable {
        let data: Vec<f64> = (0..t.numel()).map(|_| rng.random::<f64>() - 0.5).collect();
        t.set_data(&data)?;
    }
    let images = randt(&mut rng, Shape::new(2, 3, 8, 8), false);
    let labels = Labels::new(
        2,
        8,
        8,
        (0..128)
            .map(|_| {
                let v = rng.random_range(0..3);
                if v == 2 {
                    IGNORE_LABEL
                } else {
                    v as u8
                }
            })
            .collect(),
    )
    .unwrap();
    let wrt: Vec<(&str, &Tensor)> = model
        .params()
        .trainable
        .iter()
        .map(|(n, t)| (n.as_str(), t))
        .collect();
    check_scalar_fn(
        |g| {
            let out = model.forward(g, &images, true)?;
            model.total_loss(g, &out, &labels)
        },
        &wrt,
        1e-5,
        probes_per_tensor,
    )
}
