//! Finite-difference gradient oracle.
//!
//! Central differences in double precision are the reference every
//! differentiable op and block is checked against.

use crate::error::Result;
use crate::tensor::{Graph, Precision, Tensor};

/// Central differences `(f(x+eps·e) − f(x−eps·e)) / (2·eps)` per element.
/// Only meaningful in double mode; `f` must not retain state across calls.
pub fn finite_diff_grad(
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    let n = x.numel();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        x.nudge(i, eps);
        let fp = f(x)?;
        x.nudge(i, -2.0 * eps);
        let fm = f(x)?;
        x.nudge(i, eps);
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Relative error with a floor so near-zero gradients compare absolutely.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-3)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Compare reverse-mode gradients of `build` (a scalar-loss forward pass on
/// the given graph) against central differences, for every listed tensor.
/// `max_per_tensor` caps how many elements are probed per tensor, spread
/// evenly; `0` means all of them.
pub fn check_scalar_fn(
    build: impl Fn(&Graph) -> Result<Tensor>,
    wrt: &[(&str, &Tensor)],
    eps: f64,
    max_per_tensor: usize,
) -> Result<GradReport> {
    for (_, t) in wrt {
        t.zero_grad();
    }
    let g = Graph::new(Precision::Double);
    let loss = build(&g)?;
    g.backward(&loss)?;

    let eval = |t: &Tensor, i: usize| -> Result<f64> {
        t.nudge(i, eps);
        let fp = build(&Graph::no_grad(Precision::Double))?.item();
        t.nudge(i, -2.0 * eps);
        let fm = build(&Graph::no_grad(Precision::Double))?.item();
        t.nudge(i, eps);
        Ok((fp - fm) / (2.0 * eps))
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for (name, t) in wrt {
        let analytic = t
            .grad()
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let n = t.numel();
        let probes: Vec<usize> = if max_per_tensor == 0 || n <= max_per_tensor {
            (0..n).collect()
        } else {
            (0..max_per_tensor)
                .map(|k| k * n / max_per_tensor)
                .collect()
        };
        for i in probes {
            let numeric = eval(t, i)?;
            let e = rel_err(analytic[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = name.to_string();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let g = finite_diff_grad(
            |t| {
                let g = Graph::no_grad(Precision::Double);
                Ok(g.sum(t)?.item())
            },
            &x,
            1e-5,
        )
        .unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_squared_norm_gradient_is_x() {
        let vals = vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.7];
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 3), vals.clone()).unwrap();
        let g = finite_diff_grad(
            |t| {
                let g = Graph::no_grad(Precision::Double);
                let sq = g.mul(t, t)?;
                Ok(g.scale(&g.sum(&sq)?, 0.5)?.item())
            },
            &x,
            1e-5,
        )
        .unwrap();
        for (got, want) in g.iter().zip(&vals) {
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn detects_autodiff_against_numeric_for_mul_chain() {
        let x = Tensor::param(Shape::new(1, 2, 2, 2), vec![0.5, -1.0, 2.0, 0.1, 1.5, -0.4, 0.9, 2.2]).unwrap();
        let c = Tensor::from_vec(Shape::new(1, 2, 2, 2), vec![1.0, 2.0, -1.0, 0.5, 0.25, 3.0, -2.0, 1.0]).unwrap();
        let report = check_scalar_fn(
            |g| {
                let y = g.mul(&x, &c)?;
                let y = g.relu(&y)?;
                g.sum(&y)
            },
            &[("x", &x)],
            1e-5,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "{report:?}");
    }
}
