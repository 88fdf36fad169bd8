//! SGD with momentum and weight decay.

use crate::tensor::Tensor;

/// Per-step update: `v ← momentum·v + grad + weight_decay·param`,
/// `param ← param − lr·v`. Parameters with no gradient are left untouched.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[(String, Tensor)], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One update over the same parameter list the optimizer was built from,
    /// in registration order. In single mode updated values are rounded
    /// through f32 so checkpoints stay bit-exact.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64, round_f32: bool) {
        for ((_, t), v) in params.iter().zip(self.velocity.iter_mut()) {
            t.update_data(|data, grad| {
                let Some(grad) = grad else { return };
                for i in 0..data.len() {
                    v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * data[i];
                    data[i] -= lr * v[i];
                    if round_f32 {
                        data[i] = data[i] as f32 as f64;
                    }
                }
            });
        }
    }

    pub fn zero_grads(params: &[(String, Tensor)]) {
        for (_, t) in params {
            t.zero_grad();
        }
    }
}
