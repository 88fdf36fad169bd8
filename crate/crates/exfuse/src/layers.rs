//! Parameterized layer wrappers over the raw ops, plus the named-parameter
//! registry that the optimizer and checkpoint store walk.

use std::cell::RefCell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{BnState, Graph, Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named tensors of a model: `trainable` feeds the optimizer, `buffers`
/// (batch-norm running stats) only persistence. Registration order is the
/// checkpoint order.
#[derive(Default)]
pub struct Params {
    pub trainable: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Rc<RefCell<Vec<f64>>>)>,
}

impl Params {
    pub fn tensor(&mut self, name: impl Into<String>, t: &Tensor) {
        self.trainable.push((name.into(), t.clone()));
    }

    pub fn buffer(&mut self, name: impl Into<String>, b: &Rc<RefCell<Vec<f64>>>) {
        self.buffers.push((name.into(), Rc::clone(b)));
    }
}

/// Zero-mean normal draw via Box-Muller.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Fan-in-scaled init: std = sqrt(2 / fan_in), biases zero.
fn he_weights(rng: &mut ChaCha8Rng, shape: Shape, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let data = (0..shape.numel()).map(|_| randn(rng) * std).collect();
    Tensor::param(shape, data).expect("init shape")
}

pub struct Conv2d {
    pub w: Tensor,
    pub b: Option<Tensor>,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        Self::rect(rng, cin, cout, kh, kw, stride, pad, pad, bias)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn rect(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
        bias: bool,
    ) -> Self {
        let w = he_weights(rng, Shape::new(cout, cin, kh, kw), cin * kh * kw);
        let b = bias.then(|| Tensor::param(Shape::new(1, 1, 1, cout), vec![0.0; cout]).unwrap());
        Conv2d {
            w,
            b,
            stride,
            pad_h,
            pad_w,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        g.conv2d_rect(x, &self.w, self.b.as_ref(), self.stride, self.pad_h, self.pad_w)
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        params.tensor(format!("{prefix}.w"), &self.w);
        if let Some(b) = &self.b {
            params.tensor(format!("{prefix}.b"), b);
        }
    }
}

pub struct Deconv2d {
    pub w: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Deconv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = he_weights(rng, Shape::new(cin, cout, k, k), cin * k * k);
        Deconv2d { w, stride, pad }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor) -> Result<Tensor> {
        g.deconv2d(x, &self.w, self.stride, self.pad)
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        params.tensor(format!("{prefix}.w"), &self.w);
    }
}

pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub state: BnState,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self::with_gamma(channels, 1.0)
    }

    /// `gamma_init = 0` makes a residual branch start as the identity.
    pub fn with_gamma(channels: usize, gamma_init: f64) -> Self {
        BatchNorm {
            gamma: Tensor::param(Shape::new(1, 1, 1, channels), vec![gamma_init; channels])
                .unwrap(),
            beta: Tensor::param(Shape::new(1, 1, 1, channels), vec![0.0; channels]).unwrap(),
            state: BnState::new(channels),
            momentum: BN_MOMENTUM,
        }
    }

    pub fn forward(&self, g: &Graph, x: &Tensor, training: bool) -> Result<Tensor> {
        g.batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.state,
            self.momentum,
            BN_EPS,
            training,
        )
    }

    pub fn collect(&self, prefix: &str, params: &mut Params) {
        params.tensor(format!("{prefix}.gamma"), &self.gamma);
        params.tensor(format!("{prefix}.beta"), &self.beta);
        params.buffer(format!("{prefix}.running_mean"), &self.state.mean);
        params.buffer(format!("{prefix}.running_var"), &self.state.var);
    }
}
