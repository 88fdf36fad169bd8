//! Reverse-mode tape.
//!
//! Ops are methods on [`Graph`]; each records its operands, its output and a
//! backward rule. The tape is in topological order by construction, so one
//! reverse sweep propagates gradients with every leaf accumulated exactly
//! once per use.

use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Arithmetic mode. `Single` rounds every op output through `f32`; the
/// gradient-check oracle is only meaningful in `Double`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Precision {
    Single,
    Double,
}

struct Entry {
    out: Tensor,
    rule: Box<dyn Fn(&[f64])>,
}

/// Records one forward computation and replays it backwards.
///
/// A graph is single-writer: one training step builds and consumes one graph.
pub struct Graph {
    precision: Precision,
    recording: Cell<bool>,
    entries: RefCell<Vec<Entry>>,
    consumed: Cell<bool>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            precision,
            recording: Cell::new(true),
            entries: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    /// A graph that records no backward rules; for inference.
    pub fn no_grad(precision: Precision) -> Self {
        let g = Graph::new(precision);
        g.recording.set(false);
        g
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_recording(&self) -> bool {
        self.recording.get()
    }

    pub fn len(&self) -> usize {
        self.entries.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Finalize an op output: round in single mode, reject non-finite values
    /// and mark the output differentiable if any input is.
    pub(crate) fn finish(
        &self,
        op: &'static str,
        shape: Shape,
        mut data: Vec<f64>,
        inputs: &[&Tensor],
    ) -> Result<Tensor> {
        if self.precision == Precision::Single {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        let rg = self.recording.get() && inputs.iter().any(|t| t.requires_grad());
        Ok(Tensor::new(shape, data, rg))
    }

    pub(crate) fn record(&self, out: &Tensor, rule: impl Fn(&[f64]) + 'static) {
        if out.requires_grad() {
            self.entries.borrow_mut().push(Entry {
                out: out.clone(),
                rule: Box::new(rule),
            });
        }
    }

    /// Backpropagate from a scalar loss, consuming the tape. Gradients
    /// accumulate into every `requires_grad` leaf; intermediate buffers are
    /// dropped as the sweep unwinds.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        self.sweep(loss)?;
        self.consumed.set(true);
        self.entries.borrow_mut().clear();
        Ok(())
    }

    /// Like [`backward`](Self::backward) but keeps the tape, so calling it
    /// again accumulates another pass of gradients.
    pub fn backward_retain(&self, loss: &Tensor) -> Result<()> {
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        self.sweep(loss)
    }

    fn sweep(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss(loss.shape().to_string()));
        }
        loss.accumulate_grad(&[1.0]);
        let entries = self.entries.borrow();
        for e in entries.iter().rev() {
            // None means this output never reached the loss.
            if let Some(og) = e.out.take_grad() {
                (e.rule)(&og);
            }
        }
        Ok(())
    }
}
