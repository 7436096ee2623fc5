//! First-order optimizers over the model's flat parameter list.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainSgd,
    Momentum,
    #[default]
    AdaptiveMoment,
}

const MOMENTUM: f64 = 0.9;
const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

/// Keeps per-parameter state, allocated on a parameter's first update.
/// Parameters without a gradient in a step are left untouched, including
/// their moment estimates and step counts.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    slots: Vec<Option<Slot>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, num_params: usize) -> Self {
        Self {
            kind,
            learning_rate,
            slots: vec![None; num_params],
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Applies one descent update. `params` and `grads` are parallel lists.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        assert_eq!(params.len(), self.slots.len(), "optimizer built for a different model");
        let lr = self.learning_rate;
        for ((param, grad), slot) in params.into_iter().zip(grads).zip(self.slots.iter_mut()) {
            let Some(grad) = grad else { continue };
            debug_assert_eq!(param.shape(), grad.shape());
            let slot = slot.get_or_insert_with(|| Slot {
                first: vec![0.0; grad.len()],
                second: match self.kind {
                    OptimizerKind::AdaptiveMoment => vec![0.0; grad.len()],
                    _ => Vec::new(),
                },
                steps: 0,
            });
            slot.steps += 1;
            let p = param.data_mut();
            let g = grad.data();
            match self.kind {
                OptimizerKind::PlainSgd => {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= lr * d;
                    }
                }
                OptimizerKind::Momentum => {
                    for ((w, d), v) in p.iter_mut().zip(g).zip(slot.first.iter_mut()) {
                        *v = MOMENTUM * *v + d;
                        *w -= lr * *v;
                    }
                }
                OptimizerKind::AdaptiveMoment => {
                    let c1 = 1.0 - BETA1.powi(slot.steps);
                    let c2 = 1.0 - BETA2.powi(slot.steps);
                    for (((w, d), m), v) in p
                        .iter_mut()
                        .zip(g)
                        .zip(slot.first.iter_mut())
                        .zip(slot.second.iter_mut())
                    {
                        *m = BETA1 * *m + (1.0 - BETA1) * d;
                        *v = BETA2 * *v + (1.0 - BETA2) * d * d;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}
