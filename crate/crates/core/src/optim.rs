//! SGD with Nesterov momentum and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tape::Gradients;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    /// Rescales the gradient when its global L2 norm exceeds this value.
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            nesterov: true,
            weight_decay: 1e-4,
            grad_clip: Some(5.0),
        }
    }
}

/// Momentum buffers are created lazily, so parameters that never receive a
/// gradient carry no optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: SgdConfig,
    buffers: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            buffers: Vec::new(),
        }
    }

    pub fn buffers(&self) -> &[Option<Vec<f64>>] {
        &self.buffers
    }

    pub fn set_buffers(&mut self, buffers: Vec<Option<Vec<f64>>>) {
        self.buffers = buffers;
    }

    /// `d = g + wd·w; v = μv + d; w -= lr·(d + μv)` (Nesterov) or `lr·v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        if self.buffers.len() < store.len() {
            self.buffers.resize(store.len(), None);
        }
        let SgdConfig {
            momentum,
            nesterov,
            weight_decay,
            grad_clip,
        } = self.config;
        let scale = match grad_clip {
            Some(c) => {
                let norm = grads.norm();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (&id, g) in &grads.by_param {
            let w = store.get_mut(id).data_mut();
            let buf = self.buffers[id.0].get_or_insert_with(|| vec![0.0; w.len()]);
            for ((wv, &gv), bv) in w.iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                let d = scale * gv + weight_decay * *wv;
                if momentum != 0.0 {
                    *bv = momentum * *bv + d;
                    let step = if nesterov { d + momentum * *bv } else { *bv };
                    *wv -= lr * step;
                } else {
                    *wv -= lr * d;
                }
            }
        }
    }
}

/// `base_lr` for the first half of training, a tenth of it until three
/// quarters, a hundredth after.
pub fn lr_at_epoch(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    let e = epoch as f64;
    let n = total_epochs as f64;
    if e < 0.5 * n {
        base_lr
    } else if e < 0.75 * n {
        base_lr / 10.0
    } else {
        base_lr / 100.0
    }
}
