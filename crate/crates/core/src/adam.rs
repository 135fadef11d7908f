//! Bias-corrected Adam over a named set of parameter tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> AdamHyper {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }
}

/// One optimizer step over every tensor in `params`. Parameters missing from
/// `grads` are treated as having zero gradient. A NaN anywhere in the
/// gradients refuses the whole step before any parameter moves.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut AdamState,
    h: &AdamHyper,
) -> Result<()> {
    if h.lr < 0.0 {
        return Err(Error::Invalid {
            op: "adam_step",
            msg: format!("learning rate must be non-negative, got {}", h.lr),
        });
    }
    for (name, p) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.len() != p.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    what: "gradient",
                    expected: format!("{} values for `{name}`", p.len()),
                    got: vec![g.len()],
                });
            }
            if g.iter().any(|v| v.is_nan()) {
                return Err(Error::NanGradient { param: name.clone() });
            }
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - h.beta1.powi(t);
    let bc2 = 1.0 - h.beta2.powi(t);

    for (name, p) in params.iter_mut() {
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        debug_assert_eq!(m.len(), n);
        let zero;
        let g: &[f64] = match grads.get(name) {
            Some(g) => g,
            None => {
                zero = vec![0.0; n];
                &zero
            }
        };
        let data = p.data_mut();
        for i in 0..n {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= h.lr * mhat / (vhat.sqrt() + h.eps);
        }
    }
    Ok(())
}
