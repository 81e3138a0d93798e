//! Adam optimizer over named parameter sets.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tape::{GradientMap, ParamSet};
use crate::numerics::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction. Every parameter must have a
/// gradient entry (zeros count); moments are allocated on first use.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &GradientMap,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::contract(format!("adam_step: lr must be > 0, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);

    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::contract(format!("adam_step: no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape(format!(
                "adam_step: gradient shape {:?} vs parameter shape {:?} for `{name}`",
                g.shape(),
                p.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape().to_vec()));

        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = ADAM_BETA1 * m.data()[i] + (1.0 - ADAM_BETA1) * gi;
            let vi = ADAM_BETA2 * v.data()[i] + (1.0 - ADAM_BETA2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        p.check_finite(&format!("adam_step: parameter `{name}`"))?;
    }
    Ok(())
}
