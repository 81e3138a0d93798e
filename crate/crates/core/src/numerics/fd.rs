//! Central finite-difference gradients, the independent oracle for the tape.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::tape::{GradientMap, ParamSet};
use crate::numerics::tensor::Tensor;

/// Central differences `(f(p + h e_i) - f(p - h e_i)) / 2h` for every
/// coordinate of every parameter. `f` must be deterministic for fixed
/// parameters.
pub fn finite_diff_grad(
    f: impl Fn(&ParamSet) -> Result<f64>,
    params: &ParamSet,
    h: f64,
) -> Result<GradientMap> {
    if h <= 0.0 {
        return Err(Error::contract(format!("finite_diff_grad: h must be > 0, got {h}")));
    }
    let mut work = params.clone();
    let mut out = BTreeMap::new();
    let names: Vec<String> = params.keys().cloned().collect();
    for name in names {
        let n = params[&name].numel();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = work[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let plus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let minus = f(&work)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::numeric(format!(
                    "finite_diff_grad: non-finite evaluation at `{name}`[{i}]"
                )));
            }
            grad[i] = (plus - minus) / (2.0 * h);
        }
        out.insert(name.clone(), Tensor::new(params[&name].shape().to_vec(), grad)?);
    }
    Ok(GradientMap::from_map(out))
}
