//! Random-graph gradient checking: tape backward vs. central differences.
//!
//! Used by the verification suites; kept in the library so both unit and
//! acceptance tests drive the same generator.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::fd::finite_diff_grad;
use crate::numerics::tape::{ParamSet, Tape, VarId};
use crate::numerics::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
enum Nonlin {
    None,
    Silu,
    Softmax,
}

/// A randomly drawn small computation: a chain of matmul layers with random
/// nonlinearities, optional bias and elementwise gates, an attention-style
/// softmax block, and a mean-squared-error head.
struct GraphPlan {
    rows: usize,
    nonlin: Vec<Nonlin>,
    bias: Vec<bool>,
    gate: Vec<bool>,
    x: Tensor,
    target: Tensor,
}

fn make_plan(seed: u64) -> (GraphPlan, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = rng.random_range(1..=3);
    let n_layers = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(2..=6)];
    for _ in 0..n_layers {
        dims.push(rng.random_range(2..=6));
    }

    let mut params = ParamSet::new();
    let mut nonlin = Vec::new();
    let mut bias = Vec::new();
    let mut gate = Vec::new();
    for l in 0..n_layers {
        let w: Vec<f64> = (0..dims[l] * dims[l + 1])
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        params.insert(format!("w{l}"), Tensor::new(vec![dims[l], dims[l + 1]], w).unwrap());
        nonlin.push(match rng.random_range(0..3) {
            0 => Nonlin::None,
            1 => Nonlin::Silu,
            _ => Nonlin::Softmax,
        });
        let b = rng.random_bool(0.5);
        if b {
            let bv: Vec<f64> = (0..dims[l + 1]).map(|_| rng.random_range(-0.5..0.5)).collect();
            params.insert(format!("b{l}"), Tensor::row_vector(bv));
        }
        bias.push(b);
        let g = rng.random_bool(0.3);
        if g {
            let gv: Vec<f64> = (0..rows * dims[l + 1])
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            params.insert(
                format!("g{l}"),
                Tensor::new(vec![rows, dims[l + 1]], gv).unwrap(),
            );
        }
        gate.push(g);
    }

    let x: Vec<f64> = (0..rows * dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
    let last = *dims.last().unwrap();
    let target: Vec<f64> = (0..rows * last).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::new(vec![rows, dims[0]], x).unwrap();
    let target = Tensor::new(vec![rows, last], target).unwrap();
    let plan = GraphPlan { rows, nonlin, bias, gate, x, target };
    (plan, params)
}

fn build_loss(tape: &mut Tape, plan: &GraphPlan, params: &ParamSet, track: bool) -> Result<VarId> {
    let bind = |tape: &mut Tape, name: &str| {
        let t = &params[name];
        if track {
            tape.param(name, t)
        } else {
            tape.input(t.clone())
        }
    };
    let mut h = tape.input(plan.x.clone());
    for l in 0..plan.nonlin.len() {
        let w = bind(tape, &format!("w{l}"));
        h = tape.matmul(h, w)?;
        if plan.bias[l] {
            let b = bind(tape, &format!("b{l}"));
            h = if plan.rows == 1 {
                tape.add(h, b)?
            } else {
                tape.add_row_broadcast(h, b)?
            };
        }
        match plan.nonlin[l] {
            Nonlin::None => {}
            Nonlin::Silu => h = tape.silu(h),
            Nonlin::Softmax => h = tape.softmax_rows(h)?,
        }
        if plan.gate[l] {
            let g = bind(tape, &format!("g{l}"));
            h = tape.mul(h, g)?;
        }
    }
    let target = tape.input(plan.target.clone());
    tape.mse(h, target)
}

/// Max over coordinates of the relative error between reverse-mode and
/// central-difference gradients for the graph drawn from `seed`.
pub fn max_rel_err_for_seed(seed: u64, h: f64) -> Result<f64> {
    let (plan, params) = make_plan(seed);

    let mut tape = Tape::new();
    let loss = build_loss(&mut tape, &plan, &params, true)?;
    let analytic = tape.backward(loss)?;

    let numeric = finite_diff_grad(
        |p| {
            let mut t = Tape::new();
            let l = build_loss(&mut t, &plan, p, false)?;
            t.value(l).scalar_value()
        },
        &params,
        h,
    )?;

    let mut worst: f64 = 0.0;
    for (name, ga) in analytic.iter() {
        let gn = numeric.get(name).expect("same parameter set");
        for (&a, &b) in ga.data().iter().zip(gn.data()) {
            let denom = a.abs().max(b.abs()).max(1e-4);
            worst = worst.max((a - b).abs() / denom);
        }
    }
    Ok(worst)
}

/// Total parameter count of the graph drawn from `seed`.
pub fn param_count_for_seed(seed: u64) -> usize {
    let (_, params) = make_plan(seed);
    params.values().map(|t| t.numel()).sum()
}
