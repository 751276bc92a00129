//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it is checking.

use crate::autograd::{Tape, Var};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub eps: f64,
    /// Restrict the check to these flat coordinates of the checked input.
    pub coords: Option<Vec<usize>>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` over the checked coordinates.
    pub max_rel_err: f64,
}

/// Relative error between two gradient vectors, norm-wise.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

fn eval_loss(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Compares the tape gradient of `f` w.r.t. `inputs[which]` with central
/// finite differences of step `cfg.eps`.
pub fn check_gradient(
    inputs: &[Tensor],
    which: usize,
    f: impl Fn(&mut Tape, &[Var]) -> Var,
    cfg: GradCheck,
) -> GradReport {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), i == which))
        .collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let full = grads
        .get(vars[which])
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(inputs[which].shape()));

    let coords: Vec<usize> = cfg
        .coords
        .clone()
        .unwrap_or_else(|| (0..inputs[which].numel()).collect());
    let analytic: Vec<f64> = coords.iter().map(|&c| full.data()[c]).collect();

    let mut work = inputs.to_vec();
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let orig = work[which].data()[c];
            work[which].data_mut()[c] = orig + cfg.eps;
            let plus = eval_loss(&work, &f);
            work[which].data_mut()[c] = orig - cfg.eps;
            let minus = eval_loss(&work, &f);
            work[which].data_mut()[c] = orig;
            (plus - minus) / (2.0 * cfg.eps)
        })
        .collect();

    let max_rel_err = relative_error(&analytic, &numeric);
    GradReport {
        analytic,
        numeric,
        max_rel_err,
    }
}

/// Like [`check_gradient`], but `f` builds on a [`Graph`] bound to `store`.
pub fn check_graph_gradient(
    store: &ParamStore,
    inputs: &[Tensor],
    which: usize,
    f: impl Fn(&mut Graph, &[Var]) -> Var,
    cfg: GradCheck,
) -> GradReport {
    check_gradient(
        inputs,
        which,
        |tape, vars| {
            let mut g = Graph::from_tape(store, std::mem::take(tape), true);
            let out = f(&mut g, vars);
            *tape = g.into_tape();
            out
        },
        cfg,
    )
}

/// Checks the gradient of a scalar built by `f` with respect to the stored
/// parameter `name`, perturbing the store itself for the numeric side.
pub fn check_param_gradient(
    store: &ParamStore,
    name: &str,
    f: impl Fn(&mut Graph) -> Var,
    cfg: GradCheck,
) -> GradReport {
    let mut g = Graph::new(store, true);
    let out = f(&mut g);
    let grads = g.tape.backward(out);
    let param_grads = g.param_grads(&grads);
    let size = store.get(name).map(|t| t.numel()).unwrap_or(0);
    let full = param_grads
        .get(name)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(&[size]));
    let coords: Vec<usize> = cfg.coords.clone().unwrap_or_else(|| (0..size).collect());
    let analytic: Vec<f64> = coords.iter().map(|&c| full.data()[c]).collect();

    let mut work = store.clone();
    let eval = |work: &ParamStore| {
        let mut g = Graph::new(work, false);
        let out = f(&mut g);
        g.tape.value(out).item()
    };
    let numeric: Vec<f64> = coords
        .iter()
        .map(|&c| {
            let orig = work.get(name).expect("param exists").data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + cfg.eps;
            let plus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[c] = orig - cfg.eps;
            let minus = eval(&work);
            work.get_mut(name).unwrap().data_mut()[c] = orig;
            (plus - minus) / (2.0 * cfg.eps)
        })
        .collect();
    GradReport {
        max_rel_err: relative_error(&analytic, &numeric),
        analytic,
        numeric,
    }
}
