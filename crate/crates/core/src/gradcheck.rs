//! Central finite-difference gradient checking.
//!
//! Used by the test suites and by the CLI self-check. Always run in f64:
//! the step (default 1e-5) leaves too little headroom in f32.

use crate::autodiff::{NodeId, Tape};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks d loss / d p for every parameter in `store` against central
/// differences. `f` must deterministically rebuild the scalar loss from the
/// current parameter values (it is re-invoked ~2 * n_params times).
pub fn check_params<F>(store: &mut ParamStore<f64>, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<NodeId>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss).item())
    };

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for i in 0..store.len() {
        let id = ParamId(i);
        let analytic = store.grad(id).clone();
        let base = store.value(id).clone();
        for e in 0..base.numel() {
            let mut plus = base.data().to_vec();
            plus[e] += step;
            store.set_value(id, Tensor::from_vec(base.shape(), plus)?)?;
            let lp = eval(store)?;
            let mut minus = base.data().to_vec();
            minus[e] -= step;
            store.set_value(id, Tensor::from_vec(base.shape(), minus)?)?;
            let lm = eval(store)?;
            store.set_value(id, base.clone())?;
            let fd = (lp - lm) / (2.0 * step);
            let an = analytic.data()[e];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked })
}
