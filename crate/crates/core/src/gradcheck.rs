//! Central finite-difference gradient checking.

use serde::Serialize;

use crate::autodiff::{Fault, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so gradients that are
    /// zero up to rounding are compared absolutely.
    pub abs_floor: f64,
    /// Corrupts a backward rule in the analytic pass (negative control).
    pub fault: Option<Fault>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            abs_floor: 1e-6,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let v = tape.value(loss);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar program, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Compares the tape gradient of `f` against central differences for every
/// scalar of every parameter in `store`.
///
/// `f` must be deterministic: it is evaluated twice up front and a mismatch is
/// reported as a contract error.
pub fn grad_check<F>(store: &ParamStore, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let first = evaluate(store, &f)?;
    let second = evaluate(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "program is non-deterministic: {first} vs {second}"
        )));
    }

    let mut analytic = store.clone();
    analytic.zero_grads();
    let mut tape = match cfg.fault {
        Some(fault) => Tape::with_fault(fault),
        None => Tape::new(),
    };
    let loss = f(&mut tape, &analytic)?;
    tape.backward_into(loss, &mut analytic)?;

    let mut probe = store.clone();
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let n = store.value(id).numel();
        let mut check = ParamCheck {
            name: store.get(id).name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        for j in 0..n {
            let orig = store.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + cfg.step;
            let plus = evaluate(&probe, &f)?;
            probe.value_mut(id).data_mut()[j] = orig - cfg.step;
            let minus = evaluate(&probe, &f)?;
            probe.value_mut(id).data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * cfg.step);
            let exact = analytic.grad(id).data()[j];
            let abs = (numeric - exact).abs();
            let rel = abs / exact.abs().max(numeric.abs()).max(cfg.abs_floor);
            if rel > check.max_rel_error || !rel.is_finite() {
                check.max_rel_error = rel;
                check.worst_index = j;
            }
            check.max_abs_error = check.max_abs_error.max(abs);
        }
        params.push(check);
    }
    let max_rel_error = params
        .iter()
        .map(|p| p.max_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < cfg.tol,
        max_rel_error,
        tol: cfg.tol,
        params,
    })
}
