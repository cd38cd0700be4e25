//! Central finite-difference oracle for tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Worst-case agreement for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `max |analytic - numeric| / max(|numeric|, 1e-8)` over checked entries.
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose `±h` evaluations landed on different sides of a kink.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub h: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_err < self.tol)
    }

    pub fn skipped(&self) -> usize {
        self.params.iter().map(|p| p.skipped).sum()
    }
}

/// Compares tape gradients of `build` against central differences for
/// every entry of every parameter in `store`.
///
/// `build` records a scalar loss on the given tape from the current store
/// values. It must be deterministic: the loss is evaluated twice up front
/// and any bitwise difference is reported as a reproducibility error.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    h: f64,
    tol: f64,
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("step h must be positive, got {h}")));
    }
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let base = tape.scalar(loss)?;
    let mut eval = |store: &ParamStore| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        Ok((tape.scalar(loss)?, tape.branch_signature()))
    };
    let again = eval(store)?.0;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Reproducibility(format!(
            "two evaluations at the same point gave {base} and {again}"
        )));
    }
    let analytic = tape.gradients(loss)?;

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let numel = store.value(&name)?.numel();
        let grad = analytic.get(&name).map(|g| g.data().to_vec());
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        };
        for idx in 0..numel {
            let original = store.value(&name)?.data()[idx];
            store.value_mut(&name)?.data_mut()[idx] = original + h;
            let (plus, sig_plus) = eval(store)?;
            store.value_mut(&name)?.data_mut()[idx] = original - h;
            let (minus, sig_minus) = eval(store)?;
            store.value_mut(&name)?.data_mut()[idx] = original;
            if sig_plus != sig_minus {
                check.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g[idx]);
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            check.max_rel_err = check.max_rel_err.max(rel);
            check.checked += 1;
        }
        params.push(check);
    }
    Ok(GradCheckReport { h, tol, params })
}
