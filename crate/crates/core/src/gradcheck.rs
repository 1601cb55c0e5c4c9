//! Central-finite-difference verification of analytic gradients.
//!
//! Every differentiable operation (and the full training loss) is checked by
//! perturbing each parameter component by +/- h, re-evaluating the scalar,
//! and comparing the quotient against the tape's gradient. A component
//! passes when its relative error is below `rel_tol` or its absolute error
//! below `abs_tol`.

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::{Matrix, NumericsError};
use thiserror::Error;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
        }
    }
}

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("non-finite evaluation while perturbing {param}[{component}]")]
    NonFiniteEval { param: String, component: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub components: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.entries.extend(other.entries);
    }

    /// One aligned line per parameter: name, component count, max errors.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{:6} {:48} n={:<6} max_rel={:<12.3e} max_abs={:<12.3e}\n",
                if e.passed { "ok" } else { "FAIL" },
                e.name,
                e.components,
                e.max_rel_err,
                e.max_abs_err,
            ));
        }
        out
    }
}

fn compare(analytic: f64, fd: f64, cfg: &GradCheckConfig) -> (f64, f64, bool) {
    let abs = (analytic - fd).abs();
    let denom = analytic.abs().max(fd.abs());
    let rel = if denom > 0.0 { abs / denom } else { 0.0 };
    (rel, abs, rel < cfg.rel_tol || abs < cfg.abs_tol)
}

/// Core comparison: caller supplies the scalar function, the evaluation
/// point, and the analytic gradients (one matrix per parameter, aligned with
/// `params`).
pub fn grad_check_raw(
    params: &[(String, Matrix)],
    analytic: &[Matrix],
    mut f: impl FnMut(&[Matrix]) -> f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError> {
    assert_eq!(params.len(), analytic.len());
    let mut values: Vec<Matrix> = params.iter().map(|(_, m)| m.clone()).collect();
    let mut report = GradCheckReport::default();
    for (pi, (name, _)) in params.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut passed = true;
        let n = values[pi].len();
        for ci in 0..n {
            let orig = values[pi].as_slice().expect("contiguous")[ci];
            values[pi].as_slice_mut().unwrap()[ci] = orig + cfg.step;
            let f_plus = f(&values);
            values[pi].as_slice_mut().unwrap()[ci] = orig - cfg.step;
            let f_minus = f(&values);
            values[pi].as_slice_mut().unwrap()[ci] = orig;
            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(GradCheckError::NonFiniteEval {
                    param: name.clone(),
                    component: ci,
                });
            }
            let fd = (f_plus - f_minus) / (2.0 * cfg.step);
            let a = analytic[pi].as_slice().unwrap()[ci];
            let (rel, abs, ok) = compare(a, fd, cfg);
            max_rel = max_rel.max(rel);
            max_abs = max_abs.max(abs);
            passed &= ok;
        }
        report.entries.push(GradCheckEntry {
            name: name.clone(),
            components: n,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed,
        });
    }
    Ok(report)
}

/// Check a scalar built on a tape against finite differences over every
/// parameter in `store`. `build` must construct the same scalar for any
/// parameter values the tape hands out.
pub fn grad_check<B>(
    store: &ParamStore,
    build: B,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, GradCheckError>
where
    B: Fn(&mut Tape) -> Result<Var, NumericsError>,
{
    // Analytic pass.
    let mut tape = Tape::new(store);
    let loss = build(&mut tape)?;
    let grads = tape.backward(loss)?;
    let mut names = Vec::new();
    let mut points = Vec::new();
    let mut analytic = Vec::new();
    let bound = tape.bound_params();
    for id in store.ids() {
        names.push((store.name(id).to_string(), store.value(id).clone()));
        points.push(store.value(id).clone());
        let g = bound
            .iter()
            .find(|(bid, _)| *bid == id)
            .and_then(|(_, var)| grads.get(*var).cloned())
            .unwrap_or_else(|| Matrix::zeros(store.value(id).dim()));
        analytic.push(g);
    }
    drop(tape);

    // Finite-difference pass.
    grad_check_raw(
        &names,
        &analytic,
        |values| {
            let mut t = Tape::with_values(values);
            let loss = build(&mut t).expect("loss builds at perturbed point");
            t.scalar(loss)
        },
        cfg,
    )
}
