//! Central-difference gradient checking in 64-bit.
//!
//! This is the independent oracle every analytic backward pass in the crate is
//! verified against. The loss closure must be a pure function of the supplied
//! parameters.

use crate::tensor::{NumericsError, Tensor};

pub const DEFAULT_H: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Gradients whose absolute error is below this floor pass regardless of
/// relative error (guards comparisons around exact zeros).
pub const DEFAULT_ABS_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub rel_tol: f64,
    pub abs_floor: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "  {:<40} max_rel={:<12.3e} max_abs={:<12.3e} {}",
                e.name,
                e.max_rel_err,
                e.max_abs_err,
                if e.pass { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Compares analytic gradients against central differences
/// `(f(p+h) - f(p-h)) / 2h` per element.
///
/// `params` and `analytic` must be aligned by name. An element passes when its
/// relative error is below `rel_tol` or its absolute error is below
/// `abs_floor`; a parameter group passes when all its elements do.
pub fn finite_diff_grad<F>(
    mut loss_fn: F,
    params: &mut [(String, Tensor<f64>)],
    analytic: &[(String, Tensor<f64>)],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&[(String, Tensor<f64>)]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "param/grad group count mismatch");
    let mut entries = Vec::with_capacity(params.len());
    for gi in 0..params.len() {
        assert_eq!(
            params[gi].0, analytic[gi].0,
            "param/grad name mismatch at group {gi}"
        );
        let n = params[gi].1.len();
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        let mut group_pass = true;
        for i in 0..n {
            let orig = params[gi].1.data()[i];

            params[gi].1.data_mut()[i] = orig + h;
            let f_plus = loss_fn(params);
            if !f_plus.is_finite() {
                params[gi].1.data_mut()[i] = orig;
                return Err(NumericsError::NonFinite {
                    context: format!("loss at {}[{i}] perturbed by +{h:e}", params[gi].0),
                });
            }

            params[gi].1.data_mut()[i] = orig - h;
            let f_minus = loss_fn(params);
            if !f_minus.is_finite() {
                params[gi].1.data_mut()[i] = orig;
                return Err(NumericsError::NonFinite {
                    context: format!("loss at {}[{i}] perturbed by -{h:e}", params[gi].0),
                });
            }

            params[gi].1.data_mut()[i] = orig;

            let numeric = (f_plus - f_minus) / (2.0 * h);
            let exact = analytic[gi].1.data()[i];
            let abs_err = (numeric - exact).abs();
            let rel_err = abs_err / numeric.abs().max(exact.abs()).max(1e-300);
            max_abs = max_abs.max(abs_err);
            max_rel = max_rel.max(rel_err);
            if !(rel_err < rel_tol || abs_err < abs_floor) {
                group_pass = false;
            }
        }
        entries.push(GradCheckEntry {
            name: params[gi].0.clone(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            pass: group_pass,
        });
    }
    let pass = entries.iter().all(|e| e.pass);
    Ok(GradCheckReport {
        entries,
        rel_tol,
        abs_floor,
        pass,
    })
}
