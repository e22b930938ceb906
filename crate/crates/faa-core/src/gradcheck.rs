//! Central finite-difference gradient oracle.
//!
//! Analytic gradients from the tape are validated against
//! `(f(p + h e_i) - f(p - h e_i)) / 2h` evaluated by re-running the forward
//! pass. The comparison metric is a guarded relative error,
//! `|a - b| / max(1, |a|, |b|)`, so tiny gradients are compared absolutely
//! and large ones relatively.

use std::collections::BTreeMap;
use std::fmt;

use crate::tape::GradMap;

#[derive(Debug, Clone, PartialEq)]
pub enum FiniteDiffError {
    /// The probed function returned NaN or infinity at a perturbed point.
    NonFiniteEvaluation { coordinate: usize, value: f64 },
}

impl fmt::Display for FiniteDiffError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FiniteDiffError::NonFiniteEvaluation { coordinate, value } => write!(
                f,
                "finite differences: non-finite evaluation {value} while perturbing coordinate {coordinate}"
            ),
        }
    }
}

impl std::error::Error for FiniteDiffError {}

/// Central-difference gradient of a scalar function of `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[f64], h: f64) -> Result<Vec<f64>, FiniteDiffError>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite_diff_grad: step must be positive, got {h}");
    let mut grad = vec![0.0; params.len()];
    let mut work = params.to_vec();
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        if !plus.is_finite() {
            return Err(FiniteDiffError::NonFiniteEvaluation { coordinate: i, value: plus });
        }
        if !minus.is_finite() {
            return Err(FiniteDiffError::NonFiniteEvaluation { coordinate: i, value: minus });
        }
        grad[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// `|a - b| / max(1, |a|, |b|)` for one coordinate pair.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

/// Worst-coordinate relative error between two gradients.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "max_rel_err: length mismatch {} vs {}", a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

/// Outcome of checking one named parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub group: String,
    pub len: usize,
    pub max_rel_err: f64,
}

impl GroupCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares an analytic gradient map against finite differences, group by
/// group. `loss_with` must re-evaluate the full loss with the named group
/// replaced by the given values, leaving every other group at its current
/// value. Returns one entry per group in `values`, in name order.
pub fn check_groups<F>(
    values: &BTreeMap<String, Vec<f64>>,
    analytic: &GradMap,
    mut loss_with: F,
    h: f64,
) -> Result<Vec<GroupCheck>, FiniteDiffError>
where
    F: FnMut(&str, &[f64]) -> f64,
{
    let mut out = Vec::with_capacity(values.len());
    for (name, vals) in values {
        let fd = finite_diff_grad(|v| loss_with(name, v), vals, h)?;
        let zero = vec![0.0; vals.len()];
        let a = analytic.get(name).map(Vec::as_slice).unwrap_or(&zero);
        out.push(GroupCheck {
            group: name.clone(),
            len: vals.len(),
            max_rel_err: max_rel_err(a, &fd),
        });
    }
    Ok(out)
}
