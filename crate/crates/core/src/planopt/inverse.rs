use super::forward::{build_model, ForwardProblem};
use super::{ObjectiveWeights, PlanOptError};
use crate::lp::{simplex_solve, Certificate, LpStatus, Relation, VarKind};

/// Term values below this (Gy) are raised to it when normalizing the inverse
/// problem, so terms the target already zeroes still carry a finite ratio.
pub const TERM_FLOOR: f64 = 1e-3;

/// Outcome of inverse optimization.
#[derive(Debug, Clone)]
pub struct InverseResult {
    pub weights: ObjectiveWeights,
    /// Duality gap of the target under `weights`:
    /// `sum_t alpha_t f_t(target) - min_w sum_t alpha_t f_t(A w)`.
    /// Zero when the target is optimal for `weights`; negative when the
    /// target is better than anything deliverable.
    pub gap: f64,
    /// Smallest achievable worst-case ratio `max_t f_t(A w) / f_t(target)`.
    /// At most 1 when the target is deliverable.
    pub ratio: f64,
    /// Term values of the target dose.
    pub target_values: Vec<f64>,
    pub certificate: Certificate,
}

/// Objective weights under which `target` is as close to optimal as possible.
///
/// Minimizes the relative duality gap: with `f~_t = max(f_t(target), TERM_FLOOR)`,
///
/// ```text
/// max  V(alpha) = min_w sum_t alpha_t f_t(A w)   s.t.  sum_t alpha_t f~_t = 1,  alpha >= 0
/// ```
///
/// which is solved through its LP dual `min lambda s.t. G x <= h, Q_t x <=
/// lambda f~_t`: the smallest uniform factor by which a deliverable plan can
/// match the target on every term. The weights are the multipliers of the
/// term rows, rescaled onto the simplex.
pub fn inverse_weights(problem: &ForwardProblem<'_>, target: &[f64]) -> Result<InverseResult, PlanOptError> {
    let nv = problem.influence.num_voxels();
    if target.len() != nv {
        return Err(PlanOptError::InvalidProblem(format!("target has {} voxels, expected {nv}", target.len())));
    }
    if let Some(v) = target.iter().find(|v| !v.is_finite()) {
        return Err(PlanOptError::InvalidProblem(format!("target dose contains {v}")));
    }
    let target_values = problem.evaluate(target)?;
    let mut model = build_model(problem);
    let lambda = model.lp.add_var(1.0, VarKind::Free);
    let first_term_row = model.lp.num_rows();
    for (form, &f) in model.q.iter().zip(&target_values) {
        let mut coeffs = form.clone();
        coeffs.push((lambda, -f.max(TERM_FLOOR)));
        model.lp.add_row(coeffs, Relation::Le, 0.0);
    }
    let sol = simplex_solve(&model.lp)?;
    if sol.status != LpStatus::Optimal {
        return Err(PlanOptError::Solver {
            status: sol.status,
            diagnostics: format!("inverse problem: {}", sol.diagnostics),
        });
    }
    let raw = &sol.y[first_term_row..];
    let scale: f64 = raw.iter().sum();
    if !(scale > 0.0) {
        return Err(PlanOptError::Internal("inverse multipliers vanish".into()));
    }
    let ratio = sol.x[lambda];
    let weights = ObjectiveWeights::from_raw(raw.to_vec())?;
    let attained: f64 = weights.as_slice().iter().zip(&target_values).map(|(a, f)| a * f).sum();
    let gap = attained - ratio / scale;
    Ok(InverseResult { weights, gap, ratio, target_values, certificate: sol.certificate })
}
