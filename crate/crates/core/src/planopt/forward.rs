use super::terms::{term_value, ObjectiveTerm, TermKind};
use super::{ObjectiveWeights, Plan, PlanOptError, Provenance};
use crate::dosecalc::{compute_dose, Beam, InfluenceMatrix};
use crate::lp::{simplex_solve, Certificate, LpProblem, LpStatus, Relation, VarKind};
use crate::phantom::{Phantom, StructureId};
use std::collections::BTreeMap;
use std::ops::Range;

/// Sum of positive left-to-right fluence steps over every beamlet row, with an
/// implicit zero before the first column.
pub fn spg_complexity(w: &[f64], beams: &[Beam]) -> Result<f64, PlanOptError> {
    let expected: usize = beams.iter().map(Beam::beamlet_count).sum();
    if w.len() != expected {
        return Err(PlanOptError::SpgPartition { expected, actual: w.len() });
    }
    let mut total = 0.0;
    let mut offset = 0;
    for b in beams {
        for r in 0..b.rows {
            let row = &w[offset + r * b.cols..offset + (r + 1) * b.cols];
            let mut prev = 0.0;
            for &x in row {
                total += (x - prev).max(0.0);
                prev = x;
            }
        }
        offset += b.beamlet_count();
    }
    Ok(total)
}

/// Fluence-map optimization problem for one patient.
#[derive(Debug, Clone)]
pub struct ForwardProblem<'a> {
    pub influence: &'a InfluenceMatrix,
    pub terms: Vec<ObjectiveTerm>,
    /// Upper bound on [`spg_complexity`]; `None` leaves complexity unconstrained.
    pub complexity_bound: Option<f64>,
    masks: BTreeMap<StructureId, Vec<usize>>,
}

impl<'a> ForwardProblem<'a> {
    pub fn new(
        influence: &'a InfluenceMatrix,
        phantom: &Phantom,
        terms: Vec<ObjectiveTerm>,
        complexity_bound: Option<f64>,
    ) -> Result<Self, PlanOptError> {
        if influence.dims != phantom.dims() {
            return Err(PlanOptError::DimMismatch { expected: phantom.dims(), actual: influence.dims });
        }
        if let Some(c) = complexity_bound {
            if !(c.is_finite() && c >= 0.0) {
                return Err(PlanOptError::InvalidProblem(format!("complexity bound {c} must be finite and >= 0")));
            }
        }
        let all = phantom.grid.structure_masks();
        let mut masks = BTreeMap::new();
        for t in &terms {
            let threshold = match t.kind {
                TermKind::AvgAboveThreshold(v) | TermKind::AvgUnderdose(v) | TermKind::AvgOverdose(v) => v,
                _ => 0.0,
            };
            if !threshold.is_finite() {
                return Err(PlanOptError::InvalidProblem(format!("term {t} has a non-finite threshold")));
            }
            let mask = all.get(&t.structure).cloned().unwrap_or_default();
            if mask.is_empty() {
                return Err(PlanOptError::EmptyStructure(t.structure));
            }
            masks.insert(t.structure, mask);
        }
        Ok(Self { influence, terms, complexity_bound, masks })
    }

    pub fn mask(&self, s: StructureId) -> &[usize] {
        self.masks.get(&s).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Term values of a dose vector.
    pub fn evaluate(&self, dose: &[f64]) -> Result<Vec<f64>, PlanOptError> {
        self.terms.iter().map(|t| term_value(t, dose, self.mask(t.structure))).collect()
    }
}

/// LP encoding of a [`ForwardProblem`] with a zero objective.
///
/// Variables: fluence `w`, one maximum per structure with a max term, one
/// hinge per voxel per tail/under/overdose term and, when bounded, one
/// positive-gradient variable per beamlet. Each term `t` is represented by a
/// linear form `q[t]` over the variables that equals the term value at any
/// optimum that weights it.
pub(crate) struct LpModel {
    pub lp: LpProblem,
    pub w: Range<usize>,
    pub q: Vec<Vec<(usize, f64)>>,
}

pub(crate) fn build_model(problem: &ForwardProblem<'_>) -> LpModel {
    let a = problem.influence;
    let nb = a.num_beamlets();
    let mut lp = LpProblem::new();
    let w = lp.add_vars(nb, 0.0, VarKind::NonNegative);

    let voxels: Vec<usize> = {
        let mut v: Vec<usize> = problem.masks.values().flatten().copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let rows = a.rows(&voxels);
    let row_of = |v: usize| -> &Vec<(usize, f64)> { &rows[voxels.binary_search(&v).expect("voxel in union")] };

    let mut max_var: BTreeMap<StructureId, usize> = BTreeMap::new();
    let mut q = Vec::with_capacity(problem.terms.len());
    for t in &problem.terms {
        let mask = problem.mask(t.structure);
        let n = mask.len() as f64;
        let form = match t.kind {
            TermKind::MeanDose => {
                let mut sums = vec![0.0; nb];
                for &v in mask {
                    for &(b, x) in row_of(v) {
                        sums[b] += x;
                    }
                }
                sums.iter().enumerate().filter(|(_, s)| **s != 0.0).map(|(b, s)| (w.start + b, s / n)).collect()
            }
            TermKind::MaxDose => {
                let m = *max_var.entry(t.structure).or_insert_with(|| {
                    let m = lp.add_var(0.0, VarKind::NonNegative);
                    for &v in mask {
                        let mut coeffs: Vec<(usize, f64)> = row_of(v).iter().map(|&(b, x)| (w.start + b, x)).collect();
                        coeffs.push((m, -1.0));
                        lp.add_row(coeffs, Relation::Le, 0.0);
                    }
                    m
                });
                vec![(m, 1.0)]
            }
            TermKind::AvgAboveThreshold(level) | TermKind::AvgOverdose(level) => {
                let mut form = Vec::with_capacity(mask.len());
                for &v in mask {
                    let s = lp.add_var(0.0, VarKind::NonNegative);
                    let mut coeffs: Vec<(usize, f64)> = row_of(v).iter().map(|&(b, x)| (w.start + b, x)).collect();
                    coeffs.push((s, -1.0));
                    lp.add_row(coeffs, Relation::Le, level);
                    form.push((s, 1.0 / n));
                }
                form
            }
            TermKind::AvgUnderdose(level) => {
                let mut form = Vec::with_capacity(mask.len());
                for &v in mask {
                    let u = lp.add_var(0.0, VarKind::NonNegative);
                    let mut coeffs: Vec<(usize, f64)> = row_of(v).iter().map(|&(b, x)| (w.start + b, -x)).collect();
                    coeffs.push((u, -1.0));
                    lp.add_row(coeffs, Relation::Le, -level);
                    form.push((u, 1.0 / n));
                }
                form
            }
        };
        q.push(form);
    }

    if let Some(c) = problem.complexity_bound {
        let g = lp.add_vars(nb, 0.0, VarKind::NonNegative);
        let mut offset = 0;
        for beam in &a.beams {
            for r in 0..beam.rows {
                for col in 0..beam.cols {
                    let j = offset + r * beam.cols + col;
                    let mut coeffs = vec![(w.start + j, 1.0), (g.start + j, -1.0)];
                    if col > 0 {
                        coeffs.push((w.start + j - 1, -1.0));
                    }
                    lp.add_row(coeffs, Relation::Le, 0.0);
                }
            }
            offset += beam.beamlet_count();
        }
        lp.add_row(g.clone().map(|j| (j, 1.0)).collect(), Relation::Le, c);
    }
    LpModel { lp, w, q }
}

/// Minimise `sum_t alpha_t f_t(A w)` over `w >= 0` within the complexity bound.
pub fn solve_forward(problem: &ForwardProblem<'_>, weights: &ObjectiveWeights) -> Result<Plan, PlanOptError> {
    if weights.len() != problem.terms.len() {
        return Err(PlanOptError::InvalidWeights(format!(
            "{} weights for {} terms",
            weights.len(),
            problem.terms.len()
        )));
    }
    let mut model = build_model(problem);
    let mut cost = vec![0.0; model.lp.num_vars()];
    for (form, &alpha) in model.q.iter().zip(weights.as_slice()) {
        for &(j, x) in form {
            cost[j] += alpha * x;
        }
    }
    for (j, c) in cost.into_iter().enumerate() {
        model.lp.set_cost(j, c);
    }
    let sol = simplex_solve(&model.lp)?;
    match sol.status {
        LpStatus::Optimal => {}
        LpStatus::Infeasible => {
            return Err(PlanOptError::Internal(format!(
                "forward LP reported infeasible although zero fluence is feasible: {}",
                sol.diagnostics
            )))
        }
        status => return Err(PlanOptError::Solver { status, diagnostics: sol.diagnostics }),
    }
    let fluence: Vec<f64> = sol.x[model.w.clone()].iter().map(|v| v.max(0.0)).collect();
    plan_from_fluence(problem, fluence, Some(weights.clone()), Some(sol.certificate), Provenance::Clinical)
}

pub(crate) fn plan_from_fluence(
    problem: &ForwardProblem<'_>,
    fluence: Vec<f64>,
    weights: Option<ObjectiveWeights>,
    certificate: Option<Certificate>,
    provenance: Provenance,
) -> Result<Plan, PlanOptError> {
    let dose = compute_dose(problem.influence, &fluence)?;
    let term_values = problem.evaluate(&dose.values)?;
    let complexity = spg_complexity(&fluence, &problem.influence.beams)?;
    let objective = weights
        .as_ref()
        .map(|w| w.as_slice().iter().zip(&term_values).map(|(a, f)| a * f).sum());
    Ok(Plan {
        fluence,
        dose,
        beams: problem.influence.beams.clone(),
        terms: problem.terms.clone(),
        term_values,
        weights,
        objective,
        complexity,
        complexity_bound: problem.complexity_bound,
        certificate,
        mimic_residual: None,
        provenance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beam(rows: usize, cols: usize) -> Beam {
        Beam { angle_deg: 0.0, source_distance_mm: 100.0, rows, cols, beamlet_width_mm: 5.0, isocenter_mm: [0.0; 3] }
    }

    #[test]
    fn spg_of_a_single_row() {
        assert_eq!(spg_complexity(&[1.0, 2.0, 1.0], &[beam(1, 3)]).unwrap(), 2.0);
        assert_eq!(spg_complexity(&[0.0; 6], &[beam(2, 3)]).unwrap(), 0.0);
        // Rows restart from zero.
        assert_eq!(spg_complexity(&[1.0, 0.0, 2.0, 3.0], &[beam(2, 2)]).unwrap(), 4.0);
        assert_eq!(
            spg_complexity(&[1.0], &[beam(1, 3)]),
            Err(PlanOptError::SpgPartition { expected: 3, actual: 1 })
        );
    }

    #[test]
    fn spg_is_positively_homogeneous() {
        let w = [0.3, 1.7, 0.2, 0.9, 2.5, 0.0];
        let b = [beam(1, 3), beam(1, 3)];
        let base = spg_complexity(&w, &b).unwrap();
        for k in [0.0, 0.5, 3.0] {
            let scaled: Vec<f64> = w.iter().map(|x| x * k).collect();
            assert!((spg_complexity(&scaled, &b).unwrap() - k * base).abs() < 1e-12);
        }
    }
}
