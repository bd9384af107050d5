use super::forward::{solve_forward, ForwardProblem};
use super::terms::{build_terms, prescription, TermKind, NUM_TERMS};
use super::{ObjectiveWeights, Plan, PlanOptError, Provenance};
use crate::dosecalc::{DoseDistribution, InfluenceMatrix};
use crate::phantom::{distance_to_surface, Phantom, StructureId};
use serde::{Deserialize, Serialize};

/// Raw per-term weights of the reference planner before normalisation.
/// Organ terms in build order: mean, max, then the five tail levels.
const OAR_WEIGHTS: [f64; 7] = [1.0, 0.5, 0.25, 0.25, 0.5, 0.5, 1.0];
/// Target terms in build order: max, underdose, overdose.
const TARGET_WEIGHTS: [f64; 3] = [2.0, 40.0, 4.0];

/// Fixed target-heavy weights used to synthesize reference plans.
pub fn reference_weights() -> ObjectiveWeights {
    let mut raw = Vec::with_capacity(NUM_TERMS);
    for _ in StructureId::OARS {
        raw.extend_from_slice(&OAR_WEIGHTS);
    }
    for _ in StructureId::TARGETS {
        raw.extend_from_slice(&TARGET_WEIGHTS);
    }
    ObjectiveWeights::from_raw(raw).expect("constant table is positive")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceOptions {
    /// Dose fall-off length (mm) of the template distribution around targets.
    pub falloff_mm: f64,
    /// Complexity bound as a fraction of the unconstrained plan's complexity.
    pub complexity_fraction: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self { falloff_mm: 10.0, complexity_fraction: 0.8 }
    }
}

/// Idealised dose: every target's prescription decaying exponentially with
/// distance from that target, maximised over targets.
pub fn template_dose(phantom: &Phantom, falloff_mm: f64) -> Result<DoseDistribution, PlanOptError> {
    if !(falloff_mm.is_finite() && falloff_mm > 0.0) {
        return Err(PlanOptError::InvalidProblem(format!("fall-off {falloff_mm} must be positive")));
    }
    let mut values = vec![0.0; phantom.grid.len()];
    for s in StructureId::TARGETS {
        let rho = prescription(phantom, s);
        let dist = distance_to_surface(&phantom.grid, s)?;
        for (v, d) in values.iter_mut().zip(dist) {
            *v = f64::max(*v, rho * (-d / falloff_mm).exp());
        }
    }
    Ok(DoseDistribution { dims: phantom.dims(), spacing: phantom.spacing(), values })
}

/// A synthesized reference plan and the bound it was planned under.
#[derive(Debug, Clone)]
pub struct ReferencePlan {
    pub plan: Plan,
    /// Complexity of the plan optimised without a bound.
    pub unconstrained_complexity: f64,
    pub complexity_bound: f64,
}

/// Plan `phantom` the way the reference planner would.
///
/// Organ thresholds come from the template dose; the plan is optimised with
/// [`reference_weights`] once without a complexity bound, then again with the
/// bound set to a fraction of that plan's complexity.
pub fn reference_plan(
    phantom: &Phantom,
    influence: &InfluenceMatrix,
    options: &ReferenceOptions,
) -> Result<ReferencePlan, PlanOptError> {
    if !(options.complexity_fraction > 0.0 && options.complexity_fraction <= 1.0) {
        return Err(PlanOptError::InvalidProblem("complexity fraction must lie in (0, 1]".into()));
    }
    let template = template_dose(phantom, options.falloff_mm)?;
    let terms = build_terms(phantom, &template)?;
    debug_assert!(terms.iter().all(|t| !matches!(t.kind, TermKind::AvgAboveThreshold(v) if !v.is_finite())));
    let alpha = reference_weights();
    let free = ForwardProblem::new(influence, phantom, terms.clone(), None)?;
    let unconstrained = solve_forward(&free, &alpha)?;
    let bound = options.complexity_fraction * unconstrained.complexity;
    let bounded = ForwardProblem::new(influence, phantom, terms, Some(bound))?;
    let mut plan = solve_forward(&bounded, &alpha)?;
    plan.provenance = Provenance::Clinical;
    Ok(ReferencePlan { plan, unconstrained_complexity: unconstrained.complexity, complexity_bound: bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn reference_weights_are_target_heavy() {
        let w = reference_weights();
        assert_eq!(w.len(), 65);
        assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let target: f64 = w.as_slice()[56..].iter().sum();
        assert!(target > 0.5);
    }

    #[test]
    fn template_peaks_at_prescription() {
        let p = generate_phantom(4, &PhantomSpec::default()).unwrap();
        let t = template_dose(&p, 10.0).unwrap();
        for v in p.mask(StructureId::Ptv70) {
            assert_eq!(t.values[v], 70.0);
        }
        assert!(t.values.iter().all(|&d| (0.0..=70.0).contains(&d)));
    }
}
