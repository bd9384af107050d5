use super::{dose_stats, PlanEvalError};
use crate::dosecalc::DoseDistribution;
use crate::phantom::{Phantom, StructureId};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Statistic {
    Mean,
    Max,
    D99,
}

impl Statistic {
    pub fn label(self) -> &'static str {
        match self {
            Statistic::Mean => "Dmean",
            Statistic::Max => "Dmax",
            Statistic::D99 => "D99",
        }
    }
}

/// Comparisons are inclusive: a value exactly at the threshold passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Comparator {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalCriterion {
    pub structure: StructureId,
    pub statistic: Statistic,
    pub comparator: Comparator,
    pub threshold: f64,
}

impl ClinicalCriterion {
    const fn new(structure: StructureId, statistic: Statistic, comparator: Comparator, threshold: f64) -> Self {
        Self { structure, statistic, comparator, threshold }
    }

    pub fn is_target(&self) -> bool {
        self.structure.is_target()
    }

    /// Signed distance to the threshold, positive on the passing side.
    pub fn margin(&self, achieved: f64) -> f64 {
        match self.comparator {
            Comparator::AtMost => self.threshold - achieved,
            Comparator::AtLeast => achieved - self.threshold,
        }
    }
}

impl fmt::Display for ClinicalCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = match self.comparator {
            Comparator::AtMost => "<=",
            Comparator::AtLeast => ">=",
        };
        write!(f, "{} {} {} {} Gy", self.structure.name(), self.statistic.label(), op, self.threshold)
    }
}

use Comparator::{AtLeast, AtMost};
use Statistic::{Max, Mean, D99};
use StructureId as S;

/// Seven organ-at-risk limits followed by three target coverage goals.
pub const CLINICAL_CRITERIA: [ClinicalCriterion; 10] = [
    ClinicalCriterion::new(S::Brainstem, Max, AtMost, 54.0),
    ClinicalCriterion::new(S::SpinalCord, Max, AtMost, 48.0),
    ClinicalCriterion::new(S::RightParotid, Mean, AtMost, 26.0),
    ClinicalCriterion::new(S::LeftParotid, Mean, AtMost, 26.0),
    ClinicalCriterion::new(S::Larynx, Mean, AtMost, 45.0),
    ClinicalCriterion::new(S::Esophagus, Mean, AtMost, 45.0),
    ClinicalCriterion::new(S::Mandible, Max, AtMost, 73.5),
    ClinicalCriterion::new(S::Ptv56, D99, AtLeast, 53.2),
    ClinicalCriterion::new(S::Ptv63, D99, AtLeast, 59.9),
    ClinicalCriterion::new(S::Ptv70, D99, AtLeast, 66.5),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    pub criterion: ClinicalCriterion,
    /// `None` when the structure is missing; such criteria are not evaluable
    /// and are left out of every rate.
    pub achieved: Option<f64>,
}

impl CriterionOutcome {
    pub fn margin(&self) -> Option<f64> {
        self.achieved.map(|a| self.criterion.margin(a))
    }

    pub fn passed(&self) -> Option<bool> {
        self.margin().map(|m| m >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriteriaReport {
    pub outcomes: Vec<CriterionOutcome>,
}

pub fn criteria_check(dose: &DoseDistribution, phantom: &Phantom) -> Result<CriteriaReport, PlanEvalError> {
    if dose.dims != phantom.dims() {
        return Err(PlanEvalError::DimMismatch { expected: phantom.dims(), actual: dose.dims });
    }
    let masks = phantom.grid.structure_masks();
    let outcomes = CLINICAL_CRITERIA
        .iter()
        .map(|c| {
            let achieved = masks.get(&c.structure).filter(|m| !m.is_empty()).map(|m| {
                let s = dose_stats(&dose.values, m).expect("mask is nonempty");
                match c.statistic {
                    Mean => s.mean,
                    Max => s.max,
                    D99 => s.d99,
                }
            });
            CriterionOutcome { criterion: *c, achieved }
        })
        .collect();
    Ok(CriteriaReport { outcomes })
}

/// Scale `dose` so that its PTV70 D99 equals the reference's. Returns the
/// scaled dose and the factor applied.
pub fn normalize_to_reference(
    dose: &DoseDistribution,
    reference: &DoseDistribution,
    phantom: &Phantom,
) -> Result<(DoseDistribution, f64), PlanEvalError> {
    for d in [dose, reference] {
        if d.dims != phantom.dims() {
            return Err(PlanEvalError::DimMismatch { expected: phantom.dims(), actual: d.dims });
        }
    }
    let mask = phantom.mask(StructureId::Ptv70);
    if mask.is_empty() {
        return Err(PlanEvalError::EmptyStructure(StructureId::Ptv70));
    }
    let plan = dose_stats(&dose.values, &mask)?.d99;
    let target = dose_stats(&reference.values, &mask)?.d99;
    if !(plan > 0.0 && plan.is_finite()) {
        return Err(PlanEvalError::ZeroD99(plan));
    }
    let scale = target / plan;
    Ok((dose.scaled(scale), scale))
}
