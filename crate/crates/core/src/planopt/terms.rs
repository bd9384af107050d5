use super::PlanOptError;
use crate::dosecalc::DoseDistribution;
use crate::phantom::{Phantom, StructureId};
use crate::stats::{quantile_sorted, sorted_values};
use serde::{Deserialize, Serialize};
use std::fmt;

/// Quantile levels of the per-organ tail thresholds.
pub const TAIL_LEVELS: [f64; 5] = [0.25, 0.50, 0.75, 0.90, 0.975];

/// Seven terms per organ at risk and three per target.
pub const NUM_TERMS: usize = 8 * 7 + 3 * 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "gy")]
pub enum TermKind {
    MeanDose,
    MaxDose,
    /// Mean of `max(0, d - tau)`.
    AvgAboveThreshold(f64),
    /// Mean of `max(0, rho - d)`.
    AvgUnderdose(f64),
    /// Mean of `max(0, d - rho)`.
    AvgOverdose(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerm {
    pub structure: StructureId,
    pub kind: TermKind,
}

impl fmt::Display for ObjectiveTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TermKind::MeanDose => write!(f, "{} mean", self.structure),
            TermKind::MaxDose => write!(f, "{} max", self.structure),
            TermKind::AvgAboveThreshold(t) => write!(f, "{} above {t:.3}", self.structure),
            TermKind::AvgUnderdose(r) => write!(f, "{} under {r}", self.structure),
            TermKind::AvgOverdose(r) => write!(f, "{} over {r}", self.structure),
        }
    }
}

/// The 65 planning terms for one patient.
///
/// Organ thresholds are quantiles of `dose` over the organ, so a term
/// penalises dose in excess of what the guiding distribution puts in that
/// part of the organ. Order: organs in [`StructureId::OARS`] order (mean,
/// max, five tail terms), then targets in [`StructureId::TARGETS`] order
/// (max, underdose, overdose).
pub fn build_terms(phantom: &Phantom, dose: &DoseDistribution) -> Result<Vec<ObjectiveTerm>, PlanOptError> {
    if dose.dims != phantom.dims() {
        return Err(PlanOptError::DimMismatch { expected: phantom.dims(), actual: dose.dims });
    }
    let mut terms = Vec::with_capacity(NUM_TERMS);
    for s in StructureId::OARS {
        let mask = phantom.mask(s);
        if mask.is_empty() {
            return Err(PlanOptError::EmptyStructure(s));
        }
        let sorted = sorted_values(&dose.values, &mask);
        terms.push(ObjectiveTerm { structure: s, kind: TermKind::MeanDose });
        terms.push(ObjectiveTerm { structure: s, kind: TermKind::MaxDose });
        for p in TAIL_LEVELS {
            terms.push(ObjectiveTerm { structure: s, kind: TermKind::AvgAboveThreshold(quantile_sorted(&sorted, p)) });
        }
    }
    for s in StructureId::TARGETS {
        if phantom.grid.count(s) == 0 {
            return Err(PlanOptError::EmptyStructure(s));
        }
        let rho = prescription(phantom, s);
        terms.push(ObjectiveTerm { structure: s, kind: TermKind::MaxDose });
        terms.push(ObjectiveTerm { structure: s, kind: TermKind::AvgUnderdose(rho) });
        terms.push(ObjectiveTerm { structure: s, kind: TermKind::AvgOverdose(rho) });
    }
    Ok(terms)
}

pub(crate) fn prescription(phantom: &Phantom, s: StructureId) -> f64 {
    phantom
        .prescriptions
        .get(&s)
        .copied()
        .or_else(|| s.prescription())
        .unwrap_or(0.0)
}

/// Value of one term on the voxels of `mask`.
pub fn term_value(term: &ObjectiveTerm, dose: &[f64], mask: &[usize]) -> Result<f64, PlanOptError> {
    if mask.is_empty() {
        return Err(PlanOptError::EmptyStructure(term.structure));
    }
    let n = mask.len() as f64;
    let mean_of = |f: &dyn Fn(f64) -> f64| mask.iter().map(|&v| f(dose[v])).sum::<f64>() / n;
    Ok(match term.kind {
        TermKind::MeanDose => mean_of(&|d| d),
        TermKind::MaxDose => mask.iter().map(|&v| dose[v]).fold(f64::NEG_INFINITY, f64::max),
        TermKind::AvgAboveThreshold(t) => mean_of(&|d| (d - t).max(0.0)),
        TermKind::AvgUnderdose(r) => mean_of(&|d| (r - d).max(0.0)),
        TermKind::AvgOverdose(r) => mean_of(&|d| (d - r).max(0.0)),
    })
}

/// Values of every term of `terms` for `dose` on `phantom`.
pub fn term_values(terms: &[ObjectiveTerm], phantom: &Phantom, dose: &[f64]) -> Result<Vec<f64>, PlanOptError> {
    let masks = phantom.grid.structure_masks();
    terms
        .iter()
        .map(|t| {
            let mask = masks.get(&t.structure).map(Vec::as_slice).unwrap_or(&[]);
            term_value(t, dose, mask)
        })
        .collect()
}
