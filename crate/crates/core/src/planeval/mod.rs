//! Plan evaluation: dose statistics, DVHs, the clinical criteria, dose
//! normalization, the gamma passing rate and population summaries.
//!
//! D99 and every other quantile use linear interpolation on sorted voxel
//! doses with plotting positions `k / (n - 1)` (see [`crate::stats`]).

mod aggregate;
mod criteria;
mod gamma;
mod report;

pub use aggregate::{
    aggregate_criteria, gamma_group_rates, gamma_table, head_to_head, GammaTable, HeadToHeadRow, SatisfactionRates, SatisfactionTable,
    StructureGroup,
};
pub use criteria::{
    criteria_check, normalize_to_reference, ClinicalCriterion, Comparator, CriteriaReport, CriterionOutcome, Statistic,
    CLINICAL_CRITERIA,
};
pub use gamma::{gamma_pass_rate, GammaMethod, GammaNormalization, GammaOptions, GammaResult};
pub use report::{criteria_csv, dvh_csv, dvh_svg, head_to_head_csv, head_to_head_svg};

use crate::phantom::StructureId;
use crate::stats::{quantile_sorted, sorted_values};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanEvalError {
    #[error("empty voxel mask")]
    EmptyMask,
    #[error("structure {0} is empty")]
    EmptyStructure(StructureId),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("voxel spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch([f64; 3], [f64; 3]),
    #[error("plan D99 of PTV70 is {0}; cannot normalize")]
    ZeroD99(f64),
    #[error("empty population")]
    EmptyPopulation,
    #[error("invalid gamma parameters: {0}")]
    InvalidGamma(String),
    #[error("reports disagree: {0}")]
    Mismatch(String),
}

/// Mean, maximum and D99 of a structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoseStats {
    pub mean: f64,
    pub max: f64,
    /// Dose received by at least 99% of the volume (the 1% quantile).
    pub d99: f64,
}

pub fn dose_stats(dose: &[f64], mask: &[usize]) -> Result<DoseStats, PlanEvalError> {
    if mask.is_empty() {
        return Err(PlanEvalError::EmptyMask);
    }
    let sorted = sorted_values(dose, mask);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(DoseStats { mean, max: sorted[sorted.len() - 1], d99: quantile_sorted(&sorted, 0.01) })
}

pub const DVH_MAX_GY: f64 = 80.0;
pub const DVH_STEP_GY: f64 = 0.1;

/// Cumulative dose-volume histogram of one structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhCurve {
    pub structure: StructureId,
    /// Voxel doses, ascending.
    pub sorted_doses: Vec<f64>,
    /// `volume[k]`: fraction of voxels receiving at least `k * DVH_STEP_GY`.
    pub volume: Vec<f64>,
}

impl DvhCurve {
    pub fn dose_at(k: usize) -> f64 {
        k as f64 * DVH_STEP_GY
    }

    pub fn len(&self) -> usize {
        self.volume.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volume.is_empty()
    }
}

/// DVH sampled on `0, 0.1, ..., 80` Gy.
pub fn dvh(dose: &[f64], mask: &[usize], structure: StructureId) -> Result<DvhCurve, PlanEvalError> {
    if mask.is_empty() {
        return Err(PlanEvalError::EmptyStructure(structure));
    }
    let sorted = sorted_values(dose, mask);
    let n = sorted.len() as f64;
    let points = (DVH_MAX_GY / DVH_STEP_GY).round() as usize + 1;
    let volume = (0..points)
        .map(|k| {
            let level = DvhCurve::dose_at(k);
            let below = sorted.partition_point(|&d| d < level);
            (sorted.len() - below) as f64 / n
        })
        .collect();
    Ok(DvhCurve { structure, sorted_doses: sorted, volume })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn stats_examples() {
        let s = dose_stats(&[70.0; 5], &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!((s.mean, s.max, s.d99), (70.0, 70.0, 70.0));
        let s = dose_stats(&[0.0, 100.0], &[0, 1]).unwrap();
        assert!((s.d99 - 1.0).abs() < 1e-12);
        assert_eq!(dose_stats(&[40.0, 60.0], &[0, 1]).unwrap().max, 60.0);
        assert_eq!(dose_stats(&[1.0], &[]), Err(PlanEvalError::EmptyMask));
    }

    #[test]
    fn dvh_end_points() {
        let d = dvh(&[10.0, 20.0, 30.0, 40.0], &[0, 1, 2, 3], StructureId::Larynx).unwrap();
        assert_eq!(d.len(), 801);
        assert_eq!(d.volume[0], 1.0);
        assert_eq!(d.volume[100], 1.0);
        assert_eq!(d.volume[101], 0.75);
        assert_eq!(d.volume[400], 0.25);
        assert_eq!(d.volume[401], 0.0);
        assert!(dvh(&[1.0], &[], StructureId::Larynx).is_err());
    }

    proptest! {
        #[test]
        fn dvh_is_nonincreasing(doses in proptest::collection::vec(0.0f64..90.0, 1..60)) {
            let mask: Vec<usize> = (0..doses.len()).collect();
            let d = dvh(&doses, &mask, StructureId::Mandible).unwrap();
            prop_assert_eq!(d.volume[0], 1.0);
            prop_assert!(d.volume.windows(2).all(|w| w[1] <= w[0]));
            let max = doses.iter().copied().fold(0.0, f64::max);
            for (k, v) in d.volume.iter().enumerate() {
                if DvhCurve::dose_at(k) > max {
                    prop_assert_eq!(*v, 0.0);
                }
            }
        }
    }
}
