//! Plan optimization.
//!
//! A plan is a nonnegative fluence vector. Its quality is scored by 65 terms
//! (seven per organ at risk, three per target) and its deliverability by the
//! sum-of-positive-gradients (SPG) complexity of each beamlet row. The module
//! provides the forward problem (weights to plan), gap-minimizing inverse
//! optimization (dose to weights), least-squares dose mimicking and the
//! synthesis of reference plans.

mod file;
mod forward;
mod inverse;
mod mimic;
mod reference;
mod terms;

pub use file::{read_plan, write_plan, PLAN_MAGIC};
pub use forward::{solve_forward, spg_complexity, ForwardProblem};
pub use inverse::{inverse_weights, InverseResult, TERM_FLOOR};
pub use mimic::{dose_mimic, MimicOptions, MimicReport};
pub use reference::{reference_plan, reference_weights, template_dose, ReferenceOptions, ReferencePlan};
pub use terms::{build_terms, term_value, term_values, ObjectiveTerm, TermKind, NUM_TERMS, TAIL_LEVELS};

use crate::dosecalc::{Beam, DoseCalcError, DoseDistribution};
use crate::lp::{Certificate, LpError, LpStatus};
use crate::phantom::{PhantomError, StructureId};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanOptError {
    #[error("structure {0} is empty")]
    EmptyStructure(StructureId),
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error("fluence has {actual} entries but the beams define {expected} beamlets")]
    SpgPartition { expected: usize, actual: usize },
    #[error("invalid objective weights: {0}")]
    InvalidWeights(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("LP solver stopped with {status:?}: {diagnostics}")]
    Solver { status: LpStatus, diagnostics: String },
    #[error("internal error: {0}")]
    Internal(String),
    #[error("dose mimicking could not meet the complexity bound (excess {violation:.3e})")]
    MimicInfeasible { violation: f64, best: Box<Plan> },
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Dose(#[from] DoseCalcError),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
}

/// Nonnegative term weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectiveWeights(Vec<f64>);

impl ObjectiveWeights {
    /// Accept weights already on the unit simplex (to within 1e-9).
    pub fn new(values: Vec<f64>) -> Result<Self, PlanOptError> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(PlanOptError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(PlanOptError::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    /// Normalise arbitrary nonnegative weights onto the simplex. Entries
    /// down to `-1e-9` are treated as round-off and clipped to zero.
    pub fn from_raw(values: Vec<f64>) -> Result<Self, PlanOptError> {
        if values.iter().any(|v| !v.is_finite() || *v < -1e-9) {
            return Err(PlanOptError::InvalidWeights("weights must be finite and nonnegative".into()));
        }
        let clipped: Vec<f64> = values.iter().map(|v| v.max(0.0)).collect();
        let sum: f64 = clipped.iter().sum();
        if sum <= 0.0 {
            return Err(PlanOptError::InvalidWeights("all weights are zero".into()));
        }
        Ok(Self(clipped.iter().map(|v| v / sum).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Where a plan came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Clinical,
    Gan,
    Cnn,
    Rf,
    Mimic,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::Clinical => "Clinical",
            Provenance::Gan => "GAN",
            Provenance::Cnn => "CNN",
            Provenance::Rf => "RF",
            Provenance::Mimic => "mimic",
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A deliverable plan and its scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub fluence: Vec<f64>,
    pub dose: DoseDistribution,
    pub beams: Vec<Beam>,
    pub terms: Vec<ObjectiveTerm>,
    /// `f_t(dose)` for every term.
    pub term_values: Vec<f64>,
    pub weights: Option<ObjectiveWeights>,
    /// `sum_t alpha_t f_t(dose)` when weights are known.
    pub objective: Option<f64>,
    pub complexity: f64,
    pub complexity_bound: Option<f64>,
    pub certificate: Option<Certificate>,
    pub mimic_residual: Option<f64>,
    pub provenance: Provenance,
}
