//! Core numerical machinery for knowledge-based radiotherapy planning.
//!
//! The crate covers four stages of the pipeline:
//!
//! - [`phantom`]: reproducible synthetic patients (voxel grids, structure
//!   labels, prescriptions) and the colour-contoured slices fed to predictors.
//! - [`dosecalc`]: nine-beam pencil-beam geometry, voxel ray traversal and the
//!   sparse dose-influence matrix.
//! - [`planopt`]: the 65-term forward linear program, gap-minimizing inverse
//!   optimization, dose mimicking, and the in-repo simplex solver in [`lp`].
//! - [`planeval`]: dose statistics, clinical criteria, DVHs, gamma analysis and
//!   population-level aggregation.

pub mod dosecalc;
pub mod lp;
pub mod phantom;
pub mod planeval;
pub mod planopt;
pub mod stats;
pub mod volume;

pub use dosecalc::{Beam, DoseDistribution, InfluenceMatrix};
pub use phantom::{Phantom, PhantomSpec, StructureId, VoxelGrid};
