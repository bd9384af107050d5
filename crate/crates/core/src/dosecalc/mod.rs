//! Dose calculation.
//!
//! Nine coplanar beams rotate about the patient z axis. Each beam is split
//! into a grid of pencil beamlets; a beamlet deposits
//! `F0 * exp(-mu * radiological_depth) * exp(-r^2 / (2 sigma^2))` in every
//! voxel within a lateral cutoff of its central axis, where `r` is the
//! perpendicular distance from the axis and `sigma` is half the beamlet width.
//! Scatter and heterogeneity corrections are not modelled.

mod influence;
mod trace;

pub use influence::{
    compute_dose, influence_matrix, read_influence, write_influence, DoseDistribution,
    InfluenceMatrix, INFLUENCE_MAGIC,
};
pub use trace::{trace_beamlet, traverse_ray, RaySegment};

use crate::phantom::{Phantom, StructureId};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const NUM_BEAMS: usize = 9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DoseCalcError {
    #[error("degenerate ray direction {0:?}")]
    DegenerateRay([f64; 3]),
    #[error("beamlet {index} out of range for beam with {count} beamlets")]
    BeamletOutOfRange { index: usize, count: usize },
    #[error("fluence vector has {actual} entries, influence matrix has {expected} beamlets")]
    FluenceLength { expected: usize, actual: usize },
    #[error("fluence must be nonnegative and finite; entry {index} is {value}")]
    InvalidFluence { index: usize, value: f64 },
    #[error("PTV70 is empty; cannot place the isocenter")]
    NoIsocenter,
    #[error("invalid physics configuration: {0}")]
    InvalidConfig(String),
    #[error("no beams supplied")]
    NoBeams,
}

/// Beam and physics parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseConfig {
    /// Linear attenuation coefficient per mm of water-equivalent depth.
    pub mu_per_mm: f64,
    /// Beamlet width (mm) in both the lateral and axial directions.
    pub beamlet_width_mm: f64,
    /// Source-to-isocenter distance (mm); places the ray origin.
    pub source_distance_mm: f64,
    /// Dose per unit fluence on the central axis at zero depth (Gy).
    pub f0: f64,
    /// Lateral profile is truncated at this many sigmas.
    pub cutoff_sigmas: f64,
}

impl Default for DoseConfig {
    fn default() -> Self {
        Self {
            mu_per_mm: 0.005,
            beamlet_width_mm: 8.0,
            source_distance_mm: 1000.0,
            f0: 1.0,
            cutoff_sigmas: 3.0,
        }
    }
}

impl DoseConfig {
    pub fn validate(&self) -> Result<(), DoseCalcError> {
        let checks = [
            ("mu_per_mm", self.mu_per_mm >= 0.0),
            ("beamlet_width_mm", self.beamlet_width_mm > 0.0),
            ("source_distance_mm", self.source_distance_mm > 0.0),
            ("f0", self.f0 > 0.0),
            ("cutoff_sigmas", self.cutoff_sigmas > 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(DoseCalcError::InvalidConfig(format!("{name} out of range")));
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.beamlet_width_mm / 2.0
    }
}

/// One treatment beam and its beamlet grid.
///
/// Beamlets are numbered row-major (`row * cols + col`); rows run along the
/// patient z axis and columns along the beam's lateral axis. The grid is
/// centred on the isocenter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub angle_deg: f64,
    pub source_distance_mm: f64,
    pub rows: usize,
    pub cols: usize,
    pub beamlet_width_mm: f64,
    pub isocenter_mm: [f64; 3],
}

impl Beam {
    pub fn beamlet_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Unit vector from source to isocenter. Gantry 0 shoots along +y.
    pub fn direction(&self) -> [f64; 3] {
        let a = self.angle_deg.to_radians();
        [-a.sin(), a.cos(), 0.0]
    }

    /// Unit lateral axis of the beamlet grid (perpendicular to the beam, in-plane).
    pub fn lateral_axis(&self) -> [f64; 3] {
        let a = self.angle_deg.to_radians();
        [a.cos(), a.sin(), 0.0]
    }

    /// Source-side point on the central axis of `beamlet`.
    pub fn beamlet_origin(&self, beamlet: usize) -> Result<[f64; 3], DoseCalcError> {
        if beamlet >= self.beamlet_count() {
            return Err(DoseCalcError::BeamletOutOfRange { index: beamlet, count: self.beamlet_count() });
        }
        let row = beamlet / self.cols;
        let col = beamlet % self.cols;
        let du = (col as f64 - (self.cols as f64 - 1.0) / 2.0) * self.beamlet_width_mm;
        let dv = (row as f64 - (self.rows as f64 - 1.0) / 2.0) * self.beamlet_width_mm;
        let d = self.direction();
        let u = self.lateral_axis();
        let mut o = [0.0; 3];
        for k in 0..3 {
            o[k] = self.isocenter_mm[k] + du * u[k] - self.source_distance_mm * d[k];
        }
        o[2] += dv;
        Ok(o)
    }
}

/// Gantry angles 0, 40, ..., 320 degrees.
pub fn beam_angles() -> [f64; NUM_BEAMS] {
    std::array::from_fn(|k| k as f64 * 360.0 / NUM_BEAMS as f64)
}

/// Nine equidistant coplanar beams aimed at the PTV70 centroid.
///
/// Each beam's grid covers the projection of the target union (all three
/// PTVs) onto its lateral and axial axes: `cols = ceil(width / beamlet width)`
/// and likewise for rows, centred on the isocenter.
pub fn make_beams(config: &DoseConfig, phantom: &Phantom) -> Result<Vec<Beam>, DoseCalcError> {
    config.validate()?;
    let grid = &phantom.grid;
    let iso = grid.centroid(StructureId::Ptv70).ok_or(DoseCalcError::NoIsocenter)?;
    let target_voxels: Vec<[f64; 3]> = grid
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_target())
        .map(|(i, _)| grid.position(i))
        .collect();
    let w = config.beamlet_width_mm;
    let half_voxel_z = grid.spacing[2] / 2.0;
    let half_voxel_xy = grid.spacing[0].max(grid.spacing[1]) / 2.0;
    let extent_z = target_voxels
        .iter()
        .map(|p| (p[2] - iso[2]).abs())
        .fold(0.0, f64::max)
        + half_voxel_z;
    let rows = ((2.0 * extent_z) / w).ceil().max(1.0) as usize;

    Ok(beam_angles()
        .iter()
        .map(|&angle_deg| {
            let mut beam = Beam {
                angle_deg,
                source_distance_mm: config.source_distance_mm,
                rows,
                cols: 1,
                beamlet_width_mm: w,
                isocenter_mm: iso,
            };
            let u = beam.lateral_axis();
            let extent_u = target_voxels
                .iter()
                .map(|p| ((p[0] - iso[0]) * u[0] + (p[1] - iso[1]) * u[1]).abs())
                .fold(0.0, f64::max)
                + half_voxel_xy;
            beam.cols = ((2.0 * extent_u) / w).ceil().max(1.0) as usize;
            beam
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn nine_beams_forty_degrees_apart() {
        assert_eq!(beam_angles(), [0.0, 40.0, 80.0, 120.0, 160.0, 200.0, 240.0, 280.0, 320.0]);
        for spec in [PhantomSpec::default(), PhantomSpec { dims: [40, 36, 10], ..PhantomSpec::default() }] {
            let p = generate_phantom(5, &spec).unwrap();
            let beams = make_beams(&DoseConfig::default(), &p).unwrap();
            assert_eq!(beams.len(), 9);
            for pair in beams.windows(2) {
                assert_eq!(pair[1].angle_deg - pair[0].angle_deg, 40.0);
            }
            let iso = p.grid.centroid(StructureId::Ptv70).unwrap();
            assert!(beams.iter().all(|b| b.isocenter_mm == iso && b.rows >= 1 && b.cols >= 1));
        }
    }

    #[test]
    fn geometry_axes_are_orthonormal() {
        for angle in beam_angles() {
            let b = Beam { angle_deg: angle, source_distance_mm: 100.0, rows: 1, cols: 1, beamlet_width_mm: 5.0, isocenter_mm: [0.0; 3] };
            let d = b.direction();
            let u = b.lateral_axis();
            let dot: f64 = (0..3).map(|k| d[k] * u[k]).sum();
            assert!(dot.abs() < 1e-12);
            assert!(((d[0] * d[0] + d[1] * d[1]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn beamlet_index_checked() {
        let b = Beam { angle_deg: 0.0, source_distance_mm: 100.0, rows: 2, cols: 3, beamlet_width_mm: 5.0, isocenter_mm: [0.0; 3] };
        assert!(b.beamlet_origin(5).is_ok());
        assert_eq!(b.beamlet_origin(6), Err(DoseCalcError::BeamletOutOfRange { index: 6, count: 6 }));
    }
}
