//! Synthetic patients.
//!
//! A [`Phantom`] stands in for a contoured head-and-neck CT: a voxel grid with
//! water-equivalent densities and exactly one [`StructureId`] per voxel.
//! Targets take precedence over organs at risk wherever both are drawn.

mod distance;
mod generate;
mod render;
mod structure;

pub use distance::distance_to_surface;
pub use generate::{generate_phantom, PhantomSpec};
pub use render::{pixel_to_voxel, render_contoured_slice, ContouredSlice};
pub use structure::{StructureId, PALETTE};

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("grid {dims:?} is too small to fit nested targets (need nx, ny >= 16 and nz >= 4)")]
    DimsTooSmall { dims: [usize; 3] },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("plane index {z} out of range for {nz} planes")]
    PlaneOutOfRange { z: usize, nz: usize },
    #[error("structure {0} is empty")]
    EmptyStructure(StructureId),
    #[error("slice size {0} must be a power of two >= 8")]
    InvalidSliceSize(usize),
    #[error("could not place {0} without it vanishing under target precedence")]
    Placement(StructureId),
}

/// Regular voxel grid with per-voxel density and structure label.
///
/// Storage is row-major with x fastest: `index = x + nx * (y + ny * z)`.
/// Voxel centres sit at `index * spacing` (mm).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub density: Vec<f32>,
    pub labels: Vec<StructureId>,
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            spacing,
            density: vec![0.0; n],
            labels: vec![StructureId::Unclassified; n],
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Voxel centre in mm.
    #[inline]
    pub fn position(&self, index: usize) -> [f64; 3] {
        let c = self.coords(index);
        [
            c[0] as f64 * self.spacing[0],
            c[1] as f64 * self.spacing[1],
            c[2] as f64 * self.spacing[2],
        ]
    }

    pub fn mask(&self, s: StructureId) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| (l == s).then_some(i))
            .collect()
    }

    pub fn count(&self, s: StructureId) -> usize {
        self.labels.iter().filter(|&&l| l == s).count()
    }

    /// Voxel-index masks for every structure except `Unclassified`.
    pub fn structure_masks(&self) -> BTreeMap<StructureId, Vec<usize>> {
        let mut out: BTreeMap<StructureId, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            if l != StructureId::Unclassified {
                out.entry(l).or_default().push(i);
            }
        }
        out
    }

    /// Centroid (mm) of a structure, `None` when it is empty.
    pub fn centroid(&self, s: StructureId) -> Option<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for (i, &l) in self.labels.iter().enumerate() {
            if l == s {
                let p = self.position(i);
                for k in 0..3 {
                    acc[k] += p[k];
                }
                n += 1;
            }
        }
        (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64])
    }

    pub fn label_histogram(&self) -> [usize; 12] {
        let mut h = [0usize; 12];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }
}

/// A synthetic patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phantom {
    pub grid: VoxelGrid,
    pub prescriptions: BTreeMap<StructureId, f64>,
    pub seed: u64,
}

impl Phantom {
    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn mask(&self, s: StructureId) -> Vec<usize> {
        self.grid.mask(s)
    }
}
