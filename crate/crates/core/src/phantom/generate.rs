use super::{Phantom, PhantomError, StructureId, VoxelGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, VecDeque};

/// Size and variability of generated phantoms.
///
/// All geometry is expressed as fractions of the grid so the same layout
/// scales from desk-sized grids up to larger ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    /// Uniform jitter of the target centre, in voxels (half-width).
    pub target_jitter: f64,
    /// Uniform jitter of organ-at-risk centres, in voxels (half-width).
    pub oar_jitter: f64,
    /// Fractional radius variation applied per structure.
    pub size_variation: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [24, 24, 8],
            spacing: [4.0, 4.0, 2.0],
            target_jitter: 1.5,
            oar_jitter: 0.75,
            size_variation: 0.1,
        }
    }
}

/// Nominal organ-at-risk layout: centre offset as a fraction of the body
/// semi-axes (x, y) and of nz (z), radii as fractions of the grid dims.
/// Listed in placement order; an earlier organ keeps contested voxels.
const OAR_LAYOUT: [(StructureId, [f64; 3], [f64; 3]); 8] = [
    (StructureId::Brainstem, [0.0, 0.50, 0.25], [0.07, 0.07, 0.22]),
    (StructureId::SpinalCord, [0.0, 0.55, -0.15], [0.05, 0.05, 0.45]),
    (StructureId::RightParotid, [-0.62, 0.05, 0.15], [0.08, 0.10, 0.30]),
    (StructureId::LeftParotid, [0.66, 0.05, 0.15], [0.08, 0.10, 0.30]),
    (StructureId::Larynx, [-0.05, -0.55, -0.25], [0.07, 0.06, 0.25]),
    (StructureId::Esophagus, [-0.05, 0.22, -0.20], [0.05, 0.05, 0.35]),
    (StructureId::Mandible, [0.0, -0.75, 0.20], [0.22, 0.05, 0.25]),
    (StructureId::LimPostNeck, [0.0, 0.78, 0.0], [0.22, 0.05, 0.50]),
];

const MAX_PLACEMENT_ATTEMPTS: usize = 16;

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for k in 0..3 {
            let d = (p[k] - self.center[k]) / self.radii[k];
            s += d * d;
        }
        s <= 1.0
    }

    /// In-plane containment only; targets may be truncated by the first and last slices.
    fn fits(&self, dims: [usize; 3]) -> bool {
        (0..2).all(|k| {
            self.center[k] - self.radii[k] >= -0.5
                && self.center[k] + self.radii[k] <= dims[k] as f64 - 0.5
        })
    }
}

/// Generate a synthetic patient.
///
/// Deterministic in `(seed, spec)`. Targets are three nested ellipsoids near
/// the grid centre (PTV70 inside PTV63 inside PTV56); organs at risk are
/// ellipsoids around them, clipped to the body. A voxel drawn by both a
/// target and an organ is labelled as the target, and every organ mask is
/// reduced to its largest 6-connected component.
pub fn generate_phantom(seed: u64, spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let dims = spec.dims;
    if dims[0] < 16 || dims[1] < 16 || dims[2] < 4 {
        return Err(PhantomError::DimsTooSmall { dims });
    }
    if spec.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(PhantomError::InvalidSpec(format!(
            "spacing must be positive and finite, got {:?}",
            spec.spacing
        )));
    }
    for (name, v) in [
        ("target_jitter", spec.target_jitter),
        ("oar_jitter", spec.oar_jitter),
        ("size_variation", spec.size_variation),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(PhantomError::InvalidSpec(format!("{name} must be >= 0, got {v}")));
        }
    }
    if spec.size_variation >= 0.5 {
        return Err(PhantomError::InvalidSpec("size_variation must be < 0.5".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = VoxelGrid::new(dims, spec.spacing);
    let [nx, ny, nz] = dims.map(|d| d as f64);
    let center = [(nx - 1.0) / 2.0, (ny - 1.0) / 2.0, (nz - 1.0) / 2.0];
    let body = [0.46 * nx, 0.42 * ny];

    for i in 0..grid.len() {
        let [x, y, _] = grid.coords(i);
        let u = (x as f64 - center[0]) / body[0];
        let v = (y as f64 - center[1]) / body[1];
        grid.density[i] = if u * u + v * v <= 1.0 { 1.0 } else { 0.0 };
    }

    // Nested targets share one centre.
    let j = spec.target_jitter;
    let tc = [
        center[0] + 0.12 * body[0] + sym(&mut rng, j),
        center[1] - 0.10 * body[1] + sym(&mut rng, j),
        center[2] + sym(&mut rng, 0.5 * j),
    ];
    let scale = 1.0 + sym(&mut rng, spec.size_variation);
    let r70 = [
        (0.09 * nx * scale).max(1.2),
        (0.09 * ny * scale).max(1.2),
        (0.22 * nz * scale).max(0.8),
    ];
    let step = [(0.05 * nx).max(1.0), (0.05 * ny).max(1.0), (0.10 * nz).max(0.6)];
    let r63 = [r70[0] + step[0], r70[1] + step[1], r70[2] + step[2]];
    let r56 = [r63[0] + step[0], r63[1] + step[1], r63[2] + step[2]];
    let targets = [
        (StructureId::Ptv70, Ellipsoid { center: tc, radii: r70 }),
        (StructureId::Ptv63, Ellipsoid { center: tc, radii: r63 }),
        (StructureId::Ptv56, Ellipsoid { center: tc, radii: r56 }),
    ];
    if !targets[2].1.fits(dims) {
        return Err(PhantomError::DimsTooSmall { dims });
    }
    for i in 0..grid.len() {
        let c = grid.coords(i).map(|v| v as f64);
        if let Some((s, _)) = targets.iter().find(|(_, e)| e.contains(c)) {
            grid.labels[i] = *s;
        }
    }
    for (s, _) in &targets {
        if grid.count(*s) == 0 {
            return Err(PhantomError::Placement(*s));
        }
    }

    for (id, offset, radius_frac) in OAR_LAYOUT {
        let nominal = [
            center[0] + offset[0] * body[0],
            center[1] + offset[1] * body[1],
            center[2] + offset[2] * nz,
        ];
        // Unit vector pushing the organ away from the targets on retries.
        let mut away = [nominal[0] - tc[0], nominal[1] - tc[1], 0.0];
        let norm = (away[0] * away[0] + away[1] * away[1]).sqrt().max(1e-9);
        away[0] /= norm;
        away[1] /= norm;

        let s = 1.0 + sym(&mut rng, spec.size_variation);
        let radii = [
            (radius_frac[0] * nx * s).max(0.6),
            (radius_frac[1] * ny * s).max(0.6),
            (radius_frac[2] * nz * s).max(0.6),
        ];
        let mut placed = false;
        for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            let push = 0.75 * attempt as f64;
            let mut c = [0.0; 3];
            for k in 0..3 {
                let jit = sym(&mut rng, spec.oar_jitter);
                let raw = nominal[k] + jit + push * away[k];
                c[k] = raw.round().clamp(0.0, dims[k] as f64 - 1.0);
            }
            let e = Ellipsoid { center: c, radii };
            let candidate: Vec<usize> = (0..grid.len())
                .filter(|&i| {
                    grid.labels[i] == StructureId::Unclassified
                        && grid.density[i] > 0.0
                        && e.contains(grid.coords(i).map(|v| v as f64))
                })
                .collect();
            let kept = largest_component(&grid, &candidate);
            if !kept.is_empty() {
                for i in kept {
                    grid.labels[i] = id;
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(PhantomError::Placement(id));
        }
    }

    let prescriptions: BTreeMap<StructureId, f64> = StructureId::TARGETS
        .iter()
        .map(|&s| (s, s.prescription().expect("targets carry prescriptions")))
        .collect();
    Ok(Phantom { grid, prescriptions, seed })
}

fn sym(rng: &mut ChaCha8Rng, half_width: f64) -> f64 {
    if half_width == 0.0 {
        0.0
    } else {
        rng.random_range(-half_width..=half_width)
    }
}

/// Largest 6-connected component of a voxel set; ties go to the component
/// containing the smallest index.
fn largest_component(grid: &VoxelGrid, voxels: &[usize]) -> Vec<usize> {
    if voxels.is_empty() {
        return Vec::new();
    }
    let mut member = vec![false; grid.len()];
    for &v in voxels {
        member[v] = true;
    }
    let mut seen = vec![false; grid.len()];
    let mut best: Vec<usize> = Vec::new();
    for &start in voxels {
        if seen[start] {
            continue;
        }
        let comp = flood(grid, start, &member, &mut seen);
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best.sort_unstable();
    best
}

pub(crate) fn flood(grid: &VoxelGrid, start: usize, member: &[bool], seen: &mut [bool]) -> Vec<usize> {
    let [nx, ny, nz] = grid.dims;
    let mut comp = Vec::new();
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    while let Some(i) = queue.pop_front() {
        comp.push(i);
        let [x, y, z] = grid.coords(i);
        let mut push = |j: usize| {
            if member[j] && !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        };
        if x > 0 {
            push(i - 1);
        }
        if x + 1 < nx {
            push(i + 1);
        }
        if y > 0 {
            push(i - nx);
        }
        if y + 1 < ny {
            push(i + nx);
        }
        if z > 0 {
            push(i - nx * ny);
        }
        if z + 1 < nz {
            push(i + nx * ny);
        }
    }
    comp
}
