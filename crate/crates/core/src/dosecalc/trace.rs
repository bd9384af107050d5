use super::{Beam, DoseCalcError, DoseConfig};
use crate::phantom::VoxelGrid;

/// Portion of a ray inside one voxel; `t` is distance along the unit direction (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySegment {
    pub voxel: usize,
    pub t_enter: f64,
    pub t_exit: f64,
}

impl RaySegment {
    pub fn length(&self) -> f64 {
        self.t_exit - self.t_enter
    }
}

/// Voxel-exact traversal of the ray `origin + t * dir` (t >= 0) through a grid
/// whose voxel `i` along an axis spans `[(i - 1/2) h, (i + 1/2) h]`.
///
/// Steps from one voxel boundary plane to the next (incremental parametric
/// traversal). Boundary crossings are recomputed from the plane index rather
/// than accumulated, so segment lengths do not drift. A ray that misses the
/// grid yields no segments.
pub fn traverse_ray(
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dir: [f64; 3],
) -> Result<Vec<RaySegment>, DoseCalcError> {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    if !(norm.is_finite() && norm > 0.0) || origin.iter().any(|v| !v.is_finite()) {
        return Err(DoseCalcError::DegenerateRay(dir));
    }
    let d = [dir[0] / norm, dir[1] / norm, dir[2] / norm];
    let lo = [-0.5 * spacing[0], -0.5 * spacing[1], -0.5 * spacing[2]];
    let hi = [
        (dims[0] as f64 - 0.5) * spacing[0],
        (dims[1] as f64 - 0.5) * spacing[1],
        (dims[2] as f64 - 0.5) * spacing[2],
    ];

    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k] == 0.0 {
            if origin[k] < lo[k] || origin[k] >= hi[k] {
                return Ok(Vec::new());
            }
        } else {
            let a = (lo[k] - origin[k]) / d[k];
            let b = (hi[k] - origin[k]) / d[k];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
    }
    if !(t1 > t0) {
        return Ok(Vec::new());
    }

    // Entry cell, clamped against round-off at the box faces.
    let mut idx = [0i64; 3];
    for k in 0..3 {
        let p = origin[k] + d[k] * t0;
        let cell = ((p - lo[k]) / spacing[k]).floor() as i64;
        idx[k] = cell.clamp(0, dims[k] as i64 - 1);
    }
    let boundary_t = |k: usize, cell: i64| -> f64 {
        if d[k] > 0.0 {
            (lo[k] + (cell + 1) as f64 * spacing[k] - origin[k]) / d[k]
        } else if d[k] < 0.0 {
            (lo[k] + cell as f64 * spacing[k] - origin[k]) / d[k]
        } else {
            f64::INFINITY
        }
    };
    let step = d.map(|v| if v > 0.0 { 1i64 } else { -1 });
    let mut t_max = [boundary_t(0, idx[0]), boundary_t(1, idx[1]), boundary_t(2, idx[2])];

    let nx = dims[0];
    let nxy = dims[0] * dims[1];
    let mut segments = Vec::new();
    let mut t = t0;
    loop {
        let t_next = t_max[0].min(t_max[1]).min(t_max[2]).min(t1);
        if t_next > t {
            let voxel = idx[0] as usize + nx * idx[1] as usize + nxy * idx[2] as usize;
            segments.push(RaySegment { voxel, t_enter: t, t_exit: t_next });
            t = t_next;
        }
        if t >= t1 {
            break;
        }
        let mut left = false;
        for k in 0..3 {
            if t_max[k] <= t_next {
                idx[k] += step[k];
                if idx[k] < 0 || idx[k] >= dims[k] as i64 {
                    left = true;
                }
                t_max[k] = boundary_t(k, idx[k]);
            }
        }
        if left {
            break;
        }
    }
    Ok(segments)
}

/// Influence column of one beamlet: `(voxel, Gy per unit fluence)` sorted by voxel.
///
/// Radiological depth is the density-weighted path length along the beamlet's
/// central axis up to the voxel's projection onto that axis. Values below
/// `1e-8` are dropped.
pub fn trace_beamlet(
    grid: &VoxelGrid,
    beam: &Beam,
    beamlet: usize,
    config: &DoseConfig,
) -> Result<Vec<(u32, f64)>, DoseCalcError> {
    let origin = beam.beamlet_origin(beamlet)?;
    let dir = beam.direction();
    let segments = traverse_ray(grid.dims, grid.spacing, origin, dir)?;

    // Cumulative radiological depth at each segment entry.
    let mut depth_at = Vec::with_capacity(segments.len() + 1);
    let mut acc = 0.0;
    for s in &segments {
        depth_at.push(acc);
        acc += grid.density[s.voxel] as f64 * s.length();
    }
    let total_depth = acc;
    let depth = |t: f64| -> f64 {
        match segments.first() {
            None => 0.0,
            Some(first) if t <= first.t_enter => 0.0,
            _ => {
                let k = segments.partition_point(|s| s.t_exit <= t);
                if k >= segments.len() {
                    total_depth
                } else {
                    let s = &segments[k];
                    depth_at[k] + grid.density[s.voxel] as f64 * (t - s.t_enter).max(0.0)
                }
            }
        }
    };

    let sigma = config.sigma();
    let cutoff2 = (config.cutoff_sigmas * sigma).powi(2);
    let mut column = Vec::new();
    for v in 0..grid.len() {
        let p = grid.position(v);
        let rel = [p[0] - origin[0], p[1] - origin[1], p[2] - origin[2]];
        let t = rel[0] * dir[0] + rel[1] * dir[1] + rel[2] * dir[2];
        let perp = [rel[0] - t * dir[0], rel[1] - t * dir[1], rel[2] - t * dir[2]];
        let r2 = perp[0] * perp[0] + perp[1] * perp[1] + perp[2] * perp[2];
        if r2 > cutoff2 || t < 0.0 {
            continue;
        }
        let value =
            config.f0 * (-config.mu_per_mm * depth(t)).exp() * (-r2 / (2.0 * sigma * sigma)).exp();
        if value >= 1e-8 {
            column.push((v as u32, value));
        }
    }
    Ok(column)
}
