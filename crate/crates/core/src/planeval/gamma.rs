use super::PlanEvalError;
use crate::dosecalc::DoseDistribution;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Dose-difference normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaNormalization {
    /// `dose_tol * max(reference)`.
    Global,
    /// `dose_tol * reference(v)` at the evaluated voxel.
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GammaMethod {
    /// Full gamma index.
    Gamma,
    /// Pass if some reference voxel within `dist_tol_mm` has a dose within the
    /// dose tolerance. The stored value is the smallest normalized dose
    /// difference over that neighborhood.
    Neighborhood,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaOptions {
    pub dose_tol: f64,
    pub dist_tol_mm: f64,
    pub normalization: GammaNormalization,
    pub method: GammaMethod,
    /// Voxels whose reference dose is not above this fraction of the
    /// reference maximum are not evaluated.
    pub low_dose_cutoff: f64,
}

impl Default for GammaOptions {
    fn default() -> Self {
        Self {
            dose_tol: 0.03,
            dist_tol_mm: 3.0,
            normalization: GammaNormalization::Global,
            method: GammaMethod::Gamma,
            low_dose_cutoff: 0.1,
        }
    }
}

impl GammaOptions {
    fn validate(&self) -> Result<(), PlanEvalError> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        if !ok(self.dose_tol) || !ok(self.dist_tol_mm) {
            return Err(PlanEvalError::InvalidGamma(format!(
                "tolerances must be positive, got {} and {} mm",
                self.dose_tol, self.dist_tol_mm
            )));
        }
        if !(0.0..1.0).contains(&self.low_dose_cutoff) {
            return Err(PlanEvalError::InvalidGamma(format!("low-dose cutoff {} not in [0, 1)", self.low_dose_cutoff)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaResult {
    /// `None` for voxels below the low-dose cutoff.
    pub values: Vec<Option<f64>>,
    pub passed: usize,
    pub evaluated: usize,
    /// `passed / evaluated`, or 1 when nothing was evaluated.
    pub rate: f64,
    pub options: GammaOptions,
}

impl GammaResult {
    pub fn passes(&self, voxel: usize) -> Option<bool> {
        self.values[voxel].map(|g| g <= 1.0)
    }

    /// Passing rate restricted to the evaluated voxels of `subset`.
    pub fn rate_over(&self, subset: &[usize]) -> f64 {
        let (mut n, mut p) = (0usize, 0usize);
        for &v in subset {
            if let Some(ok) = self.passes(v) {
                n += 1;
                p += ok as usize;
            }
        }
        if n == 0 {
            1.0
        } else {
            p as f64 / n as f64
        }
    }
}

/// Per-voxel gamma of `eval` against `reference`.
///
/// The search is limited to reference voxels within `2 * dist_tol_mm`: any
/// farther pair has a spatial term above 4, so its gamma exceeds 1 whatever
/// the dose, and the pass/fail decision is the same as an unrestricted search.
pub fn gamma_pass_rate(
    eval: &DoseDistribution,
    reference: &DoseDistribution,
    opts: &GammaOptions,
) -> Result<GammaResult, PlanEvalError> {
    opts.validate()?;
    if eval.dims != reference.dims {
        return Err(PlanEvalError::DimMismatch { expected: reference.dims, actual: eval.dims });
    }
    if eval.spacing != reference.spacing {
        return Err(PlanEvalError::SpacingMismatch(reference.spacing, eval.spacing));
    }
    let [nx, ny, nz] = reference.dims;
    let s = reference.spacing;
    let dta = opts.dist_tol_mm;
    let max_ref = reference.values.iter().copied().fold(0.0, f64::max);
    let cutoff = opts.low_dose_cutoff * max_ref;

    let radius = match opts.method {
        GammaMethod::Gamma => 2.0 * dta,
        GammaMethod::Neighborhood => dta,
    };
    let reach = |h: f64| (radius / h).floor() as i64;
    let (rx, ry, rz) = (reach(s[0]), reach(s[1]), reach(s[2]));
    // (dx, dy, dz, squared spatial term), nearest first.
    let mut offsets = Vec::new();
    for dz in -rz..=rz {
        for dy in -ry..=ry {
            for dx in -rx..=rx {
                let r2 = spatial_term(dx, dy, dz, s, dta);
                if r2 <= (radius / dta).powi(2) {
                    offsets.push((dx, dy, dz, r2));
                }
            }
        }
    }
    offsets.sort_by(|a, b| a.3.total_cmp(&b.3));

    let values: Vec<Option<f64>> = (0..reference.values.len())
        .into_par_iter()
        .map(|v| {
            let r_here = reference.values[v];
            if !(r_here > cutoff) {
                return None;
            }
            let delta = match opts.normalization {
                GammaNormalization::Global => opts.dose_tol * max_ref,
                GammaNormalization::Local => opts.dose_tol * r_here,
            };
            let e = eval.values[v];
            let x = (v % nx) as i64;
            let y = ((v / nx) % ny) as i64;
            let z = (v / (nx * ny)) as i64;
            let mut best = f64::INFINITY;
            for &(dx, dy, dz, r2) in &offsets {
                if opts.method == GammaMethod::Gamma && r2 >= best {
                    break;
                }
                let (px, py, pz) = (x + dx, y + dy, z + dz);
                if px < 0 || py < 0 || pz < 0 || px >= nx as i64 || py >= ny as i64 || pz >= nz as i64 {
                    continue;
                }
                let r = reference.values[px as usize + nx * (py as usize + ny * pz as usize)];
                let dd = (e - r) / delta;
                let cand = match opts.method {
                    GammaMethod::Gamma => r2 + dd * dd,
                    GammaMethod::Neighborhood => dd * dd,
                };
                if cand < best {
                    best = cand;
                }
            }
            Some(best.sqrt())
        })
        .collect();

    let evaluated = values.iter().filter(|g| g.is_some()).count();
    let passed = values.iter().filter(|g| matches!(g, Some(g) if *g <= 1.0)).count();
    let rate = if evaluated == 0 { 1.0 } else { passed as f64 / evaluated as f64 };
    Ok(GammaResult { values, passed, evaluated, rate, options: *opts })
}

/// `|offset|^2 / dta^2` with the offset measured in millimetres.
pub(crate) fn spatial_term(dx: i64, dy: i64, dz: i64, s: [f64; 3], dta: f64) -> f64 {
    let (ax, ay, az) = (dx as f64 * s[0], dy as f64 * s[1], dz as f64 * s[2]);
    (ax * ax + ay * ay + az * az) / (dta * dta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(dims: [usize; 3], spacing: [f64; 3], values: Vec<f64>) -> DoseDistribution {
        DoseDistribution { dims, spacing, values }
    }

    /// Every reference voxel against every evaluated voxel, no search radius.
    fn brute_force(eval: &DoseDistribution, reference: &DoseDistribution, opts: &GammaOptions) -> Vec<Option<f64>> {
        let [nx, ny, _] = reference.dims;
        let coords = |i: usize| [(i % nx) as i64, ((i / nx) % ny) as i64, (i / (nx * ny)) as i64];
        let max_ref = reference.values.iter().copied().fold(0.0, f64::max);
        let n = reference.values.len();
        (0..n)
            .map(|v| {
                if reference.values[v] <= opts.low_dose_cutoff * max_ref {
                    return None;
                }
                let delta = match opts.normalization {
                    GammaNormalization::Global => opts.dose_tol * max_ref,
                    GammaNormalization::Local => opts.dose_tol * reference.values[v],
                };
                let a = coords(v);
                let mut best = f64::INFINITY;
                for r in 0..n {
                    let b = coords(r);
                    let sp = spatial_term(b[0] - a[0], b[1] - a[1], b[2] - a[2], reference.spacing, opts.dist_tol_mm);
                    let dd = (eval.values[v] - reference.values[r]) / delta;
                    let cand = match opts.method {
                        GammaMethod::Gamma => sp + dd * dd,
                        GammaMethod::Neighborhood if sp <= 1.0 => dd * dd,
                        GammaMethod::Neighborhood => continue,
                    };
                    best = best.min(cand);
                }
                Some(best.sqrt())
            })
            .collect()
    }

    fn random_pair(rng: &mut ChaCha8Rng) -> (DoseDistribution, DoseDistribution) {
        let dims = [12, 12, 12];
        let spacing = [rng.random_range(1.0..4.0), rng.random_range(1.0..4.0), rng.random_range(1.0..4.0)];
        let reference: Vec<f64> = (0..1728).map(|_| rng.random_range(0.0..70.0)).collect();
        let eval: Vec<f64> = reference.iter().map(|r| (r + rng.random_range(-4.0..4.0)).max(0.0)).collect();
        (volume(dims, spacing, eval), volume(dims, spacing, reference))
    }

    #[test]
    fn matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..12 {
            let (e, r) = random_pair(&mut rng);
            for method in [GammaMethod::Gamma, GammaMethod::Neighborhood] {
                for normalization in [GammaNormalization::Global, GammaNormalization::Local] {
                    let opts = GammaOptions { method, normalization, ..Default::default() };
                    let got = gamma_pass_rate(&e, &r, &opts).unwrap();
                    let want = brute_force(&e, &r, &opts);
                    for (v, (g, w)) in got.values.iter().zip(&want).enumerate() {
                        assert_eq!(g.map(|g| g <= 1.0), w.map(|w| w <= 1.0), "case {case} voxel {v}");
                        if let (Some(g), Some(w)) = (g, w) {
                            if *w <= 2.0 {
                                assert_eq!(g, w, "case {case} voxel {v}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn identical_volumes_pass_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, r) = random_pair(&mut rng);
        let g = gamma_pass_rate(&r, &r, &GammaOptions::default()).unwrap();
        assert_eq!(g.rate, 1.0);
        assert!(g.values.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn uniform_offsets() {
        let dims = [20, 20, 20];
        let s = [2.0; 3];
        let r = volume(dims, s, vec![1.0; 8000]);
        let g = gamma_pass_rate(&volume(dims, s, vec![1.02; 8000]), &r, &GammaOptions::default()).unwrap();
        assert_eq!((g.rate, g.evaluated), (1.0, 8000));
        let g = gamma_pass_rate(&volume(dims, s, vec![1.10; 8000]), &r, &GammaOptions::default()).unwrap();
        assert_eq!(g.rate, 0.0);
        assert!(g.values.iter().flatten().all(|v| (v - 0.1 / 0.03).abs() < 1e-12));
    }

    #[test]
    fn roles_are_not_symmetrized() {
        // Reference: a single hot voxel surrounded by low dose; eval: flat.
        let dims = [7, 7, 7];
        let s = [3.0; 3];
        let mut hot = vec![5.0; 343];
        hot[171] = 100.0;
        let flat = vec![5.0; 343];
        let opts = GammaOptions::default();
        let a = gamma_pass_rate(&volume(dims, s, flat.clone()), &volume(dims, s, hot.clone()), &opts).unwrap();
        let b = gamma_pass_rate(&volume(dims, s, hot), &volume(dims, s, flat), &opts).unwrap();
        assert_ne!(a.rate, b.rate);
        assert_ne!(a.evaluated, b.evaluated);
    }

    #[test]
    fn low_dose_voxels_are_skipped_and_subsets_count_evaluated_only() {
        let dims = [4, 1, 1];
        let s = [5.0; 3];
        let r = volume(dims, s, vec![100.0, 5.0, 100.0, 100.0]);
        let e = volume(dims, s, vec![100.0, 5.0, 100.0, 150.0]);
        let g = gamma_pass_rate(&e, &r, &GammaOptions::default()).unwrap();
        assert_eq!(g.values[1], None);
        assert_eq!((g.evaluated, g.passed), (3, 2));
        assert_eq!(g.rate_over(&[0, 1]), 1.0);
        assert_eq!(g.rate_over(&[1]), 1.0);
        assert_eq!(g.rate_over(&[2, 3]), 0.5);
        let zero = volume(dims, s, vec![0.0; 4]);
        assert_eq!(gamma_pass_rate(&zero, &zero, &GammaOptions::default()).unwrap().rate, 1.0);
    }

    #[test]
    fn mismatched_grids_are_rejected() {
        let a = volume([2, 2, 2], [1.0; 3], vec![1.0; 8]);
        let b = volume([2, 2, 2], [2.0, 1.0, 1.0], vec![1.0; 8]);
        let c = volume([2, 2, 1], [1.0; 3], vec![1.0; 4]);
        assert!(matches!(gamma_pass_rate(&a, &b, &GammaOptions::default()), Err(PlanEvalError::SpacingMismatch(..))));
        assert!(matches!(gamma_pass_rate(&a, &c, &GammaOptions::default()), Err(PlanEvalError::DimMismatch { .. })));
    }
}
