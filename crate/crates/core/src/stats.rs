//! Order statistics shared by planning and evaluation.

/// Linear-interpolation quantile of ascending `sorted` values with plotting
/// positions `k / (n - 1)`. `p` is clamped to `[0, 1]`.
///
/// Panics on an empty slice; callers check structure masks first.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Values of `dose` at `voxels`, sorted ascending.
pub fn sorted_values(dose: &[f64], voxels: &[usize]) -> Vec<f64> {
    let mut v: Vec<f64> = voxels.iter().map(|&i| dose[i]).collect();
    v.sort_by(f64::total_cmp);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_point_interpolation() {
        assert!((quantile_sorted(&[0.0, 100.0], 0.01) - 1.0).abs() < 1e-12);
        assert_eq!(quantile_sorted(&[5.0], 0.3), 5.0);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0], 0.5), 2.0);
        assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0], 1.0), 3.0);
    }

    proptest! {
        #[test]
        fn quantiles_are_monotone(mut v in prop::collection::vec(0.0f64..80.0, 1..40), p in 0.0f64..1.0, q in 0.0f64..1.0) {
            v.sort_by(f64::total_cmp);
            let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
            prop_assert!(quantile_sorted(&v, lo) <= quantile_sorted(&v, hi));
            prop_assert!(quantile_sorted(&v, lo) >= v[0] && quantile_sorted(&v, hi) <= v[v.len() - 1]);
        }
    }
}
