use crate::{PredictorError, Result};
use kbp_core::phantom::{pixel_to_voxel, render_contoured_slice, Phantom};
use kbp_core::DoseDistribution;
use kbp_tensornet::Tensor;

/// Dose mapped to +1 by [`normalize`].
pub const D_MAX: f64 = 80.0;

pub fn normalize(gy: f64) -> f64 {
    2.0 * gy / D_MAX - 1.0
}

pub fn denormalize(v: f64) -> f64 {
    (v + 1.0) * D_MAX / 2.0
}

/// One axial plane: a contoured image and its normalized dose, both `S x S`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlicePair {
    pub patient: u64,
    pub plane: usize,
    pub size: usize,
    /// `[3][S][S]`.
    pub image: Vec<f32>,
    /// `[S][S]`, in `[-1, 1]` for doses within `[0, D_MAX]`.
    pub dose: Vec<f32>,
}

/// One pair per axial plane, dose resampled by nearest neighbour like the
/// image.
pub fn extract_slices(phantom: &Phantom, dose: &DoseDistribution, size: usize) -> Result<Vec<SlicePair>> {
    if dose.dims != phantom.dims() {
        return Err(PredictorError::DimMismatch { expected: phantom.dims(), actual: dose.dims });
    }
    let [nx, ny, nz] = phantom.dims();
    (0..nz)
        .map(|z| {
            let img = render_contoured_slice(phantom, z, size)?;
            let mut d = Vec::with_capacity(size * size);
            for py in 0..size {
                let y = pixel_to_voxel(py, size, ny);
                for px in 0..size {
                    let x = pixel_to_voxel(px, size, nx);
                    d.push(normalize(dose.values[phantom.grid.index(x, y, z)]) as f32);
                }
            }
            Ok(SlicePair { patient: phantom.seed, plane: z, size, image: img.data, dose: d })
        })
        .collect()
}

/// Images `[N, 3, S, S]` and doses `[N, 1, S, S]` for the selected pairs.
pub fn stack_batch(pairs: &[SlicePair], idx: &[usize]) -> Result<(Tensor, Tensor)> {
    let size = pairs[idx[0]].size;
    let mut img = Vec::with_capacity(idx.len() * 3 * size * size);
    let mut dose = Vec::with_capacity(idx.len() * size * size);
    for &i in idx {
        let p = &pairs[i];
        if p.size != size {
            return Err(PredictorError::InvalidConfig(format!("mixed slice sizes {size} and {}", p.size)));
        }
        img.extend_from_slice(&p.image);
        dose.extend_from_slice(&p.dose);
    }
    Ok((Tensor::new(&[idx.len(), 3, size, size], img)?, Tensor::new(&[idx.len(), 1, size, size], dose)?))
}

/// Average an `S x S` normalized plane onto the `nx x ny` voxel plane and
/// convert to Gy, clamped to `[0, D_MAX]`.
pub(crate) fn pool_plane(pixels: &[f32], size: usize, nx: usize, ny: usize) -> Vec<f64> {
    let mut sum = vec![0.0f64; nx * ny];
    let mut count = vec![0usize; nx * ny];
    for py in 0..size {
        let y = pixel_to_voxel(py, size, ny);
        for px in 0..size {
            let v = y * nx + pixel_to_voxel(px, size, nx);
            sum[v] += pixels[py * size + px] as f64;
            count[v] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| if c == 0 { 0.0 } else { denormalize(s / c as f64).clamp(0.0, D_MAX) })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use kbp_core::phantom::{generate_phantom, PhantomSpec};

    #[test]
    fn normalization_round_trip() {
        for gy in [0.0, 12.5, 40.0, 70.0, 80.0] {
            assert!((denormalize(normalize(gy)) - gy).abs() < 1e-6);
        }
        assert_eq!((normalize(0.0), normalize(80.0)), (-1.0, 1.0));
    }

    #[test]
    fn one_pair_per_plane_and_pooling_inverts_resampling() {
        let p = generate_phantom(1, &PhantomSpec::default()).unwrap();
        let n = p.grid.len();
        let dose = DoseDistribution { dims: p.dims(), spacing: p.spacing(), values: (0..n).map(|i| (i % 71) as f64).collect() };
        let pairs = extract_slices(&p, &dose, 64).unwrap();
        assert_eq!(pairs.len(), 8);
        let [nx, ny, _] = p.dims();
        for pair in &pairs {
            let back = pool_plane(&pair.dose, 64, nx, ny);
            let plane = &dose.values[pair.plane * nx * ny..(pair.plane + 1) * nx * ny];
            assert!(back.iter().zip(plane).all(|(a, b)| (a - b).abs() < 1e-4));
        }
        let wrong = DoseDistribution::zeros([4, 4, 4], [1.0; 3]);
        assert!(extract_slices(&p, &wrong, 64).is_err());
    }
}
