use super::{trace_beamlet, Beam, DoseCalcError, DoseConfig};
use crate::phantom::VoxelGrid;
use crate::volume::{read_array, read_u32, FormatError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};

pub const INFLUENCE_MAGIC: &[u8; 4] = b"KBPI";
const INFLUENCE_VERSION: u32 = 1;

/// Sparse voxel-by-beamlet matrix stored column-compressed.
///
/// Values are held as `f64` but are rounded to `f32` precision when the
/// matrix is built, so writing and re-reading a file reproduces it exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceMatrix {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub beams: Vec<Beam>,
    col_ptr: Vec<usize>,
    row_idx: Vec<u32>,
    values: Vec<f64>,
}

impl InfluenceMatrix {
    /// Assemble from per-beamlet columns; each column must be sorted by voxel.
    pub fn from_columns(
        dims: [usize; 3],
        spacing: [f64; 3],
        beams: Vec<Beam>,
        columns: Vec<Vec<(u32, f64)>>,
    ) -> Self {
        let nnz = columns.iter().map(Vec::len).sum();
        let mut col_ptr = Vec::with_capacity(columns.len() + 1);
        let mut row_idx = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        col_ptr.push(0);
        for col in columns {
            for (r, v) in col {
                row_idx.push(r);
                values.push(v as f32 as f64);
            }
            col_ptr.push(row_idx.len());
        }
        Self { dims, spacing, beams, col_ptr, row_idx, values }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn num_beamlets(&self) -> usize {
        self.col_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(voxel, value)` pairs of beamlet `b`, sorted by voxel.
    pub fn column(&self, b: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.col_ptr[b]..self.col_ptr[b + 1];
        self.row_idx[r.clone()].iter().map(|&i| i as usize).zip(self.values[r].iter().copied())
    }

    pub fn column_len(&self, b: usize) -> usize {
        self.col_ptr[b + 1] - self.col_ptr[b]
    }

    /// Sum of each voxel's row.
    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.num_voxels()];
        for (&r, &v) in self.row_idx.iter().zip(&self.values) {
            s[r as usize] += v;
        }
        s
    }

    /// Rows restricted to `voxels`, each row as `(beamlet, value)` pairs.
    pub fn rows(&self, voxels: &[usize]) -> Vec<Vec<(usize, f64)>> {
        let mut slot = vec![usize::MAX; self.num_voxels()];
        for (k, &v) in voxels.iter().enumerate() {
            slot[v] = k;
        }
        let mut out = vec![Vec::new(); voxels.len()];
        for b in 0..self.num_beamlets() {
            for (v, a) in self.column(b) {
                let k = slot[v];
                if k != usize::MAX {
                    out[k].push((b, a));
                }
            }
        }
        out
    }

    /// `A^T g` for a dense voxel vector `g`.
    pub fn transpose_mul(&self, g: &[f64]) -> Vec<f64> {
        (0..self.num_beamlets())
            .map(|b| self.column(b).map(|(v, a)| a * g[v]).sum())
            .collect()
    }

    /// `A w` without fluence validation.
    pub fn mul(&self, w: &[f64]) -> Vec<f64> {
        let mut d = vec![0.0; self.num_voxels()];
        for (b, &wb) in w.iter().enumerate() {
            if wb != 0.0 {
                for (v, a) in self.column(b) {
                    d[v] += a * wb;
                }
            }
        }
        d
    }
}

/// Per-voxel dose in Gy on the phantom grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseDistribution {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
}

impl DoseDistribution {
    pub fn zeros(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Self { dims, spacing, values: vec![0.0; dims.iter().product()] }
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self { dims: self.dims, spacing: self.spacing, values: self.values.iter().map(|v| v * factor).collect() }
    }
}

/// Trace every beamlet of every beam. Columns are ordered beam by beam, then
/// by beamlet index, regardless of how many threads do the work.
pub fn influence_matrix(
    grid: &VoxelGrid,
    beams: &[Beam],
    config: &DoseConfig,
) -> Result<InfluenceMatrix, DoseCalcError> {
    if beams.is_empty() {
        return Err(DoseCalcError::NoBeams);
    }
    config.validate()?;
    let jobs: Vec<(usize, usize)> = beams
        .iter()
        .enumerate()
        .flat_map(|(k, b)| (0..b.beamlet_count()).map(move |j| (k, j)))
        .collect();
    let columns = jobs
        .par_iter()
        .map(|&(k, j)| trace_beamlet(grid, &beams[k], j, config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(InfluenceMatrix::from_columns(grid.dims, grid.spacing, beams.to_vec(), columns))
}

/// `d = A w`. Fluence must be finite and nonnegative.
pub fn compute_dose(a: &InfluenceMatrix, w: &[f64]) -> Result<DoseDistribution, DoseCalcError> {
    if w.len() != a.num_beamlets() {
        return Err(DoseCalcError::FluenceLength { expected: a.num_beamlets(), actual: w.len() });
    }
    if let Some((index, &value)) = w.iter().enumerate().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
        return Err(DoseCalcError::InvalidFluence { index, value });
    }
    Ok(DoseDistribution { dims: a.dims, spacing: a.spacing, values: a.mul(w) })
}

/// Layout (little-endian): magic `KBPI`, u32 version, u32 dims x3, f64 spacing
/// x3, u32 beam count, per beam (f64 angle, f64 source distance, u32 rows,
/// u32 cols, f64 width, f64 isocenter x3), then per column a u32 count
/// followed by `(u32 voxel, f32 value)` pairs.
pub fn write_influence<W: Write>(mut w: W, a: &InfluenceMatrix) -> Result<(), FormatError> {
    let mut buf = Vec::with_capacity(64 + a.nnz() * 8);
    buf.extend_from_slice(INFLUENCE_MAGIC);
    buf.extend_from_slice(&INFLUENCE_VERSION.to_le_bytes());
    for d in a.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in a.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.extend_from_slice(&(a.beams.len() as u32).to_le_bytes());
    for b in &a.beams {
        buf.extend_from_slice(&b.angle_deg.to_le_bytes());
        buf.extend_from_slice(&b.source_distance_mm.to_le_bytes());
        buf.extend_from_slice(&(b.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(b.cols as u32).to_le_bytes());
        buf.extend_from_slice(&b.beamlet_width_mm.to_le_bytes());
        for c in b.isocenter_mm {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    for b in 0..a.num_beamlets() {
        buf.extend_from_slice(&(a.column_len(b) as u32).to_le_bytes());
        for (v, x) in a.column(b) {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_influence<R: Read>(mut r: R) -> Result<InfluenceMatrix, FormatError> {
    let magic = read_array::<4, _>(&mut r)?;
    if &magic != INFLUENCE_MAGIC {
        return Err(FormatError::BadMagic { expected: *INFLUENCE_MAGIC, found: magic });
    }
    let version = read_u32(&mut r)?;
    if version != INFLUENCE_VERSION {
        return Err(FormatError::Version(version));
    }
    let f64_ = |r: &mut R| -> Result<f64, FormatError> { Ok(f64::from_le_bytes(read_array(r)?)) };
    let dims = [read_u32(&mut r)? as usize, read_u32(&mut r)? as usize, read_u32(&mut r)? as usize];
    let spacing = [f64_(&mut r)?, f64_(&mut r)?, f64_(&mut r)?];
    let n_voxels = dims.iter().product::<usize>();
    let n_beams = read_u32(&mut r)? as usize;
    let mut beams = Vec::with_capacity(n_beams.min(1024));
    for _ in 0..n_beams {
        let angle_deg = f64_(&mut r)?;
        let source_distance_mm = f64_(&mut r)?;
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        let beamlet_width_mm = f64_(&mut r)?;
        let isocenter_mm = [f64_(&mut r)?, f64_(&mut r)?, f64_(&mut r)?];
        beams.push(Beam { angle_deg, source_distance_mm, rows, cols, beamlet_width_mm, isocenter_mm });
    }
    let n_cols: usize = beams.iter().map(Beam::beamlet_count).sum();
    let mut columns = Vec::with_capacity(n_cols);
    for b in 0..n_cols {
        let count = read_u32(&mut r)? as usize;
        if count > n_voxels {
            return Err(FormatError::Malformed(format!("column {b} has {count} entries")));
        }
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let mut col = Vec::with_capacity(count);
        for c in bytes.chunks_exact(8) {
            let v = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let x = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            if v as usize >= n_voxels || !(x.is_finite() && x >= 0.0) {
                return Err(FormatError::Malformed(format!("bad entry ({v}, {x}) in column {b}")));
            }
            col.push((v, x as f64));
        }
        columns.push(col);
    }
    Ok(InfluenceMatrix::from_columns(dims, spacing, beams, columns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dosecalc::make_beams;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> (crate::phantom::Phantom, InfluenceMatrix) {
        let p = generate_phantom(3, &PhantomSpec { dims: [16, 16, 4], ..PhantomSpec::default() }).unwrap();
        let cfg = DoseConfig::default();
        let beams = make_beams(&cfg, &p).unwrap();
        let a = influence_matrix(&p.grid, &beams, &cfg).unwrap();
        (p, a)
    }

    #[test]
    fn unit_fluence_reproduces_column() {
        let (_, a) = small();
        assert_eq!(a.nnz(), (0..a.num_beamlets()).map(|b| a.column_len(b)).sum::<usize>());
        let b = a.num_beamlets() / 2;
        let mut w = vec![0.0; a.num_beamlets()];
        w[b] = 1.0;
        let d = compute_dose(&a, &w).unwrap();
        let mut expected = vec![0.0; a.num_voxels()];
        for (v, x) in a.column(b) {
            expected[v] = x;
        }
        assert_eq!(d.values, expected);
        assert!(compute_dose(&a, &vec![0.0; a.num_beamlets()]).unwrap().values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dose_is_linear() {
        let (_, a) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w1: Vec<f64> = (0..a.num_beamlets()).map(|_| rng.random_range(0.0..2.0)).collect();
        let w2: Vec<f64> = (0..a.num_beamlets()).map(|_| rng.random_range(0.0..2.0)).collect();
        let sum: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| x + y).collect();
        let d1 = compute_dose(&a, &w1).unwrap();
        let d2 = compute_dose(&a, &w2).unwrap();
        let d12 = compute_dose(&a, &sum).unwrap();
        for i in 0..d12.values.len() {
            let e = d1.values[i] + d2.values[i];
            assert!((d12.values[i] - e).abs() <= 1e-6 * e.abs().max(1e-12));
        }
    }

    #[test]
    fn denser_tissue_attenuates_more() {
        let (p, a1) = small();
        let mut g2 = p.grid.clone();
        for d in &mut g2.density {
            *d *= 2.0;
        }
        let a2 = influence_matrix(&g2, &a1.beams, &DoseConfig::default()).unwrap();
        for b in 0..a1.num_beamlets() {
            let c2: std::collections::HashMap<usize, f64> = a2.column(b).collect();
            for (v, x1) in a1.column(b) {
                let x2 = c2.get(&v).copied().unwrap_or(0.0);
                assert!(x2 <= x1, "beamlet {b} voxel {v}");
            }
        }
    }

    #[test]
    fn rejects_bad_fluence() {
        let (_, a) = small();
        let mut w = vec![0.0; a.num_beamlets()];
        w[2] = -1.0;
        assert_eq!(compute_dose(&a, &w), Err(DoseCalcError::InvalidFluence { index: 2, value: -1.0 }));
        assert!(matches!(compute_dose(&a, &[1.0]), Err(DoseCalcError::FluenceLength { .. })));
        let g = VoxelGrid::new([4, 4, 4], [1.0; 3]);
        assert_eq!(influence_matrix(&g, &[], &DoseConfig::default()), Err(DoseCalcError::NoBeams));
    }

    #[test]
    fn file_round_trip_is_exact() {
        let (_, a) = small();
        let mut buf = Vec::new();
        write_influence(&mut buf, &a).unwrap();
        assert_eq!(&buf[..4], b"KBPI");
        assert_eq!(read_influence(&buf[..]).unwrap(), a);
    }

    #[test]
    fn row_sums_match_dense() {
        let (_, a) = small();
        let mut dense = vec![vec![0.0; a.num_beamlets()]; a.num_voxels()];
        for b in 0..a.num_beamlets() {
            for (v, x) in a.column(b) {
                dense[v][b] = x;
            }
        }
        let sums = a.row_sums();
        for v in 0..a.num_voxels() {
            let s: f64 = dense[v].iter().sum();
            assert!((sums[v] - s).abs() <= 1e-12 * s.max(1.0));
        }
    }
}
