use super::{PhantomError, StructureId, VoxelGrid};

/// Euclidean distance (mm) from every voxel centre to the nearest voxel centre
/// of structure `s`; zero inside the structure.
///
/// Exact separable transform (lower envelope of parabolas, one pass per axis)
/// with each axis weighted by its physical spacing.
pub fn distance_to_surface(grid: &VoxelGrid, s: StructureId) -> Result<Vec<f64>, PhantomError> {
    let seeds: Vec<bool> = grid.labels.iter().map(|&l| l == s).collect();
    if !seeds.iter().any(|&b| b) {
        return Err(PhantomError::EmptyStructure(s));
    }
    Ok(squared_edt(grid.dims, grid.spacing, &seeds)
        .into_iter()
        .map(f64::sqrt)
        .collect())
}

/// Squared anisotropic EDT of a binary seed mask (x-fastest layout).
pub(crate) fn squared_edt(dims: [usize; 3], spacing: [f64; 3], seeds: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut f: Vec<f64> = seeds.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, nx, nx * ny];
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut env = Envelope::with_capacity(longest);

    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        // Enumerate the start index of every line along `axis`.
        let starts: Vec<usize> = (0..f.len())
            .filter(|&i| {
                let c = [i % nx, (i / nx) % ny, i / (nx * ny)];
                c[axis] == 0
            })
            .collect();
        for start in starts {
            for k in 0..n {
                line[k] = f[start + k * stride];
            }
            env.transform(&line[..n], spacing[axis], &mut out[..n]);
            for k in 0..n {
                f[start + k * stride] = out[k];
            }
        }
    }
    f
}

struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn with_capacity(n: usize) -> Self {
        Self { v: Vec::with_capacity(n), z: Vec::with_capacity(n + 1) }
    }

    /// `out[p] = min_q f[q] + (h * (p - q))^2`.
    fn transform(&mut self, f: &[f64], h: f64, out: &mut [f64]) {
        let n = f.len();
        self.v.clear();
        self.z.clear();
        let h2 = h * h;
        let key = |q: usize| f[q] + h2 * (q * q) as f64;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                match self.v.last() {
                    None => {
                        self.v.push(q);
                        self.z.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&p) => {
                        // Abscissa where the parabolas rooted at p and q meet.
                        let s = (key(q) - key(p)) / (2.0 * h2 * (q - p) as f64);
                        if s <= *self.z.last().expect("z tracks v") {
                            self.v.pop();
                            self.z.pop();
                        } else {
                            self.v.push(q);
                            self.z.push(s);
                            break;
                        }
                    }
                }
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (p, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < p as f64 {
                k += 1;
            }
            let q = self.v[k];
            let d = h * (p as f64 - q as f64);
            *o = d * d + f[q];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn brute(grid: &VoxelGrid, s: StructureId) -> Vec<f64> {
        let members = grid.mask(s);
        (0..grid.len())
            .map(|i| {
                let a = grid.coords(i);
                members
                    .iter()
                    .map(|&j| {
                        let b = grid.coords(j);
                        let mut d2 = 0.0;
                        for k in 0..3 {
                            let d = (a[k] as f64 - b[k] as f64) * grid.spacing[k];
                            d2 += d * d;
                        }
                        d2
                    })
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .collect()
    }

    #[test]
    fn inside_is_zero_and_lateral_step_is_spacing() {
        let mut g = VoxelGrid::new([9, 9, 9], [4.0, 4.0, 2.0]);
        for z in 3..6 {
            for y in 3..6 {
                for x in 3..6 {
                    let i = g.index(x, y, z);
                    g.labels[i] = StructureId::Larynx;
                }
            }
        }
        let d = distance_to_surface(&g, StructureId::Larynx).unwrap();
        assert_eq!(d[g.index(4, 4, 4)], 0.0);
        assert_eq!(d[g.index(6, 4, 4)], 4.0);
        // An axial neighbour (2 mm) is closer than a lateral one (4 mm).
        assert_eq!(d[g.index(4, 4, 6)], 2.0);
        assert!(d[g.index(4, 4, 6)] < d[g.index(4, 6, 4)]);
        assert_eq!(d, brute(&g, StructureId::Larynx));
    }

    #[test]
    fn matches_brute_force_on_phantoms() {
        let spec = PhantomSpec { dims: [16, 16, 8], ..PhantomSpec::default() };
        for seed in 0..3 {
            let p = generate_phantom(seed, &spec).unwrap();
            for s in [StructureId::Larynx, StructureId::Ptv70, StructureId::Esophagus] {
                let fast = distance_to_surface(&p.grid, s).unwrap();
                assert_eq!(fast, brute(&p.grid, s), "seed {seed} {s}");
            }
        }
    }

    #[test]
    fn empty_structure_is_named() {
        let g = VoxelGrid::new([4, 4, 4], [1.0, 1.0, 1.0]);
        assert_eq!(
            distance_to_surface(&g, StructureId::Mandible),
            Err(PhantomError::EmptyStructure(StructureId::Mandible))
        );
    }
}
