use super::{Phantom, PhantomError, StructureId};
use serde::{Deserialize, Serialize};

/// Density mapped to full white; denser tissue saturates.
const GRAY_FULL_SCALE: f32 = 2.0;

/// Colour-contoured axial slice, channel-major (`[c][y][x]`), values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContouredSlice {
    pub width: usize,
    pub height: usize,
    pub plane: usize,
    pub data: Vec<f32>,
}

impl ContouredSlice {
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }
}

/// Nearest-neighbour map from pixel index to voxel index along one axis.
#[inline]
pub fn pixel_to_voxel(p: usize, pixels: usize, voxels: usize) -> usize {
    (((p as f64 + 0.5) * voxels as f64 / pixels as f64) as usize).min(voxels - 1)
}

/// Render plane `z` as a `size x size` colour image.
///
/// Classified voxels get their fixed palette colour; unclassified voxels are
/// gray with intensity `density / 2` (clamped). The voxel plane is resampled
/// to the output size by nearest neighbour.
pub fn render_contoured_slice(
    phantom: &Phantom,
    z: usize,
    size: usize,
) -> Result<ContouredSlice, PhantomError> {
    let grid = &phantom.grid;
    let [nx, ny, nz] = grid.dims;
    if z >= nz {
        return Err(PhantomError::PlaneOutOfRange { z, nz });
    }
    if size < 8 || !size.is_power_of_two() {
        return Err(PhantomError::InvalidSliceSize(size));
    }
    let n = size * size;
    let mut data = vec![0.0f32; 3 * n];
    for py in 0..size {
        let y = pixel_to_voxel(py, size, ny);
        for px in 0..size {
            let x = pixel_to_voxel(px, size, nx);
            let v = grid.index(x, y, z);
            let rgb = match grid.labels[v] {
                StructureId::Unclassified => {
                    let g = (grid.density[v] / GRAY_FULL_SCALE).clamp(0.0, 1.0);
                    [g, g, g]
                }
                s => s.color(),
            };
            let i = py * size + px;
            data[i] = rgb[0];
            data[n + i] = rgb[1];
            data[2 * n + i] = rgb[2];
        }
    }
    Ok(ContouredSlice { width: size, height: size, plane: z, data })
}
