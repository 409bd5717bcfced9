use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Set of masked cells on a patch grid, stored as one flag per cell in
/// row-major grid order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    grid: [usize; 3],
    cells: Vec<bool>,
}

impl Mask {
    pub fn empty(grid: [usize; 3]) -> Self {
        Self {
            grid,
            cells: vec![false; grid.iter().product()],
        }
    }

    pub fn from_indices(grid: [usize; 3], indices: &[usize]) -> Result<Self> {
        let mut m = Self::empty(grid);
        for &i in indices {
            *m.cells
                .get_mut(i)
                .ok_or_else(|| Error::Contract(format!("mask cell {i} outside grid {grid:?}")))? = true;
        }
        Ok(m)
    }

    pub fn grid(&self) -> [usize; 3] {
        self.grid
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        self.cells
            .iter()
            .enumerate()
            .filter_map(|(i, &c)| c.then_some(i))
            .collect()
    }

    /// 0/1 map of shape `[channels, ..ext]` marking voxels of masked cells.
    pub fn voxel_mask(&self, patch: usize, channels: usize, ext: [usize; 3]) -> Result<Tensor> {
        if (0..3).any(|a| ext[a] != self.grid[a] * patch) {
            return Err(Error::dim("voxel_mask", &ext, &self.grid.map(|g| g * patch)));
        }
        let g = self.grid;
        let n: usize = ext.iter().product();
        Ok(Tensor::from_fn(&[channels, ext[0], ext[1], ext[2]], |i| {
            let v = i % n;
            let (z, y, x) = (v / (ext[1] * ext[2]), (v / ext[2]) % ext[1], v % ext[2]);
            let cell = ((z / patch) * g[1] + y / patch) * g[2] + x / patch;
            self.cells[cell] as u8 as f64
        }))
    }
}

/// Masks `round(ratio · n_cells)` cells drawn uniformly without replacement.
pub fn make_mask<R: Rng + ?Sized>(grid: [usize; 3], ratio: f64, rng: &mut R) -> Mask {
    let n: usize = grid.iter().product();
    let k = ((ratio.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let chosen = rand::seq::index::sample(rng, n, k);
    let mut m = Mask::empty(grid);
    for i in chosen.iter() {
        m.cells[i] = true;
    }
    m
}
