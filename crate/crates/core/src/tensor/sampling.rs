//! Trilinear sampling and resizing on `[C, D, H, W]` maps.
//!
//! Coordinates are continuous voxel indices: voxel `i` has its centre at
//! `i`, so valid sample positions on an axis of extent `e` lie in `[0, e-1]`.

use std::sync::Arc;

use super::{Stencil, Var};
use crate::error::{Error, Result};

pub fn spatial_ext(shape: &[usize]) -> Result<[usize; 3]> {
    if shape.len() != 4 {
        return Err(Error::Contract(format!("expected a [C, D, H, W] map, got {shape:?}")));
    }
    Ok([shape[1], shape[2], shape[3]])
}

pub fn trilinear_stencil(ext: [usize; 3], coords: &[[f64; 3]]) -> Result<Stencil> {
    let mut st = Stencil::new(ext.iter().product());
    for c in coords {
        for a in 0..3 {
            let limit = (ext[a] - 1) as f64;
            if !(0.0..=limit).contains(&c[a]) {
                return Err(Error::Range {
                    op: "trilinear_sample",
                    axis: a,
                    value: c[a],
                    limit,
                });
            }
        }
        st.push_trilinear(ext, *c, 1.0);
        st.finish_row();
    }
    Ok(st)
}

/// Source coordinate of output voxel `dst` when resampling `n_in` voxels to
/// `n_out` with aligned voxel centres, clamped to the valid range.
pub fn resize_coord(dst: usize, n_in: usize, n_out: usize) -> f64 {
    let s = (dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    s.clamp(0.0, (n_in - 1) as f64)
}

pub fn resize_stencil(in_ext: [usize; 3], out_ext: [usize; 3]) -> Stencil {
    let mut st = Stencil::new(in_ext.iter().product());
    for z in 0..out_ext[0] {
        let cz = resize_coord(z, in_ext[0], out_ext[0]);
        for y in 0..out_ext[1] {
            let cy = resize_coord(y, in_ext[1], out_ext[1]);
            for x in 0..out_ext[2] {
                let cx = resize_coord(x, in_ext[2], out_ext[2]);
                st.push_trilinear(in_ext, [cz, cy, cx], 1.0);
                st.finish_row();
            }
        }
    }
    st
}

impl<'t> Var<'t> {
    /// Samples a `[C, D, H, W]` map at continuous points, giving `[C, n]`.
    pub fn trilinear_sample(self, coords: &[[f64; 3]]) -> Result<Var<'t>> {
        let ext = spatial_ext(&self.shape())?;
        let st = trilinear_stencil(ext, coords)?;
        self.spatial(Arc::new(st), &[coords.len()])
    }

    /// Trilinear resize of a `[C, D, H, W]` map to `out_ext`.
    pub fn resize_trilinear(self, out_ext: [usize; 3]) -> Result<Var<'t>> {
        let ext = spatial_ext(&self.shape())?;
        if out_ext.contains(&0) {
            return Err(Error::Contract(format!("resize to empty extent {out_ext:?}")));
        }
        if ext == out_ext {
            return Ok(self);
        }
        self.spatial(Arc::new(resize_stencil(ext, out_ext)), &out_ext)
    }
}
