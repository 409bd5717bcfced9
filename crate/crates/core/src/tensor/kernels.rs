//! Raw numeric kernels over contiguous slices. Every kernel has a fixed
//! reduction order; parallel variants split work over independent outputs
//! only, so results are bitwise reproducible regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// C[m×n] = A[m×k] · B[k×n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// dA[m×k] = dC[m×n] · Bᵀ
pub(crate) fn matmul_grad_a(dc: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut da = vec![0.0; m * k];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] = drow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    da
}

/// dB[k×n] = Aᵀ · dC[m×n]
pub(crate) fn matmul_grad_b(a: &[f64], dc: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut db = vec![0.0; k * n];
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out = &mut db[p * n..(p + 1) * n];
            for (o, &d) in out.iter_mut().zip(drow) {
                *o += av * d;
            }
        }
    }
    db
}

/// Geometry of a cubic-kernel 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_ext: [usize; 3],
    pub out_ext: [usize; 3],
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3dGeom {
    pub fn new(input_shape: &[usize], weight_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if input_shape.len() != 4 || weight_shape.len() != 5 {
            return Err(Error::dim("conv3d", input_shape, weight_shape));
        }
        let k = weight_shape[2];
        if weight_shape[3] != k || weight_shape[4] != k || k.is_multiple_of(2) {
            return Err(Error::Contract(format!(
                "conv3d needs an odd cubic kernel, got {:?}",
                &weight_shape[2..]
            )));
        }
        if weight_shape[1] != input_shape[0] {
            return Err(Error::dim("conv3d", input_shape, weight_shape));
        }
        if stride == 0 {
            return Err(Error::Contract("conv3d stride must be positive".into()));
        }
        let mut out_ext = [0; 3];
        for a in 0..3 {
            let padded = input_shape[a + 1] + 2 * pad;
            if padded < k {
                return Err(Error::dim("conv3d", input_shape, weight_shape));
            }
            out_ext[a] = (padded - k) / stride + 1;
        }
        Ok(Conv3dGeom {
            in_channels: input_shape[0],
            out_channels: weight_shape[0],
            in_ext: [input_shape[1], input_shape[2], input_shape[3]],
            out_ext,
            kernel: k,
            stride,
            pad,
        })
    }

    fn in_len(&self) -> usize {
        self.in_ext.iter().product()
    }

    fn out_len(&self) -> usize {
        self.out_ext.iter().product()
    }

    /// Output indices `o` along an axis whose input `o*stride + tap - pad` is in range.
    fn valid_range(&self, axis: usize, tap: usize) -> (usize, usize) {
        let (s, p, e) = (self.stride as isize, self.pad as isize, self.in_ext[axis] as isize);
        let t = tap as isize;
        // o*s + t - p >= 0  and  o*s + t - p <= e - 1
        let lo = ((p - t).max(0) + s - 1) / s;
        let hi_num = e - 1 + p - t;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(self.out_ext[axis] as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }

    /// Visits every (input offset, output offset) pair for one kernel tap.
    #[inline]
    fn for_tap(&self, kz: usize, ky: usize, kx: usize, mut f: impl FnMut(usize, usize)) {
        let [_, ih, iw] = self.in_ext;
        let [_, oh, ow] = self.out_ext;
        let (z0, z1) = self.valid_range(0, kz);
        let (y0, y1) = self.valid_range(1, ky);
        let (x0, x1) = self.valid_range(2, kx);
        for oz in z0..z1 {
            let iz = oz * self.stride + kz - self.pad;
            for oy in y0..y1 {
                let iy = oy * self.stride + ky - self.pad;
                let obase = (oz * oh + oy) * ow;
                let ibase = (iz * ih + iy) * iw;
                for ox in x0..x1 {
                    let ix = ox * self.stride + kx - self.pad;
                    f(ibase + ix, obase + ox);
                }
            }
        }
    }
}

pub(crate) fn conv3d_forward(input: &[f64], weight: &[f64], bias: Option<&[f64]>, g: &Conv3dGeom) -> Vec<f64> {
    let (il, ol, k) = (g.in_len(), g.out_len(), g.kernel);
    let k3 = k * k * k;
    let mut out = vec![0.0; g.out_channels * ol];
    out.par_chunks_mut(ol).enumerate().for_each(|(o, plane)| {
        if let Some(b) = bias {
            plane.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..g.in_channels {
            let inp = &input[c * il..(c + 1) * il];
            let wbase = (o * g.in_channels + c) * k3;
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let w = weight[wbase + (kz * k + ky) * k + kx];
                        if w == 0.0 {
                            continue;
                        }
                        g.for_tap(kz, ky, kx, |i, j| plane[j] += w * inp[i]);
                    }
                }
            }
        }
    });
    out
}

/// Returns (d_input, d_weight, d_bias).
pub(crate) fn conv3d_backward(
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    g: &Conv3dGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let (il, ol, k) = (g.in_len(), g.out_len(), g.kernel);
    let k3 = k * k * k;

    let d_bias: Vec<f64> = (0..g.out_channels)
        .map(|o| grad_out[o * ol..(o + 1) * ol].iter().sum())
        .collect();

    let d_weight = need_weight.then(|| {
        let mut dw = vec![0.0; weight.len()];
        dw.par_chunks_mut(g.in_channels * k3).enumerate().for_each(|(o, wo)| {
            let go = &grad_out[o * ol..(o + 1) * ol];
            for c in 0..g.in_channels {
                let inp = &input[c * il..(c + 1) * il];
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            g.for_tap(kz, ky, kx, |i, j| acc += go[j] * inp[i]);
                            wo[c * k3 + (kz * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
        });
        dw
    });

    let d_input = need_input.then(|| {
        let mut di = vec![0.0; input.len()];
        di.par_chunks_mut(il).enumerate().for_each(|(c, plane)| {
            for o in 0..g.out_channels {
                let go = &grad_out[o * ol..(o + 1) * ol];
                let wbase = (o * g.in_channels + c) * k3;
                for kz in 0..k {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = weight[wbase + (kz * k + ky) * k + kx];
                            if w == 0.0 {
                                continue;
                            }
                            g.for_tap(kz, ky, kx, |i, j| plane[i] += w * go[j]);
                        }
                    }
                }
            }
        });
        di
    });

    (d_input, d_weight, d_bias)
}

/// A sparse linear map between spatial grids, applied identically to every
/// channel: `out[c, j] = Σ_t w[t] · in[c, idx[t]]` for `t` in row `j`.
///
/// Trilinear sampling, resizing and ROI pooling are all stencils.
#[derive(Clone, Debug, Default)]
pub struct Stencil {
    in_len: usize,
    row_ptr: Vec<usize>,
    idx: Vec<usize>,
    w: Vec<f64>,
    anchored: bool,
}

impl Stencil {
    pub fn new(in_len: usize) -> Self {
        Stencil {
            in_len,
            row_ptr: vec![0],
            idx: Vec::new(),
            w: Vec::new(),
            anchored: false,
        }
    }

    /// For rows whose weights sum to one. Each row is evaluated as
    /// `x_a + Σ w·(x_i − x_a)` about its first tap `a`, so a constant input
    /// maps to itself bitwise.
    pub fn anchored(in_len: usize) -> Self {
        Stencil {
            anchored: true,
            ..Stencil::new(in_len)
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    /// Adds `weight` × (trilinear interpolation at `coord`) to the row being built.
    pub fn push_trilinear(&mut self, ext: [usize; 3], coord: [f64; 3], weight: f64) {
        let mut lo = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            if ext[a] > 1 {
                let f = coord[a].floor().clamp(0.0, (ext[a] - 2) as f64);
                lo[a] = f as usize;
                frac[a] = coord[a] - f;
            }
        }
        for corner in 0..8 {
            let mut w = weight;
            let mut pos = [0usize; 3];
            for a in 0..3 {
                let hi = (corner >> (2 - a)) & 1 == 1;
                if hi {
                    if ext[a] == 1 {
                        w = 0.0;
                        pos[a] = lo[a];
                    } else {
                        w *= frac[a];
                        pos[a] = lo[a] + 1;
                    }
                } else {
                    w *= 1.0 - frac[a];
                    pos[a] = lo[a];
                }
            }
            if w != 0.0 {
                self.idx.push((pos[0] * ext[1] + pos[1]) * ext[2] + pos[2]);
                self.w.push(w);
            }
        }
    }

    pub fn finish_row(&mut self) {
        self.row_ptr.push(self.idx.len());
    }

    pub(crate) fn apply(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let (il, ol) = (self.in_len, self.out_len());
        let mut out = vec![0.0; channels * ol];
        for c in 0..channels {
            let inp = &input[c * il..(c + 1) * il];
            let dst = &mut out[c * ol..(c + 1) * ol];
            for (j, d) in dst.iter_mut().enumerate() {
                let (s, e) = (self.row_ptr[j], self.row_ptr[j + 1]);
                let taps = self.idx[s..e].iter().zip(&self.w[s..e]);
                *d = match (self.anchored, self.idx[s..e].first()) {
                    (true, Some(&a)) => inp[a] + taps.map(|(&i, &w)| w * (inp[i] - inp[a])).sum::<f64>(),
                    _ => taps.map(|(&i, &w)| w * inp[i]).sum(),
                };
            }
        }
        out
    }

    pub(crate) fn apply_transpose(&self, grad_out: &[f64], channels: usize) -> Vec<f64> {
        let (il, ol) = (self.in_len, self.out_len());
        let mut out = vec![0.0; channels * il];
        for c in 0..channels {
            let g = &grad_out[c * ol..(c + 1) * ol];
            let dst = &mut out[c * il..(c + 1) * il];
            for (j, &gj) in g.iter().enumerate() {
                let (s, e) = (self.row_ptr[j], self.row_ptr[j + 1]);
                for (&i, &w) in self.idx[s..e].iter().zip(&self.w[s..e]) {
                    dst[i] += w * gj;
                }
            }
        }
        out
    }
}
