use std::sync::Arc;

use super::{Bound, EncoderConfig, EncoderPath, Mask};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

fn spatial_of(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        [_, d, h, w] => Ok([*d, *h, *w]),
        _ => Err(Error::dim("expected [C, D, H, W]", shape, &[0, 0, 0, 0])),
    }
}

/// Flat source index for every (token, patch element) pair of a `[C, D, H, W]`
/// crop cut into cubes of side `patch`. Token `i` sits at grid cell
/// `(i / (g1·g2), (i / g2) % g1, i % g2)`; within a token, elements are ordered
/// channel, then z, y, x inside the patch.
pub fn patch_index(crop_shape: &[usize], patch: usize) -> Result<Arc<[usize]>> {
    let ext = spatial_of(crop_shape)?;
    let c = crop_shape[0];
    if patch == 0 || ext.iter().any(|e| e % patch != 0) {
        return Err(Error::Config(format!("crop {ext:?} not divisible by patch {patch}")));
    }
    let g = ext.map(|e| e / patch);
    let mut idx = Vec::with_capacity(c * ext.iter().product::<usize>());
    for gz in 0..g[0] {
        for gy in 0..g[1] {
            for gx in 0..g[2] {
                for ch in 0..c {
                    for z in 0..patch {
                        for y in 0..patch {
                            for x in 0..patch {
                                let p = [gz * patch + z, gy * patch + y, gx * patch + x];
                                idx.push(((ch * ext[0] + p[0]) * ext[1] + p[1]) * ext[2] + p[2]);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(idx.into())
}

/// `[C, D, H, W]` → `[n_tokens, d]` via a linear patch embedding.
pub fn tokenize<'t>(crop: Var<'t>, patch: usize, embed_w: Var<'t>, embed_b: Option<Var<'t>>) -> Result<Var<'t>> {
    let shape = crop.shape();
    let index = patch_index(&shape, patch)?;
    let per_token = shape[0] * patch.pow(3);
    let n = index.len() / per_token;
    let raw = crop.gather(index, &[n, per_token])?;
    let t = raw.matmul(embed_w)?;
    match embed_b {
        Some(b) => t.add_bias(b, 1),
        None => Ok(t),
    }
}

/// `[n_tokens, d]` → `[d, g0, g1, g2]`, token `i` at its row-major grid cell.
pub fn untokenize<'t>(tokens: Var<'t>, grid: [usize; 3]) -> Result<Var<'t>> {
    let shape = tokens.shape();
    if shape.len() != 2 || shape[0] != grid.iter().product::<usize>() {
        return Err(Error::dim("untokenize", &shape, &grid));
    }
    tokens.transpose2d()?.reshape(&[shape[1], grid[0], grid[1], grid[2]])
}

fn mask_input<'t>(crop: Var<'t>, mask: &Mask, patch: usize, token: Var<'t>) -> Result<Var<'t>> {
    let shape = crop.shape();
    let ext = spatial_of(&shape)?;
    let tape = crop.tape();
    let m = mask.voxel_mask(patch, shape[0], ext)?.cast(crop.dtype());
    let keep = tape.constant(m.map(|v| 1.0 - v));
    let fill = tape
        .constant(Tensor::zeros(&shape).cast(crop.dtype()))
        .add_bias(token, 0)?
        .mul(tape.constant(m))?;
    crop.mul(keep)?.add(fill)
}

fn mask_tokens<'t>(tokens: Var<'t>, mask: &Mask, token: Var<'t>) -> Result<Var<'t>> {
    let shape = tokens.shape();
    let tape = tokens.tape();
    let dt = tokens.dtype();
    let col: Vec<f64> = mask.cells().iter().map(|&m| m as u8 as f64).collect();
    if col.len() != shape[0] {
        return Err(Error::dim("mask tokens", &shape, &[col.len()]));
    }
    let keep = Tensor::from_fn(&shape, |i| 1.0 - col[i / shape[1]]).cast(dt);
    let m_col = tape.constant(Tensor::new(&[col.len(), 1], col)?.cast(dt));
    tokens.mul(tape.constant(keep))?.add(m_col.matmul(token)?)
}

/// Runs the encoder, returning one feature map per stage. When `mask` is
/// given, masked patches are replaced by the learned mask token: on the conv
/// path at the input, on the token path after embedding.
pub fn encode<'t>(b: &Bound<'t>, cfg: &EncoderConfig, crop: Var<'t>, mask: Option<&Mask>) -> Result<Vec<Var<'t>>> {
    let shape = crop.shape();
    let ext = spatial_of(&shape)?;
    if shape[0] != cfg.in_channels {
        return Err(Error::dim("encode channels", &shape, &[cfg.in_channels]));
    }
    match cfg.path {
        EncoderPath::Conv => {
            let total: usize = cfg.strides.iter().product();
            if ext.iter().any(|e| e % total != 0) {
                return Err(Error::Config(format!(
                    "crop {ext:?} not divisible by cumulative stride {total}"
                )));
            }
            let mut x = match mask {
                Some(m) if !m.is_empty() => mask_input(crop, m, cfg.patch, b.var("mask.token")?)?,
                _ => crop,
            };
            let mut pyramid = Vec::with_capacity(cfg.channels.len());
            for (i, &s) in cfg.strides.iter().enumerate() {
                let w = b.var(&format!("enc.s{i}.w"))?;
                let bias = b.var(&format!("enc.s{i}.b"))?;
                x = x.conv3d(w, Some(bias), s, 1)?.gelu();
                pyramid.push(x);
            }
            Ok(pyramid)
        }
        EncoderPath::Token => {
            if ext != cfg.crop_size {
                return Err(Error::Config(format!(
                    "token path is built for crop {:?}, got {ext:?}",
                    cfg.crop_size
                )));
            }
            let mut t = tokenize(crop, cfg.patch, b.var("tok.embed.w")?, Some(b.var("tok.embed.b")?))?;
            if let Some(m) = mask.filter(|m| !m.is_empty()) {
                t = mask_tokens(t, m, b.var("mask.token")?)?;
            }
            let mixed = b.var("tok.mix.w")?.matmul(t)?.add_bias(b.var("tok.mix.b")?, 0)?.gelu();
            t = t.add(mixed)?;
            let h = t
                .matmul(b.var("tok.mlp.w1")?)?
                .add_bias(b.var("tok.mlp.b1")?, 1)?
                .gelu()
                .matmul(b.var("tok.mlp.w2")?)?
                .add_bias(b.var("tok.mlp.b2")?, 1)?;
            t = t.add(h)?;
            Ok(vec![untokenize(t, cfg.grid())?])
        }
    }
}

/// Resizes every stage to `fuse_res` and concatenates along channels.
pub fn fuse_multistage<'t>(pyramid: &[Var<'t>], fuse_res: [usize; 3]) -> Result<Var<'t>> {
    if pyramid.is_empty() {
        return Err(Error::Contract("cannot fuse an empty pyramid".into()));
    }
    if fuse_res.contains(&0) {
        return Err(Error::Config(format!("fuse resolution {fuse_res:?} must be positive")));
    }
    let resized = pyramid
        .iter()
        .map(|s| s.resize_trilinear(fuse_res))
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&resized)
}

/// Two-layer 1×1×1 MLP `w2·gelu(w1·x + b1) + b2` over `[C, ...spatial]`.
pub fn position_mlp<'t>(b: &Bound<'t>, prefix: &str, fmap: Var<'t>) -> Result<Var<'t>> {
    let shape = fmap.shape();
    let c = *shape
        .first()
        .ok_or_else(|| Error::Contract("position_mlp on a scalar".into()))?;
    let n: usize = shape[1..].iter().product();
    let x = fmap.reshape(&[c, n])?;
    let w1 = b.var(&format!("{prefix}.w1"))?;
    if w1.shape()[1] != c {
        return Err(Error::dim("position_mlp channels", &shape, &w1.shape()));
    }
    let h = w1.matmul(x)?.add_bias(b.var(&format!("{prefix}.b1"))?, 0)?.gelu();
    let y = b
        .var(&format!("{prefix}.w2"))?
        .matmul(h)?
        .add_bias(b.var(&format!("{prefix}.b2"))?, 0)?;
    let mut out_shape = shape;
    out_shape[0] = y.shape()[0];
    y.reshape(&out_shape)
}

pub fn project<'t>(b: &Bound<'t>, fmap: Var<'t>) -> Result<Var<'t>> {
    position_mlp(b, "proj", fmap)
}

pub fn predict<'t>(b: &Bound<'t>, h: Var<'t>) -> Result<Var<'t>> {
    position_mlp(b, "pred", h)
}

/// Spatial mean of `[C, ...spatial]` as a `[1, C]` row.
pub fn pool(fmap: Var<'_>) -> Result<Var<'_>> {
    let shape = fmap.shape();
    let c = shape[0];
    let n: usize = shape[1..].iter().product();
    fmap.reshape(&[c, n])?.mean_last()?.reshape(&[1, c])
}

/// Two-layer MLP over the rows of `[n, C]`.
pub fn global_head<'t>(b: &Bound<'t>, prefix: &str, rows: Var<'t>) -> Result<Var<'t>> {
    let h = rows
        .matmul(b.var(&format!("{prefix}.w1"))?.transpose2d()?)?
        .add_bias(b.var(&format!("{prefix}.b1"))?, 1)?
        .gelu();
    h.matmul(b.var(&format!("{prefix}.w2"))?.transpose2d()?)?
        .add_bias(b.var(&format!("{prefix}.b2"))?, 1)
}

/// Pixel decoder: 1×1×1 conv, trilinear upsampling to `crop_ext`, gelu,
/// 1×1×1 conv back to the input channels.
pub fn decode_pixels<'t>(b: &Bound<'t>, fused: Var<'t>, crop_ext: [usize; 3]) -> Result<Var<'t>> {
    let shape = fused.shape();
    let fext = spatial_of(&shape)?;
    let c = shape[0];
    let x = fused.reshape(&[c, fext.iter().product()])?;
    let w1 = b.var("dec.w1")?;
    let hid = w1.shape()[0];
    let h = w1
        .matmul(x)?
        .add_bias(b.var("dec.b1")?, 0)?
        .reshape(&[hid, fext[0], fext[1], fext[2]])?
        .resize_trilinear(crop_ext)?
        .gelu()
        .reshape(&[hid, crop_ext.iter().product()])?;
    let w2 = b.var("dec.w2")?;
    let out_c = w2.shape()[0];
    w2.matmul(h)?
        .add_bias(b.var("dec.b2")?, 0)?
        .reshape(&[out_c, crop_ext[0], crop_ext[1], crop_ext[2]])
}
