//! Alignment, contrastive and reconstruction losses.
//!
//! Teacher-side arguments are always detached inside each loss, so gradients
//! reach only the student arguments whatever the caller passes in.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::consts::TEMPERATURE;
use crate::error::{Error, Result};
use crate::tensor::{Stencil, Tape, Tensor, Var};
use crate::views::Box3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsisKind {
    #[default]
    Cosine,
    Ntxent,
    Gram,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconKind {
    #[default]
    Huber,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_consis: f64,
    pub lambda_con: f64,
    pub consis_kind: ConsisKind,
    pub recon_kind: ReconKind,
    pub temperature: f64,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_recon: 1.0,
            lambda_consis: 1.0,
            lambda_con: 1.0,
            consis_kind: ConsisKind::Cosine,
            recon_kind: ReconKind::Huber,
            temperature: TEMPERATURE,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lams = [self.lambda_recon, self.lambda_consis, self.lambda_con];
        if lams.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got {lams:?}"
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.huber_delta > 0.0 && self.huber_delta.is_finite()) {
            return Err(Error::Config(format!(
                "huber_delta must be > 0, got {}",
                self.huber_delta
            )));
        }
        Ok(())
    }
}

/// Value-only copy of `v` on the same tape; nothing flows back through it.
pub fn stop_gradient(v: Var<'_>) -> Var<'_> {
    if v.requires_grad() {
        v.tape().constant(v.value())
    } else {
        v
    }
}

/// Sampling positions along one axis for ROI bins over `[start, start + len]`
/// in feature-index coordinates. Each bin gets `ceil(len / bins)` samples,
/// capped at 2, placed at the centres of equal sub-bins.
fn roi_axis_samples(start: f64, len: f64, bins: usize, ext: usize) -> Vec<Vec<f64>> {
    let bin = len / bins as f64;
    let k = (bin.ceil() as usize).clamp(1, 2);
    (0..bins)
        .map(|b| {
            (0..k)
                .map(|s| {
                    let u = start + bin * (b as f64 + (s as f64 + 0.5) / k as f64);
                    u.clamp(0.0, (ext - 1) as f64)
                })
                .collect()
        })
        .collect()
}

/// 3D ROI align of `fmap: [C, D', H', W']` over `omega`, a box in the voxel
/// frame of a crop with extents `crop_ext`.
///
/// Crop-voxel edge coordinate `e` maps to feature index `e·(F/crop) − 0.5`,
/// which puts feature voxel centres at integer indices. Each output cell
/// averages trilinear samples on a regular sub-grid of its bin.
pub fn roi_align_3d<'t>(fmap: Var<'t>, omega: &Box3, crop_ext: [usize; 3], out_res: [usize; 3]) -> Result<Var<'t>> {
    let shape = fmap.shape();
    let fext = crate::tensor::sampling::spatial_ext(&shape)?;
    if !omega.fits_in(crop_ext) || omega.size.contains(&0) {
        return Err(Error::Contract(format!("omega {omega:?} outside crop {crop_ext:?}")));
    }
    if out_res.contains(&0) {
        return Err(Error::Contract(format!("ROI resolution {out_res:?} must be positive")));
    }
    let axes: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|a| {
            let scale = fext[a] as f64 / crop_ext[a] as f64;
            let start = omega.origin[a] as f64 * scale - 0.5;
            let len = omega.size[a] as f64 * scale;
            roi_axis_samples(start, len, out_res[a], fext[a])
        })
        .collect();
    let mut st = Stencil::anchored(fext.iter().product());
    for bz in &axes[0] {
        for by in &axes[1] {
            for bx in &axes[2] {
                let w = 1.0 / (bz.len() * by.len() * bx.len()) as f64;
                for &z in bz {
                    for &y in by {
                        for &x in bx {
                            st.push_trilinear(fext, [z, y, x], w);
                        }
                    }
                }
                st.finish_row();
            }
        }
    }
    fmap.spatial(Arc::new(st), &out_res)
}

/// ROI-aligns a `[d, ...]` map and flattens it to `[p, d]`, one row per cell.
pub fn align_cells<'t>(fmap: Var<'t>, omega: &Box3, crop_ext: [usize; 3], out_res: [usize; 3]) -> Result<Var<'t>> {
    let r = roi_align_3d(fmap, omega, crop_ext, out_res)?;
    let d = r.shape()[0];
    r.reshape(&[d, out_res.iter().product()])?.transpose2d()
}

fn check_pair(op: &'static str, a: Var<'_>, b: Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::dim(op, &sa, &sb));
    }
    Ok(())
}

/// `2 − 2·cos(u_i, h_i)` averaged over rows.
pub fn cosine_loss<'t>(u: Var<'t>, h_t: Var<'t>) -> Result<Var<'t>> {
    check_pair("cosine_loss", u, h_t)?;
    let h_t = stop_gradient(h_t);
    let cos = u.l2_normalize(1)?.mul(h_t.l2_normalize(1)?)?.sum_last()?;
    Ok(cos.mean().scale(-2.0).add_scalar(2.0))
}

/// NT-Xent over cosine similarities. Row `i` of `targets` is the positive
/// for anchor `i`; every other row is a negative. The softmax denominator
/// runs over all targets, positive included.
pub fn ntxent_loss<'t>(anchors: Var<'t>, targets: Var<'t>, temperature: f64) -> Result<Var<'t>> {
    check_pair("ntxent_loss", anchors, targets)?;
    let n = anchors.shape()[0];
    if n < 2 {
        return Err(Error::Contract(format!("NT-Xent needs at least 2 rows, got {n}")));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!("temperature must be > 0, got {temperature}")));
    }
    let targets = stop_gradient(targets);
    let sim = anchors
        .l2_normalize(1)?
        .matmul(targets.l2_normalize(1)?.transpose2d()?)?
        .scale(1.0 / temperature);
    let logp = sim.log_softmax_last()?;
    let diag: Arc<[usize]> = (0..n).map(|i| i * n + i).collect();
    Ok(logp.gather(diag, &[n])?.mean().neg())
}

/// `½·L(u1, h2t) + ½·L(u2, h1t)` for cosine or NT-Xent.
pub fn sym_consistency<'t>(
    u1: Var<'t>,
    h2t: Var<'t>,
    u2: Var<'t>,
    h1t: Var<'t>,
    kind: ConsisKind,
    temperature: f64,
) -> Result<Var<'t>> {
    let directed = |u, h| match kind {
        ConsisKind::Cosine => cosine_loss(u, h),
        ConsisKind::Ntxent => ntxent_loss(u, h, temperature),
        ConsisKind::Gram => gram_loss(u, h),
    };
    let a = directed(u1, h2t)?;
    let b = directed(u2, h1t)?;
    a.scale(0.5).add(b.scale(0.5))
}

/// Symmetrised NT-Xent over per-crop pooled vectors: `p1`, `p2` are student
/// predictions `[n, d]`, `z1t`, `z2t` the teacher projections.
pub fn global_contrastive<'t>(
    p1: Var<'t>,
    z2t: Var<'t>,
    p2: Var<'t>,
    z1t: Var<'t>,
    temperature: f64,
) -> Result<Var<'t>> {
    sym_consistency(p1, z2t, p2, z1t, ConsisKind::Ntxent, temperature)
}

/// `‖ẑ1ẑ1ᵀ − ẑ2ẑ2ᵀ‖²_F` with rows l2-normalised.
pub fn gram_loss<'t>(z1s: Var<'t>, z2t: Var<'t>) -> Result<Var<'t>> {
    check_pair("gram_loss", z1s, z2t)?;
    let gram = |z: Var<'t>| -> Result<Var<'t>> {
        let n = z.l2_normalize(1)?;
        n.matmul(n.transpose2d()?)
    };
    Ok(gram(z1s)?.sub(gram(stop_gradient(z2t))?)?.square().sum())
}

/// Mean per-voxel reconstruction loss over the voxels where `mask` is 1,
/// or over all voxels when `mask` is `None` or all zero.
pub fn recon_loss<'t>(
    pred: Var<'t>,
    target: Var<'t>,
    mask: Option<&Tensor>,
    kind: ReconKind,
    delta: f64,
) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::dim("recon_loss", &pred.shape(), &target.shape()));
    }
    let diff = pred.sub(stop_gradient(target))?;
    let per = match kind {
        ReconKind::Huber => diff.huber(delta),
        ReconKind::L2 => diff.square(),
    };
    match mask {
        Some(m) if m.sum() > 0.0 => {
            if m.shape() != pred.shape().as_slice() {
                return Err(Error::dim("recon_loss mask", m.shape(), &pred.shape()));
            }
            let count = m.sum();
            Ok(per
                .mul(pred.tape().constant(m.cast(pred.dtype())))?
                .sum()
                .scale(1.0 / count))
        }
        _ => Ok(per.mean()),
    }
}

/// Unweighted component values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub total: f64,
    pub recon: f64,
    pub consis: f64,
    pub con: f64,
}

impl Breakdown {
    /// First non-finite entry, by name.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("recon", self.recon),
            ("consis", self.consis),
            ("con", self.con),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub struct Objective<'t> {
    pub total: Var<'t>,
    pub breakdown: Breakdown,
}

pub type Term<'a, 't> = Box<dyn FnOnce() -> Result<Var<'t>> + 'a>;

/// `λ_recon·recon + λ_consis·consis + λ_con·con`.
///
/// A term is evaluated only when it is present and its weight is positive;
/// skipped terms are reported as 0.
pub fn total_objective<'a, 't>(
    tape: &'t Tape,
    weights: &LossWeights,
    recon: Option<Term<'a, 't>>,
    consis: Option<Term<'a, 't>>,
    con: Option<Term<'a, 't>>,
) -> Result<Objective<'t>> {
    weights.validate()?;
    let mut total: Option<Var<'t>> = None;
    let mut values = [0.0; 3];
    let terms = [
        (weights.lambda_recon, recon),
        (weights.lambda_consis, consis),
        (weights.lambda_con, con),
    ];
    for (k, (lambda, term)) in terms.into_iter().enumerate() {
        let Some(term) = term.filter(|_| lambda > 0.0) else {
            continue;
        };
        let v = term()?;
        values[k] = v.item()?;
        let weighted = v.scale(lambda);
        total = Some(match total {
            Some(t) => t.add(weighted)?,
            None => weighted,
        });
    }
    let total = total.unwrap_or_else(|| tape.scalar(0.0));
    Ok(Objective {
        breakdown: Breakdown {
            total: total.item()?,
            recon: values[0],
            consis: values[1],
            con: values[2],
        },
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{grad_check, GradCheckConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn t2(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::new(&[rows.len(), c], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    fn eval(f: impl for<'t> Fn(&'t Tape) -> Result<Var<'t>>) -> f64 {
        let tape = Tape::new();
        f(&tape).unwrap().item().unwrap()
    }

    #[test]
    fn cosine_examples() {
        let u = rnd(&[5, 4], 1);
        assert!(eval(|t| cosine_loss(t.constant(u.clone()), t.constant(u.clone()))).abs() < 1e-12);
        let a = t2(&[&[1.0, 0.0], &[0.0, 2.0]]);
        let b = t2(&[&[0.0, 3.0], &[-1.0, 0.0]]);
        assert!((eval(|t| cosine_loss(t.constant(a.clone()), t.constant(b.clone()))) - 2.0).abs() < 1e-12);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let u = t2(&[&[s, s]]);
        let h = t2(&[&[1.0, 0.0]]);
        let v = eval(|t| cosine_loss(t.constant(u.clone()), t.constant(h.clone())));
        assert!((v - (2.0 - 2f64.sqrt())).abs() < 1e-9);
        assert!((v - 0.585786).abs() < 1e-6);
    }

    #[test]
    fn ntxent_examples() {
        let u = t2(&[&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]]);
        let h = u.clone();
        let v = eval(|t| ntxent_loss(t.constant(u.clone()), t.constant(h.clone()), 1.0));
        let oracle = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((v - oracle).abs() < 1e-12);
        assert!((v - 0.313262).abs() < 1e-6);
        let one = t2(&[&[1.0, 0.0]]);
        let tape = Tape::new();
        assert!(matches!(
            ntxent_loss(tape.constant(one.clone()), tape.constant(one), 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ntxent_permutation_and_temperature() {
        let (a, b) = (rnd(&[6, 5], 2), rnd(&[6, 5], 3));
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permute = |x: &Tensor| {
            let d = x.shape()[1];
            Tensor::new(
                &[6, d],
                perm.iter()
                    .flat_map(|&i| x.data()[i * d..(i + 1) * d].to_vec())
                    .collect(),
            )
            .unwrap()
        };
        let v1 = eval(|t| ntxent_loss(t.constant(a.clone()), t.constant(b.clone()), 0.3));
        let v2 = eval(|t| ntxent_loss(t.constant(permute(&a)), t.constant(permute(&b)), 0.3));
        assert!((v1 - v2).abs() < 1e-12);

        let argmax_rows = |tau: f64| {
            let tape = Tape::new();
            let s = tape
                .constant(a.clone())
                .l2_normalize(1)
                .unwrap()
                .matmul(tape.constant(b.clone()).l2_normalize(1).unwrap().transpose2d().unwrap())
                .unwrap()
                .scale(1.0 / tau)
                .softmax_last()
                .unwrap()
                .value();
            s.data()
                .chunks(6)
                .map(|r| r.iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0)
                .collect::<Vec<_>>()
        };
        assert_eq!(argmax_rows(0.05), argmax_rows(5.0));
    }

    #[test]
    fn global_contrastive_limit_and_swap() {
        let z = t2(&[&[1.0, 0.2, -0.3], &[0.4, 1.0, 0.1]]);
        let v = eval(|t| {
            let c = t.constant(z.clone());
            global_contrastive(c, c, c, c, 1e6)
        });
        assert!((v - 2f64.ln()).abs() < 1e-5);
        let (p1, z2, p2, z1) = (rnd(&[4, 3], 4), rnd(&[4, 3], 5), rnd(&[4, 3], 6), rnd(&[4, 3], 7));
        let a = eval(|t| {
            global_contrastive(
                t.constant(p1.clone()),
                t.constant(z2.clone()),
                t.constant(p2.clone()),
                t.constant(z1.clone()),
                0.1,
            )
        });
        let b = eval(|t| {
            global_contrastive(
                t.constant(p2.clone()),
                t.constant(z1.clone()),
                t.constant(p1.clone()),
                t.constant(z2.clone()),
                0.1,
            )
        });
        assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn sym_consistency_examples() {
        let (u1, h2, u2, h1) = (rnd(&[5, 4], 8), rnd(&[5, 4], 9), rnd(&[5, 4], 10), rnd(&[5, 4], 11));
        for kind in [ConsisKind::Cosine, ConsisKind::Ntxent, ConsisKind::Gram] {
            let s = eval(|t| {
                sym_consistency(
                    t.constant(u1.clone()),
                    t.constant(h2.clone()),
                    t.constant(u2.clone()),
                    t.constant(h1.clone()),
                    kind,
                    0.2,
                )
            });
            let swapped = eval(|t| {
                sym_consistency(
                    t.constant(u2.clone()),
                    t.constant(h1.clone()),
                    t.constant(u1.clone()),
                    t.constant(h2.clone()),
                    kind,
                    0.2,
                )
            });
            assert!((s - swapped).abs() <= 1e-12);
            let directed = |u: &Tensor, h: &Tensor| {
                eval(|t| match kind {
                    ConsisKind::Cosine => cosine_loss(t.constant(u.clone()), t.constant(h.clone())),
                    ConsisKind::Ntxent => ntxent_loss(t.constant(u.clone()), t.constant(h.clone()), 0.2),
                    ConsisKind::Gram => gram_loss(t.constant(u.clone()), t.constant(h.clone())),
                })
            };
            assert!((s - (0.5 * directed(&u1, &h2) + 0.5 * directed(&u2, &h1))).abs() <= 1e-12);
        }
        let same = eval(|t| {
            sym_consistency(
                t.constant(u1.clone()),
                t.constant(h2.clone()),
                t.constant(u1.clone()),
                t.constant(h2.clone()),
                ConsisKind::Cosine,
                0.1,
            )
        });
        let single = eval(|t| cosine_loss(t.constant(u1.clone()), t.constant(h2.clone())));
        assert!((same - single).abs() <= 1e-12);
    }

    #[test]
    fn recon_examples() {
        let tape = Tape::new();
        let x = tape.constant(rnd(&[1, 2, 2, 2], 12));
        assert_eq!(
            recon_loss(x, x, None, ReconKind::Huber, 1.0).unwrap().item().unwrap(),
            0.0
        );
        let cell = |d: f64| Tensor::new(&[1], vec![d]).unwrap();
        let z = tape.constant(cell(0.0));
        let huber = |d| {
            recon_loss(tape.constant(cell(d)), z, None, ReconKind::Huber, 1.0)
                .unwrap()
                .item()
                .unwrap()
        };
        assert!((huber(0.5) - 0.125).abs() < 1e-12);
        assert!((huber(2.0) - 1.5).abs() < 1e-12);
        assert!((huber(1.0 + 1e-9) - huber(1.0 - 1e-9)).abs() < 1e-8);
        let l2 = recon_loss(tape.constant(cell(2.0)), z, None, ReconKind::L2, 1.0).unwrap();
        assert_eq!(l2.item().unwrap(), 4.0);
    }

    #[test]
    fn recon_averages_over_masked_voxels() {
        let tape = Tape::new();
        let p = Tensor::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = Tensor::new(&[1, 1, 1, 4], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let z = tape.constant(Tensor::zeros(&[1, 1, 1, 4]));
        let v = recon_loss(tape.constant(p.clone()), z, Some(&m), ReconKind::L2, 1.0).unwrap();
        assert_eq!(v.item().unwrap(), (4.0 + 16.0) / 2.0);
        let empty = Tensor::zeros(&[1, 1, 1, 4]);
        let all = recon_loss(tape.constant(p), z, Some(&empty), ReconKind::L2, 1.0).unwrap();
        assert_eq!(all.item().unwrap(), 30.0 / 4.0);
    }

    #[test]
    fn gram_examples() {
        let z = rnd(&[4, 3], 13);
        assert!(eval(|t| gram_loss(t.constant(z.clone()), t.constant(z.clone()))).abs() < 1e-12);
        let (a, b) = (rnd(&[1, 5], 14), rnd(&[1, 5], 15));
        assert!(eval(|t| gram_loss(t.constant(a.clone()), t.constant(b.clone()))).abs() < 1e-12);

        let (a, b) = (rnd(&[3, 4], 16), rnd(&[3, 4], 17));
        let norm = |x: &Tensor| -> Vec<Vec<f64>> {
            x.data()
                .chunks(4)
                .map(|r| {
                    let n = (r.iter().map(|v| v * v).sum::<f64>() + crate::consts::NORM_EPS).sqrt();
                    r.iter().map(|v| v / n).collect()
                })
                .collect()
        };
        let (na, nb) = (norm(&a), norm(&b));
        let mut oracle = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let ga: f64 = (0..4).map(|k| na[i][k] * na[j][k]).sum();
                let gb: f64 = (0..4).map(|k| nb[i][k] * nb[j][k]).sum();
                oracle += (ga - gb).powi(2);
            }
        }
        let v = eval(|t| gram_loss(t.constant(a.clone()), t.constant(b.clone())));
        assert!((v - oracle).abs() <= 1e-10);
    }

    #[test]
    fn total_objective_examples() {
        let tape = Tape::new();
        let r = tape.scalar(0.7);
        let c = tape.scalar(1.3);
        let k = tape.scalar(2.9);
        let zero = LossWeights {
            lambda_recon: 0.0,
            lambda_consis: 0.0,
            lambda_con: 0.0,
            ..Default::default()
        };
        let mut evaluated = false;
        let o = total_objective(
            &tape,
            &zero,
            Some(Box::new(|| {
                evaluated = true;
                Ok(r)
            })),
            None,
            None,
        )
        .unwrap();
        assert_eq!(o.breakdown, Breakdown::default());
        assert!(!evaluated);

        let recon_only = LossWeights {
            lambda_recon: 1.0,
            ..zero.clone()
        };
        let o = total_objective(
            &tape,
            &recon_only,
            Some(Box::new(|| Ok(r))),
            Some(Box::new(|| Ok(c))),
            None,
        )
        .unwrap();
        assert_eq!(o.total.item().unwrap(), 0.7);
        assert_eq!(o.breakdown.consis, 0.0);

        let w = LossWeights {
            lambda_recon: 0.3,
            lambda_consis: 1.7,
            lambda_con: 0.45,
            ..Default::default()
        };
        let o = total_objective(
            &tape,
            &w,
            Some(Box::new(|| Ok(r))),
            Some(Box::new(|| Ok(c))),
            Some(Box::new(|| Ok(k))),
        )
        .unwrap();
        let oracle = 0.3 * 0.7 + 1.7 * 1.3 + 0.45 * 2.9;
        assert!((o.breakdown.total - oracle).abs() <= 1e-12);
        assert_eq!(
            (o.breakdown.recon, o.breakdown.consis, o.breakdown.con),
            (0.7, 1.3, 2.9)
        );
    }

    #[test]
    fn teacher_inputs_get_no_gradient() {
        let tape = Tape::new();
        let u = tape.leaf(rnd(&[4, 3], 18));
        let h = tape.leaf(rnd(&[4, 3], 19));
        for loss in [
            cosine_loss(u, h).unwrap(),
            ntxent_loss(u, h, 0.1).unwrap(),
            gram_loss(u, h).unwrap(),
        ] {
            let g = tape.backward(loss).unwrap();
            assert!(g.get(u).is_some());
            assert!(g.get(h).is_none());
        }
    }

    #[test]
    fn roi_identity_and_constant() {
        let tape = Tape::new();
        let f = rnd(&[3, 4, 5, 6], 20);
        let fv = tape.constant(f.clone());
        let full = Box3::new([0; 3], [16, 20, 24]).unwrap();
        let out = roi_align_3d(fv, &full, [16, 20, 24], [4, 5, 6]).unwrap().value();
        assert!(out.bitwise_eq(&f));
        let k = 0.1f64.sqrt();
        let c = tape.constant(Tensor::full(&[2, 4, 4, 4], k));
        for (o, s) in [
            ([0, 0, 0], [16, 16, 16]),
            ([3, 5, 1], [7, 2, 11]),
            ([15, 15, 15], [1, 1, 1]),
        ] {
            let om = Box3::new(o, s).unwrap();
            let r = roi_align_3d(c, &om, [16; 3], [3, 2, 5]).unwrap().value();
            assert!(r.data().iter().all(|&v| v == k));
        }
        let bad = Box3::new([10, 0, 0], [8, 4, 4]).unwrap();
        assert!(matches!(
            roi_align_3d(c, &bad, [16; 3], [2; 3]),
            Err(Error::Contract(_))
        ));
    }

    /// Trilinear interpolation written independently of the stencil code.
    fn trilinear(f: &Tensor, c: usize, p: [f64; 3]) -> f64 {
        let s = f.shape();
        let ext = [s[1], s[2], s[3]];
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut idx = [0usize; 3];
            for a in 0..3 {
                let lo = p[a].floor().min((ext[a] - 1) as f64) as usize;
                let hi = (lo + 1).min(ext[a] - 1);
                let t = p[a] - lo as f64;
                let bit = corner >> a & 1;
                idx[a] = if bit == 1 { hi } else { lo };
                w *= if bit == 1 { t } else { 1.0 - t };
            }
            acc += w * f.data()[((c * ext[0] + idx[0]) * ext[1] + idx[1]) * ext[2] + idx[2]];
        }
        acc
    }

    #[test]
    fn roi_linear_ramp_matches_dense_integration() {
        let ext = [8, 8, 8];
        let f = Tensor::from_fn(&[1, 8, 8, 8], |i| {
            let (z, y, x) = (i / 64, (i / 8) % 8, i % 8);
            0.5 * z as f64 - 1.5 * y as f64 + 2.0 * x as f64 + 0.25
        });
        let crop = [32; 3];
        let omega = Box3::new([8, 10, 6], [16; 3]).unwrap();
        let res = [3, 4, 2];
        let tape = Tape::new();
        let out = roi_align_3d(tape.constant(f.clone()), &omega, crop, res)
            .unwrap()
            .value();
        let dense = 24;
        for bz in 0..res[0] {
            for by in 0..res[1] {
                for bx in 0..res[2] {
                    let b = [bz, by, bx];
                    let mut acc = 0.0;
                    for i in 0..dense {
                        for j in 0..dense {
                            for k in 0..dense {
                                let frac = [i, j, k].map(|q| (q as f64 + 0.5) / dense as f64);
                                let p: [f64; 3] = std::array::from_fn(|a| {
                                    let lo =
                                        omega.origin[a] as f64 + omega.size[a] as f64 * b[a] as f64 / res[a] as f64;
                                    let edge = lo + omega.size[a] as f64 / res[a] as f64 * frac[a];
                                    edge * ext[a] as f64 / crop[a] as f64 - 0.5
                                });
                                acc += trilinear(&f, 0, p);
                            }
                        }
                    }
                    let oracle = acc / (dense * dense * dense) as f64;
                    let got = out.data()[(bz * res[1] + by) * res[2] + bx];
                    assert!((got - oracle).abs() <= 1e-6, "{got} vs {oracle}");
                }
            }
        }
    }

    fn check(f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>, inputs: &[Tensor]) {
        let rep = grad_check(f, inputs, GradCheckConfig::default()).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn loss_gradients() {
        for seed in 0..4 {
            let u = rnd(&[5, 4], 100 + seed);
            let h = rnd(&[5, 4], 200 + seed);
            // Teacher targets are detached, so only the student side is checked.
            check(
                |t, v| cosine_loss(v[0], t.constant(h.clone())),
                std::slice::from_ref(&u),
            );
            check(
                |t, v| ntxent_loss(v[0], t.constant(h.clone()), 0.5),
                std::slice::from_ref(&u),
            );
            check(|t, v| gram_loss(v[0], t.constant(h.clone())), std::slice::from_ref(&u));
            let target = h.map(|x| 2.0 * x).reshape(&[1, 1, 5, 4]).unwrap();
            check(
                |t, v| recon_loss(v[0], t.constant(target.clone()), None, ReconKind::Huber, 1.0),
                &[u.reshape(&[1, 1, 5, 4]).unwrap()],
            );
        }
    }

    #[test]
    fn roi_gradient() {
        let f = rnd(&[2, 4, 4, 4], 21);
        let w = rnd(&[2, 3, 2, 2], 22);
        let om = Box3::new([3, 1, 6], [9, 14, 7]).unwrap();
        check(
            |tape, v| {
                Ok(roi_align_3d(v[0], &om, [16; 3], [3, 2, 2])?
                    .mul(tape.constant(w.clone()))?
                    .sum())
            },
            &[f],
        );
    }

    #[test]
    fn zero_rows_are_guarded() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[3, 4]));
        let v = cosine_loss(z, z).unwrap().item().unwrap();
        assert!(v.is_finite() && (v - 2.0).abs() < 1e-12);
        assert!(tape.zero_norm_events() > 0);
    }

    fn orthogonal(d: usize, seed: u64) -> Tensor {
        let a = rnd(&[d, d], seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        for i in 0..d {
            let mut v: Vec<f64> = a.data()[i * d..(i + 1) * d].to_vec();
            for u in &q {
                let dot: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= dot * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.push(v.into_iter().map(|x| x / n).collect());
        }
        Tensor::new(&[d, d], q.concat()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn losses_nonnegative_and_finite(seed in any::<u64>(), n in 2usize..7, d in 1usize..6, tau in 0.05f64..2.0) {
            let (a, b) = (rnd(&[n, d], seed), rnd(&[n, d], seed ^ 1));
            for v in [
                eval(|t| cosine_loss(t.constant(a.clone()), t.constant(b.clone()))),
                eval(|t| ntxent_loss(t.constant(a.clone()), t.constant(b.clone()), tau)),
                eval(|t| gram_loss(t.constant(a.clone()), t.constant(b.clone()))),
                eval(|t| recon_loss(t.constant(a.clone()), t.constant(b.clone()), None, ReconKind::Huber, tau)),
            ] {
                prop_assert!(v.is_finite() && v >= 0.0);
            }
        }

        #[test]
        fn ntxent_rotation_invariant(seed in any::<u64>(), n in 2usize..6, d in 2usize..6) {
            let (a, b) = (rnd(&[n, d], seed), rnd(&[n, d], seed ^ 7));
            let q = orthogonal(d, seed ^ 9);
            let base = eval(|t| ntxent_loss(t.constant(a.clone()), t.constant(b.clone()), 0.1));
            let rot = eval(|t| {
                let qv = t.constant(q.clone());
                ntxent_loss(t.constant(a.clone()).matmul(qv)?, t.constant(b.clone()).matmul(qv)?, 0.1)
            });
            prop_assert!((base - rot).abs() <= 1e-9);
        }
    }
}
