//! Finite-difference checks over every loss and network op on random
//! instances. Teacher-side inputs are detached, so only student inputs are
//! perturbed.

use rand::Rng;

use crate::losses::{
    cosine_loss, global_contrastive, gram_loss, ntxent_loss, recon_loss, roi_align_3d, sym_consistency, ConsisKind,
    ReconKind,
};
use crate::nets::{
    decode_pixels, encode, fuse_multistage, global_head, make_mask, pool, position_mlp, Bound, EncoderConfig,
    EncoderPath, ModelParams,
};
use crate::rng::{keyed_rng, purpose, KeyedRng};
use crate::tensor::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::views::Box3;
use crate::{DType, Error, Result, Tape, Tensor, Var};

pub const LOSS_TARGETS: [&str; 8] = [
    "cosine",
    "sym_cosine",
    "ntxent",
    "sym_ntxent",
    "global_contrastive",
    "huber",
    "l2",
    "gram",
];

pub const NET_TARGETS: [&str; 8] = [
    "conv_encoder",
    "masked_encoder",
    "token_encoder",
    "projector",
    "predictor",
    "global_head",
    "decoder",
    "roi_align",
];

pub fn all_targets() -> impl Iterator<Item = &'static str> {
    LOSS_TARGETS.into_iter().chain(NET_TARGETS)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetReport {
    pub target: String,
    pub instances: usize,
    pub passed: usize,
    pub max_rel_err: f64,
    /// First failing instance, with its diagnostic.
    pub failure: Option<String>,
}

impl TargetReport {
    pub fn ok(&self) -> bool {
        self.passed == self.instances && self.failure.is_none()
    }
}

fn randn(shape: &[usize], rng: &mut KeyedRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn tiny(path: EncoderPath) -> EncoderConfig {
    EncoderConfig {
        path,
        crop_size: [8; 3],
        channels: vec![2, 3],
        strides: vec![2, 2],
        patch: 4,
        embed_dim: 3,
        fuse_res: [2; 3],
        proj_dim: 3,
        proj_hidden: 4,
        pred_hidden: 2,
        decoder_hidden: 2,
        ..Default::default()
    }
}

fn check(
    f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    inputs: &[Tensor],
    tol: f64,
) -> Result<GradCheckReport> {
    grad_check(
        f,
        inputs,
        GradCheckConfig {
            tolerance: tol,
            ..Default::default()
        },
    )
}

/// Perturbs the input `x` and the named parameters; the op output is read
/// out against a fixed random weight so every element carries gradient.
fn net_check(
    cfg: &EncoderConfig,
    names: &[&str],
    x: Tensor,
    rng: &mut KeyedRng,
    tol: f64,
    op: impl for<'t> Fn(&Bound<'t>, Var<'t>) -> Result<Var<'t>>,
) -> Result<GradCheckReport> {
    let params = ModelParams::init(cfg, rng.random(), DType::F64)?;
    let shape = {
        let tape = Tape::new();
        op(&params.bind(&tape, false), tape.constant(x.clone()))?.shape()
    };
    let readout = randn(&shape, rng);
    let mut inputs = vec![x];
    for n in names {
        inputs.push(params.get(n)?.clone());
    }
    check(
        |tape, v| {
            let mut b = params.bind(tape, false);
            for (k, n) in names.iter().enumerate() {
                b = b.with_var(n, v[k + 1]);
            }
            Ok(op(&b, v[0])?.mul(tape.constant(readout.clone()))?.sum())
        },
        &inputs,
        tol,
    )
}

fn loss_instance(target: &str, rng: &mut KeyedRng, tol: f64) -> Result<GradCheckReport> {
    let n = rng.random_range(2..6);
    let d = rng.random_range(2..6);
    let tau = rng.random_range(0.1..1.0);
    let (u1, u2) = (randn(&[n, d], rng), randn(&[n, d], rng));
    let (h1, h2) = (randn(&[n, d], rng), randn(&[n, d], rng));
    match target {
        "cosine" => check(|t, v| cosine_loss(v[0], t.constant(h2.clone())), &[u1], tol),
        "ntxent" => check(|t, v| ntxent_loss(v[0], t.constant(h2.clone()), tau), &[u1], tol),
        "gram" => check(|t, v| gram_loss(v[0], t.constant(h2.clone())), &[u1], tol),
        "sym_cosine" | "sym_ntxent" => {
            let kind = if target == "sym_cosine" {
                ConsisKind::Cosine
            } else {
                ConsisKind::Ntxent
            };
            check(
                |t, v| sym_consistency(v[0], t.constant(h2.clone()), v[1], t.constant(h1.clone()), kind, tau),
                &[u1, u2],
                tol,
            )
        }
        "global_contrastive" => check(
            |t, v| global_contrastive(v[0], t.constant(h2.clone()), v[1], t.constant(h1.clone()), tau),
            &[u1, u2],
            tol,
        ),
        "huber" | "l2" => {
            let kind = if target == "huber" {
                ReconKind::Huber
            } else {
                ReconKind::L2
            };
            let delta = rng.random_range(0.5..2.0);
            let shape = [1, 3, 3, 3];
            let pred = randn(&shape, rng);
            let truth = randn(&shape, rng).map(|x| 2.0 * x);
            let mut keep: Vec<f64> = (0..27).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
            keep[0] = 1.0;
            let mask = Tensor::new(&shape, keep)?;
            check(
                |t, v| recon_loss(v[0], t.constant(truth.clone()), Some(&mask), kind, delta),
                &[pred],
                tol,
            )
        }
        other => Err(Error::Config(format!("unknown loss target {other:?}"))),
    }
}

fn net_instance(target: &str, rng: &mut KeyedRng, tol: f64) -> Result<GradCheckReport> {
    let conv = tiny(EncoderPath::Conv);
    let token = tiny(EncoderPath::Token);
    let crop = |rng: &mut KeyedRng| randn(&[1, 8, 8, 8], rng);
    let fmap = |rng: &mut KeyedRng, ch: usize| randn(&[ch, 2, 2, 2], rng);
    match target {
        "conv_encoder" => {
            let x = crop(rng);
            net_check(
                &conv,
                &["enc.s0.w", "enc.s0.b", "enc.s1.w", "enc.s1.b"],
                x,
                rng,
                tol,
                |b, x| fuse_multistage(&encode(b, &conv, x, None)?, conv.fuse_res),
            )
        }
        "masked_encoder" => {
            let mask = make_mask(conv.grid(), 0.5, rng);
            let x = crop(rng);
            net_check(&conv, &["enc.s0.w", "enc.s1.w", "mask.token"], x, rng, tol, |b, x| {
                fuse_multistage(&encode(b, &conv, x, Some(&mask))?, conv.fuse_res)
            })
        }
        "token_encoder" => {
            let mask = make_mask(token.grid(), 0.5, rng);
            let x = crop(rng);
            let names = ["tok.embed.w", "tok.mix.w", "tok.mlp.w1", "tok.mlp.w2", "mask.token"];
            net_check(&token, &names, x, rng, tol, |b, x| {
                Ok(encode(b, &token, x, Some(&mask))?[0])
            })
        }
        "projector" | "predictor" => {
            let prefix = if target == "projector" { "proj" } else { "pred" };
            let ch = if target == "projector" {
                conv.fused_channels()
            } else {
                conv.proj_dim
            };
            let names: Vec<String> = ["w1", "b1", "w2", "b2"]
                .iter()
                .map(|s| format!("{prefix}.{s}"))
                .collect();
            let names: Vec<&str> = names.iter().map(String::as_str).collect();
            let x = fmap(rng, ch);
            net_check(&conv, &names, x, rng, tol, |b, x| position_mlp(b, prefix, x))
        }
        "global_head" => {
            let x = fmap(rng, conv.fused_channels());
            net_check(
                &conv,
                &["gproj.w1", "gproj.b1", "gproj.w2", "gproj.b2", "gpred.w1"],
                x,
                rng,
                tol,
                |b, x| global_head(b, "gpred", global_head(b, "gproj", pool(x)?)?),
            )
        }
        "decoder" => {
            let x = fmap(rng, conv.fused_channels());
            net_check(&conv, &["dec.w1", "dec.b1", "dec.w2", "dec.b2"], x, rng, tol, |b, x| {
                decode_pixels(b, x, conv.crop_size)
            })
        }
        "roi_align" => {
            let crop_ext = [16; 3];
            let mut origin = [0; 3];
            let mut size = [0; 3];
            for a in 0..3 {
                size[a] = rng.random_range(2..=crop_ext[a]);
                origin[a] = rng.random_range(0..=crop_ext[a] - size[a]);
            }
            let omega = Box3::new(origin, size)?;
            let res = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
            let f = randn(&[2, 4, 4, 4], rng);
            let w = randn(&[2, res[0], res[1], res[2]], rng);
            check(
                |t, v| {
                    Ok(roi_align_3d(v[0], &omega, crop_ext, res)?
                        .mul(t.constant(w.clone()))?
                        .sum())
                },
                &[f],
                tol,
            )
        }
        other => Err(Error::Config(format!("unknown net target {other:?}"))),
    }
}

/// Runs `instances` random checks of one target at relative tolerance `tol`.
pub fn run_target(target: &str, instances: usize, seed: u64, tol: f64) -> Result<TargetReport> {
    let idx = all_targets().position(|t| t == target).ok_or_else(|| {
        Error::Config(format!(
            "unknown gradcheck target {target:?}; expected one of {}",
            all_targets().collect::<Vec<_>>().join(", ")
        ))
    })?;
    let mut report = TargetReport {
        target: target.to_string(),
        instances,
        passed: 0,
        max_rel_err: 0.0,
        failure: None,
    };
    for i in 0..instances {
        let mut rng = keyed_rng(seed, &[purpose::GRADCHECK, idx as u64, i as u64]);
        let rep = if LOSS_TARGETS.contains(&target) {
            loss_instance(target, &mut rng, tol)?
        } else {
            net_instance(target, &mut rng, tol)?
        };
        report.max_rel_err = report.max_rel_err.max(rep.max_rel_err());
        if rep.passed() {
            report.passed += 1;
        } else if report.failure.is_none() {
            let why = rep
                .failure
                .clone()
                .unwrap_or_else(|| format!("rel err {:.3e}", rep.max_rel_err()));
            report.failure = Some(format!("instance {i}: {why}"));
        }
    }
    Ok(report)
}
