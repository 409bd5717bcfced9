//! Student/teacher pretraining loop.
//!
//! One step: the student encodes both masked crops on a gradient tape, the
//! teacher encodes both unmasked crops on its own tape whose outputs enter
//! the student tape as constants, the weighted objective is reduced and
//! differentiated, AdamW updates the student, then the teacher tracks the
//! student by EMA.

mod optim;
mod probe;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consts::EMA_DECAY;
use crate::error::{Error, Result};
use crate::losses::{
    align_cells, global_contrastive, gram_loss, recon_loss, sym_consistency, total_objective, Breakdown, ConsisKind,
    LossWeights, Term,
};
use crate::nets::{
    decode_pixels, encode, fuse_multistage, global_head, load_checkpoint, make_mask, pool, predict, project,
    save_checkpoint, Bound, Checkpoint, EncoderConfig, Mask, ModelParams,
};
use crate::rng::{keyed_rng, purpose};
use crate::tensor::{DType, Tape, Tensor, Var};
use crate::views::{generate_pair, Box3, SamplerConfig, ViewPair};
use crate::volume::Volume;

pub use optim::{ema_update, AdamW, Schedule};
pub use probe::{dice_metric, seg_probe, ProbeConfig, ProbeReport};

pub const TRACE_HEADER: [&str; 6] = ["step", "total", "recon", "consis", "con", "lr"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Reconstruction only.
    #[default]
    One,
    /// Full objective.
    Two,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "one",
            Stage::Two => "two",
        }
    }

    /// Weights actually used in this stage.
    pub fn weights(self, w: &LossWeights) -> LossWeights {
        match self {
            Stage::One => LossWeights {
                lambda_consis: 0.0,
                lambda_con: 0.0,
                ..w.clone()
            },
            Stage::Two => w.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub ema_decay: f64,
    pub mask_ratio: f64,
    pub lr: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub weights: LossWeights,
    /// Output resolution of ROI alignment inside Ω.
    pub roi_res: [usize; 3],
    pub seed: u64,
    pub precision: DType,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            steps_per_epoch: 50,
            batch_size: 4,
            ema_decay: EMA_DECAY,
            mask_ratio: 0.6,
            lr: 2e-3,
            schedule: Schedule::Cosine,
            weight_decay: 1e-4,
            weights: LossWeights::default(),
            roi_res: [4; 3],
            seed: 0,
            precision: DType::F64,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad(format!("ema_decay {} outside [0, 1]", self.ema_decay));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio {} outside [0, 1]", self.mask_ratio));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.weights.lambda_con > 0.0 && self.batch_size < 2 {
            return bad("the global contrastive term needs batch_size >= 2".into());
        }
        if self.roi_res.contains(&0) {
            return bad(format!("roi_res {:?} must be positive", self.roi_res));
        }
        self.weights.validate()
    }

    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

/// One row of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub consis: f64,
    pub con: f64,
    pub lr: f64,
}

impl LossRecord {
    fn new(step: u64, b: Breakdown, lr: f64) -> Self {
        Self {
            step,
            total: b.total,
            recon: b.recon,
            consis: b.consis,
            con: b.con,
            lr,
        }
    }
}

pub fn write_trace(path: &Path, trace: &[LossRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(TRACE_HEADER).map_err(io)?;
    for r in trace {
        w.serialize((r.step, r.total, r.recon, r.consis, r.con, r.lr))
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_trace(path: &Path) -> Result<Vec<LossRecord>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let header = rd
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", TRACE_HEADER.join(",")),
        });
    }
    rd.deserialize()
        .enumerate()
        .map(|(i, r)| {
            r.map_err(|e| Error::Parse {
                line: i + 2,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Student, teacher and optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub student: ModelParams,
    pub teacher: ModelParams,
    pub opt: AdamW,
    pub step: u64,
}

impl TrainState {
    /// Fresh student; the teacher starts as an exact copy.
    pub fn init(enc: &EncoderConfig, cfg: &TrainConfig) -> Result<Self> {
        let student = ModelParams::init(enc, cfg.seed, cfg.precision)?;
        Ok(Self::from_student(student, cfg))
    }

    pub fn from_student(student: ModelParams, cfg: &TrainConfig) -> Self {
        Self {
            teacher: student.clone(),
            student,
            opt: AdamW::new(cfg.weight_decay),
            step: 0,
        }
    }

    /// Starts from a checkpoint's student, which must match `enc`.
    pub fn warm_start(ckpt: &Checkpoint, enc: &EncoderConfig, cfg: &TrainConfig) -> Result<Self> {
        let reference = ModelParams::init(enc, 0, cfg.precision)?;
        reference.check_registry(&ckpt.student)?;
        let student = ckpt.student.map(|_, t| t.cast(cfg.precision));
        Ok(Self::from_student(student, cfg))
    }
}

/// Teacher outputs for one crop, already ROI-aligned where needed.
struct TeacherView {
    proj_cells: Tensor,
    fused_cells: Tensor,
    global: Tensor,
}

fn fused<'t>(b: &Bound<'t>, enc: &EncoderConfig, x: Var<'t>, mask: Option<&Mask>) -> Result<Var<'t>> {
    fuse_multistage(&encode(b, enc, x, mask)?, enc.fuse_res)
}

fn teacher_view(
    params: &ModelParams,
    enc: &EncoderConfig,
    crop: &Tensor,
    omega: &Box3,
    roi: [usize; 3],
) -> Result<TeacherView> {
    let tape = Tape::new();
    let b = params.bind(&tape, false);
    let f = fused(&b, enc, tape.constant(crop.clone()), None)?;
    let h = project(&b, f)?;
    Ok(TeacherView {
        proj_cells: align_cells(h, omega, enc.crop_size, roi)?.value(),
        fused_cells: align_cells(f, omega, enc.crop_size, roi)?.value(),
        global: global_head(&b, "gproj", pool(f)?)?.value(),
    })
}

/// Mean cosine similarity between the teacher's projected features of the
/// two views inside Ω, over all pairs.
pub fn alignment_score(teacher: &ModelParams, enc: &EncoderConfig, pairs: &[ViewPair], roi: [usize; 3]) -> Result<f64> {
    let dtype = teacher.dtype();
    let mut sum = 0.0;
    for p in pairs {
        let a = teacher_view(teacher, enc, &p.crop1.to_tensor(dtype), &p.geometry.omega1, roi)?.proj_cells;
        let b = teacher_view(teacher, enc, &p.crop2.to_tensor(dtype), &p.geometry.omega2, roi)?.proj_cells;
        let d = a.shape()[1];
        let rows = a.data().chunks(d).zip(b.data().chunks(d));
        let mut acc = 0.0;
        for (x, y) in rows {
            let dot: f64 = x.iter().zip(y).map(|(u, v)| u * v).sum();
            let nx = x.iter().map(|u| u * u).sum::<f64>().sqrt();
            let ny = y.iter().map(|u| u * u).sum::<f64>().sqrt();
            acc += dot / (nx * ny).max(crate::consts::NORM_EPS);
        }
        sum += acc / a.shape()[0] as f64;
    }
    Ok(sum / pairs.len().max(1) as f64)
}

/// Mask for view `view` of batch item `item` at `step`; empty when the
/// ratio is 0.
pub fn step_mask(cfg: &TrainConfig, enc: &EncoderConfig, step: u64, item: usize, view: usize) -> Mask {
    let mut rng = keyed_rng(cfg.seed, &[purpose::MASK, step, item as u64, view as u64]);
    make_mask(enc.grid(), cfg.mask_ratio, &mut rng)
}

/// Runs one optimisation step on `batch` and returns its trace record.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    stage: Stage,
    batch: &[ViewPair],
) -> Result<LossRecord> {
    if batch.is_empty() {
        return Err(Error::Contract("train_step on an empty batch".into()));
    }
    let weights = stage.weights(&cfg.weights);
    let lr = cfg.schedule.lr(cfg.lr, state.step, cfg.total_steps().max(1));
    let dtype = cfg.precision;
    let step = state.step;
    let roi = cfg.roi_res;
    let crop_ext = enc.crop_size;

    let crops: Vec<[Tensor; 2]> = batch
        .iter()
        .map(|p| [p.crop1.to_tensor(dtype), p.crop2.to_tensor(dtype)])
        .collect();
    let omegas: Vec<[Box3; 2]> = batch.iter().map(|p| [p.geometry.omega1, p.geometry.omega2]).collect();

    let need_teacher = weights.lambda_consis > 0.0 || weights.lambda_con > 0.0;
    let teacher: Vec<[TeacherView; 2]> = if need_teacher {
        let views: Vec<TeacherView> = (0..batch.len() * 2)
            .into_par_iter()
            .map(|k| teacher_view(&state.teacher, enc, &crops[k / 2][k % 2], &omegas[k / 2][k % 2], roi))
            .collect::<Result<_>>()?;
        let mut it = views.into_iter();
        (0..batch.len())
            .map(|_| [it.next().expect("two views"), it.next().expect("two views")])
            .collect()
    } else {
        Vec::new()
    };

    let tape = Tape::new();
    let b = state.student.bind(&tape, true);
    let masks: Vec<[Mask; 2]> = (0..batch.len())
        .map(|i| [0, 1].map(|v| step_mask(cfg, enc, step, i, v)))
        .collect();
    let inputs: Vec<[Var; 2]> = crops
        .iter()
        .map(|c| [tape.constant(c[0].clone()), tape.constant(c[1].clone())])
        .collect();
    let student: Vec<[Var; 2]> = inputs
        .iter()
        .zip(&masks)
        .map(|(x, m)| Ok([fused(&b, enc, x[0], Some(&m[0]))?, fused(&b, enc, x[1], Some(&m[1]))?]))
        .collect::<Result<_>>()?;
    let constant = |t: &Tensor| tape.constant(t.clone());

    let recon: Term = Box::new(|| {
        let mut terms = Vec::new();
        for ((f, x), m) in student.iter().zip(&inputs).zip(&masks) {
            for v in 0..2 {
                let pred = decode_pixels(&b, f[v], crop_ext)?;
                let vm = m[v].voxel_mask(enc.patch, enc.in_channels, crop_ext)?;
                terms.push(recon_loss(
                    pred,
                    x[v],
                    Some(&vm),
                    weights.recon_kind,
                    weights.huber_delta,
                )?);
            }
        }
        mean_of(&terms)
    });

    let consis: Term = Box::new(|| {
        if weights.consis_kind == ConsisKind::Gram {
            let mut terms = Vec::new();
            for ((f, om), t) in student.iter().zip(&omegas).zip(&teacher) {
                let z1 = align_cells(f[0], &om[0], crop_ext, roi)?;
                let z2 = align_cells(f[1], &om[1], crop_ext, roi)?;
                let a = gram_loss(z1, constant(&t[1].fused_cells))?;
                let c = gram_loss(z2, constant(&t[0].fused_cells))?;
                terms.push(a.scale(0.5).add(c.scale(0.5))?);
            }
            return mean_of(&terms);
        }
        let mut u = [Vec::new(), Vec::new()];
        let mut h = [Vec::new(), Vec::new()];
        for ((f, om), t) in student.iter().zip(&omegas).zip(&teacher) {
            for v in 0..2 {
                let pred = predict(&b, project(&b, f[v])?)?;
                u[v].push(align_cells(pred, &om[v], crop_ext, roi)?);
                h[v].push(constant(&t[v].proj_cells));
            }
        }
        sym_consistency(
            Var::concat(&u[0])?,
            Var::concat(&h[1])?,
            Var::concat(&u[1])?,
            Var::concat(&h[0])?,
            weights.consis_kind,
            weights.temperature,
        )
    });

    let con: Term = Box::new(|| {
        let mut p = [Vec::new(), Vec::new()];
        let mut z = [Vec::new(), Vec::new()];
        for (f, t) in student.iter().zip(&teacher) {
            for v in 0..2 {
                let g = global_head(&b, "gproj", pool(f[v])?)?;
                p[v].push(global_head(&b, "gpred", g)?);
                z[v].push(constant(&t[v].global));
            }
        }
        global_contrastive(
            Var::concat(&p[0])?,
            Var::concat(&z[1])?,
            Var::concat(&p[1])?,
            Var::concat(&z[0])?,
            weights.temperature,
        )
    });

    let objective = total_objective(&tape, &weights, Some(recon), Some(consis), Some(con))?;
    if let Some(term) = objective.breakdown.first_non_finite() {
        return Err(Error::NonFinite(format!("{term} loss at step {step}")));
    }
    let mut grads = BTreeMap::new();
    if objective.total.requires_grad() {
        let g = tape.backward(objective.total)?;
        for (name, var) in b.iter() {
            if let Some(t) = g.get(*var) {
                if !t.is_finite() {
                    return Err(Error::NonFinite(format!("gradient of {name} at step {step}")));
                }
                grads.insert(name.clone(), t.clone());
            }
        }
    }
    state.opt.step(&mut state.student, &grads, lr)?;
    state.teacher = ema_update(&state.teacher, &state.student, cfg.ema_decay)?;
    state.step += 1;
    Ok(LossRecord::new(step, objective.breakdown, lr))
}

fn mean_of<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let n = terms.len();
    let mut it = terms.iter().copied();
    let first = it.next().ok_or_else(|| Error::Contract("mean of no terms".into()))?;
    let sum = it.try_fold(first, |acc, t| acc.add(t))?;
    Ok(sum.scale(1.0 / n as f64))
}

/// Crop pairs for `step`: item `i` draws from volume `(step·B + i) mod n`
/// with draw index `step·B + i`, so batches depend only on the seed.
pub fn make_batch(data: &[Volume], sampler: &SamplerConfig, cfg: &TrainConfig, step: u64) -> Result<Vec<ViewPair>> {
    if data.is_empty() {
        return Err(Error::Contract("no training volumes".into()));
    }
    let bsz = cfg.batch_size as u64;
    (0..bsz)
        .into_par_iter()
        .map(|i| {
            let draw = step * bsz + i;
            let vid = draw % data.len() as u64;
            generate_pair(&data[vid as usize], sampler, cfg.seed, vid, draw)
        })
        .collect()
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub trace: PathBuf,
    pub checkpoint: PathBuf,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub trace: Vec<LossRecord>,
}

/// Runs `cfg.epochs × cfg.steps_per_epoch` steps of `stage` from `state`.
///
/// The trace CSV is rewritten after every epoch and a checkpoint holding
/// student and teacher is written at the end.
pub fn train_loop(
    mut state: TrainState,
    cfg: &TrainConfig,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    stage: Stage,
    data: &[Volume],
    out: Option<&RunOutputs>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc.validate()?;
    sampler.validate()?;
    if sampler.crop_size != enc.crop_size {
        return Err(Error::Config(format!(
            "sampler crop {:?} differs from encoder crop {:?}",
            sampler.crop_size, enc.crop_size
        )));
    }
    let mut trace = Vec::with_capacity(cfg.total_steps() as usize);
    for _ in 0..cfg.epochs {
        for _ in 0..cfg.steps_per_epoch {
            let batch = make_batch(data, sampler, cfg, state.step)?;
            trace.push(train_step(&mut state, cfg, enc, stage, &batch)?);
        }
        if let Some(o) = out {
            write_trace(&o.trace, &trace)?;
        }
    }
    if let Some(o) = out {
        if let Some(dir) = o.checkpoint.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_trace(&o.trace, &trace)?;
        save_checkpoint(
            &o.checkpoint,
            &Checkpoint {
                stage: stage.name().into(),
                step: state.step,
                student: state.student.clone(),
                teacher: Some(state.teacher.clone()),
            },
        )?;
    }
    Ok(TrainOutcome { state, trace })
}

/// Loads a checkpoint for warm-starting, checking it against `enc`.
pub fn load_warm_start(stem: &Path, enc: &EncoderConfig, cfg: &TrainConfig) -> Result<TrainState> {
    TrainState::warm_start(&load_checkpoint(stem)?, enc, cfg)
}

#[cfg(test)]
mod tests;
