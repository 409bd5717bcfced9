//! Dice metric and a linear segmentation probe on frozen fused features.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::AdamW;
use crate::error::{Error, Result};
use crate::nets::{encode, fuse_multistage, EncoderConfig, ModelParams};
use crate::rng::{keyed_rng, purpose};
use crate::tensor::{DType, Tape, Tensor};
use crate::volume::Volume;

/// `2|P∩T| / (|P| + |T|)` for label `class`; 1 when both sets are empty.
pub fn dice_metric(pred: &Volume, truth: &Volume, class: usize) -> Result<f64> {
    if pred.dims() != truth.dims() || pred.channels() != truth.channels() {
        return Err(Error::Contract(format!(
            "dice on mismatched volumes {:?} and {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    let c = class as f32;
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let (ip, it) = (p == c, t == c);
        inter += (ip && it) as usize;
        np += ip as usize;
        nt += it as usize;
    }
    Ok(dice_from_counts(inter, np, nt))
}

fn dice_from_counts(inter: usize, np: usize, nt: usize) -> f64 {
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Full-batch optimisation steps.
    pub epochs: usize,
    pub lr: f64,
    pub crops_per_volume: usize,
    /// Number of label values, background included.
    pub classes: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr: 0.05,
            crops_per_volume: 4,
            classes: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// DSC per label value; `None` when the class never occurs in the
    /// training labels.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined foreground classes.
    pub mean: f64,
}

struct Sample {
    features: Tensor,
    labels: Vec<usize>,
}

fn crops(data: &[(Volume, Volume)], crop: [usize; 3], cfg: &ProbeConfig, split: u64) -> Result<Vec<(Volume, Volume)>> {
    let mut out = Vec::new();
    for (vid, (img, lab)) in data.iter().enumerate() {
        if img.dims() != lab.dims() {
            return Err(Error::Contract(format!(
                "image {:?} and labels {:?} differ",
                img.dims(),
                lab.dims()
            )));
        }
        let dims = img.dims();
        if (0..3).any(|a| dims[a] < crop[a]) {
            return Err(Error::Sampling(format!("volume {dims:?} smaller than crop {crop:?}")));
        }
        let mut rng = keyed_rng(cfg.seed, &[purpose::PROBE, split, vid as u64]);
        for _ in 0..cfg.crops_per_volume {
            let o = [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - crop[a]));
            out.push((img.extract(o, crop)?, lab.extract(o, crop)?));
        }
    }
    Ok(out)
}

fn featurize(
    params: &ModelParams,
    enc: &EncoderConfig,
    pairs: &[(Volume, Volume)],
    classes: usize,
) -> Result<Vec<Sample>> {
    pairs
        .iter()
        .map(|(img, lab)| {
            let tape = Tape::new();
            let b = params.bind(&tape, false);
            let x = tape.constant(img.to_tensor(params.dtype()));
            let f = fuse_multistage(&encode(&b, enc, x, None)?, enc.fuse_res)?
                .value()
                .cast(DType::F64);
            let labels = lab
                .data()
                .iter()
                .map(|&v| {
                    let c = v.round();
                    if c < 0.0 || c as usize >= classes || c != v {
                        Err(Error::Data(format!("label {v} outside 0..{classes}")))
                    } else {
                        Ok(c as usize)
                    }
                })
                .collect::<Result<_>>()?;
            Ok(Sample { features: f, labels })
        })
        .collect()
}

/// Per-channel mean and std over all training feature voxels.
fn channel_stats(samples: &[Sample]) -> Vec<(f64, f64)> {
    let c = samples[0].features.shape()[0];
    let n = samples[0].features.numel() / c;
    (0..c)
        .map(|ch| {
            let vals = samples.iter().flat_map(|s| &s.features.data()[ch * n..(ch + 1) * n]);
            let (mut sum, mut sq, mut cnt) = (0.0, 0.0, 0.0);
            for &v in vals {
                sum += v;
                sq += v * v;
                cnt += 1.0;
            }
            let mean = sum / cnt;
            let std = (sq / cnt - mean * mean).max(0.0).sqrt();
            (mean, if std > 1e-8 { std } else { 1.0 })
        })
        .collect()
}

fn standardize(s: &mut Sample, stats: &[(f64, f64)]) {
    let c = stats.len();
    let n = s.features.numel() / c;
    let data = s.features.data().iter().enumerate().map(|(i, v)| {
        let (m, sd) = stats[i / n];
        (v - m) / sd
    });
    s.features = Tensor::new(s.features.shape(), data.collect()).expect("same shape");
}

/// Trains a 1×1×1 conv head on frozen fused features of `params` with a
/// class-balanced cross-entropy on upsampled logits, then reports DSC on
/// crops of `eval`. Deterministic under `cfg.seed`.
pub fn seg_probe(
    params: &ModelParams,
    enc: &EncoderConfig,
    train: &[(Volume, Volume)],
    eval: &[(Volume, Volume)],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    enc.validate()?;
    if cfg.classes < 2 || cfg.crops_per_volume == 0 || train.is_empty() || eval.is_empty() {
        return Err(Error::Config(
            "probe needs >= 2 classes, crops and both data splits".into(),
        ));
    }
    let k = cfg.classes;
    let crop = enc.crop_size;
    let n_vox: usize = crop.iter().product();
    let mut train_s = featurize(params, enc, &crops(train, crop, cfg, 0)?, k)?;
    let mut eval_s = featurize(params, enc, &crops(eval, crop, cfg, 1)?, k)?;
    let stats = channel_stats(&train_s);
    train_s
        .iter_mut()
        .chain(eval_s.iter_mut())
        .for_each(|s| standardize(s, &stats));

    let mut counts = vec![0usize; k];
    for s in &train_s {
        for &l in &s.labels {
            counts[l] += 1;
        }
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let total: usize = counts.iter().sum();
    let class_w: Vec<f64> = counts
        .iter()
        .map(|&c| {
            if c > 0 {
                total as f64 / (present * c as f64)
            } else {
                0.0
            }
        })
        .collect();

    let f = train_s[0].features.shape()[0];
    let mut head = ModelParams::from_map(BTreeMap::from([
        ("probe.w".to_string(), Tensor::zeros(&[k, f])),
        ("probe.b".to_string(), Tensor::zeros(&[k])),
    ]));
    let mut opt = AdamW::new(0.0);
    let targets: Vec<(Arc<[usize]>, Tensor)> = train_s
        .iter()
        .map(|s| {
            let idx: Arc<[usize]> = s.labels.iter().enumerate().map(|(i, &l)| i * k + l).collect();
            let w: Vec<f64> = s.labels.iter().map(|&l| class_w[l]).collect();
            (idx, Tensor::new(&[n_vox], w).expect("voxel weights"))
        })
        .collect();
    let weight_sum: f64 = targets.iter().map(|(_, w)| w.sum()).sum();

    for _ in 0..cfg.epochs {
        let tape = Tape::new();
        let b = head.bind(&tape, true);
        let (w, bias) = (b.var("probe.w")?, b.var("probe.b")?);
        let mut loss = None;
        for (s, (idx, vw)) in train_s.iter().zip(&targets) {
            let fe = s.features.shape();
            let x = tape.constant(s.features.reshape(&[f, fe[1] * fe[2] * fe[3]])?);
            let up = w
                .matmul(x)?
                .add_bias(bias, 0)?
                .reshape(&[k, fe[1], fe[2], fe[3]])?
                .resize_trilinear(crop)?
                .reshape(&[k, n_vox])?
                .transpose2d()?
                .log_softmax_last()?;
            let nll = up
                .gather(idx.clone(), &[n_vox])?
                .mul(tape.constant(vw.clone()))?
                .sum()
                .neg();
            loss = Some(match loss {
                Some(l) => nll.add(l)?,
                None => nll,
            });
        }
        let loss = loss.expect("non-empty train set").scale(1.0 / weight_sum);
        let g = tape.backward(loss)?;
        let grads = b
            .iter()
            .filter_map(|(name, v)| g.get(*v).map(|t| (name.clone(), t.clone())))
            .collect();
        opt.step(&mut head, &grads, cfg.lr)?;
    }

    let (mut inter, mut np, mut nt) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for s in &eval_s {
        let tape = Tape::new();
        let b = head.bind(&tape, false);
        let fe = s.features.shape();
        let x = tape.constant(s.features.reshape(&[f, fe[1] * fe[2] * fe[3]])?);
        let up = b
            .var("probe.w")?
            .matmul(x)?
            .add_bias(b.var("probe.b")?, 0)?
            .reshape(&[k, fe[1], fe[2], fe[3]])?
            .resize_trilinear(crop)?
            .value();
        for (v, &t) in s.labels.iter().enumerate() {
            let p = (0..k)
                .max_by(|&a, &c| {
                    up.data()[a * n_vox + v]
                        .total_cmp(&up.data()[c * n_vox + v])
                        .then(c.cmp(&a))
                })
                .expect("k >= 2");
            np[p] += 1;
            nt[t] += 1;
            inter[p] += (p == t) as usize;
        }
    }
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| (counts[c] > 0).then(|| dice_from_counts(inter[c], np[c], nt[c])))
        .collect();
    let fg: Vec<f64> = per_class[1..].iter().flatten().copied().collect();
    let mean = if fg.is_empty() {
        per_class[0].unwrap_or(0.0)
    } else {
        fg.iter().sum::<f64>() / fg.len() as f64
    };
    Ok(ProbeReport { per_class, mean })
}
