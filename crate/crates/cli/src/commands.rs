//! Subcommand bodies. Each returns what it wrote so `main` can report it.

use std::fs;
use std::path::{Path, PathBuf};

use cva_core::consts::GRAD_TOL;
use cva_core::gradsuite::{all_targets, run_target, TargetReport};
use cva_core::nets::load_checkpoint;
use cva_core::rank::{load_metrics_csv, rank, rank_report_write, RankReport, Scheme};
use cva_core::synth::{synth_generate, SynthSpec};
use cva_core::train::{load_warm_start, seg_probe, train_loop, ProbeReport, RunOutputs, Stage, TrainState};
use cva_core::volume::{load_raw, save_raw, Volume};
use cva_core::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "cva-synth-1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub spec: SynthSpec,
    pub entries: Vec<Entry>,
}

/// File stems relative to the manifest directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub image: String,
    pub label: String,
    pub seed: u64,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Volume `i` uses seed `seed + i`.
pub fn synth(out: &Path, count: usize, seed: u64, dims: [usize; 3], n_blobs: usize) -> Result<PathBuf, CliError> {
    fs::create_dir_all(out).map_err(io(out))?;
    let base = SynthSpec {
        seed,
        dims,
        n_blobs,
        ..Default::default()
    };
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let s = seed.wrapping_add(i as u64);
        let (image, label) = synth_generate(&SynthSpec {
            seed: s,
            ..base.clone()
        })?;
        let (img, lab) = (format!("image_{i:04}"), format!("label_{i:04}"));
        save_raw(&out.join(&img), &image)?;
        save_raw(&out.join(&lab), &label)?;
        entries.push(Entry {
            image: img,
            label: lab,
            seed: s,
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        spec: base,
        entries,
    };
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io(&path))?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(Volume, Volume)>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if m.format != MANIFEST_FORMAT {
        return Err(Error::Format {
            path,
            msg: format!("format {:?}, expected {MANIFEST_FORMAT:?}", m.format),
        }
        .into());
    }
    m.entries
        .iter()
        .map(|e| Ok((load_raw(&dir.join(&e.image))?, load_raw(&dir.join(&e.label))?)))
        .collect()
}

pub struct PretrainArgs<'a> {
    pub stage: Stage,
    pub warm_start: Option<&'a Path>,
    pub from_scratch: bool,
    pub data: Option<&'a Path>,
    pub out: Option<&'a Path>,
}

pub fn pretrain(cfg: &RunConfig, args: &PretrainArgs<'_>) -> Result<RunOutputs, CliError> {
    if args.stage == Stage::Two && args.warm_start.is_none() && !args.from_scratch {
        return Err(CliError::Usage(
            "--stage two needs --warm-start <checkpoint> or an explicit --from-scratch".into(),
        ));
    }
    let data_dir = args.data.unwrap_or(&cfg.paths.data);
    let images: Vec<Volume> = load_dataset(data_dir)?.into_iter().map(|(img, _)| img).collect();
    if images.is_empty() {
        return Err(CliError::Usage(format!("no volumes listed in {}", data_dir.display())));
    }
    let state = match args.warm_start {
        Some(stem) => load_warm_start(stem, &cfg.encoder, &cfg.train)?,
        None => TrainState::init(&cfg.encoder, &cfg.train)?,
    };
    let out_dir = args.out.unwrap_or(&cfg.paths.out);
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let name = args.stage.name();
    let outputs = RunOutputs {
        trace: out_dir.join(format!("stage_{name}.csv")),
        checkpoint: out_dir.join(format!("stage_{name}")),
    };
    train_loop(
        state,
        &cfg.train,
        &cfg.encoder,
        &cfg.sampler,
        args.stage,
        &images,
        Some(&outputs),
    )?;
    Ok(outputs)
}

/// The first half of the dataset (rounded up) trains the head, the rest is scored.
pub fn probe(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<ProbeReport, CliError> {
    let params = load_checkpoint(ckpt)?.student;
    let pairs = load_dataset(data)?;
    if pairs.len() < 2 {
        return Err(CliError::Usage(format!(
            "probe needs at least 2 volumes in {}, found {}",
            data.display(),
            pairs.len()
        )));
    }
    let split = pairs.len().div_ceil(2);
    let report = seg_probe(&params, &cfg.encoder, &pairs[..split], &pairs[split..], &cfg.probe)?;
    let mut text = String::from("class,dsc\n");
    for (c, d) in report.per_class.iter().enumerate() {
        let cell = d.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!("{c},{cell}\n"));
    }
    text.push_str(&format!("mean,{}\n", report.mean));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(out, text).map_err(io(out))?;
    Ok(report)
}

pub fn rank_cmd(scheme: Scheme, input: &Path, out: &Path) -> Result<RankReport, CliError> {
    let table = load_metrics_csv(input)?;
    let report = rank(&table, scheme);
    rank_report_write(&report, out)?;
    Ok(report)
}

pub fn gradcheck(target: &str, instances: usize, seed: u64) -> Result<Vec<TargetReport>, CliError> {
    let targets: Vec<&str> = if target == "all" {
        all_targets().collect()
    } else {
        vec![target]
    };
    targets
        .into_iter()
        .map(|t| run_target(t, instances, seed, GRAD_TOL).map_err(CliError::from))
        .collect()
}
