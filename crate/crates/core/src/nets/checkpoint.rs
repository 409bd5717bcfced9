//! Checkpoints: `<stem>.json` manifest plus `<stem>.bin` payload.
//!
//! The manifest lists every tensor as `{name, shape, offset}` with offsets in
//! elements; names carry a `student/` or `teacher/` prefix. The payload is
//! the concatenation of all tensors as little-endian values of the manifest
//! dtype.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const CHECKPOINT_FORMAT: &str = "cva-checkpoint-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub step: u64,
    pub student: ModelParams,
    pub teacher: Option<ModelParams>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    dtype: DType,
    stage: String,
    step: u64,
    tensors: Vec<Entry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let with = |ext: &str| {
        let mut s = stem.as_os_str().to_owned();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bin"))
}

pub fn save_checkpoint(stem: &Path, ckpt: &Checkpoint) -> Result<()> {
    let dtype = ckpt.student.dtype();
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut offset = 0;
    let sets = [("student", Some(&ckpt.student)), ("teacher", ckpt.teacher.as_ref())];
    for (prefix, params) in sets {
        for (name, t) in params.into_iter().flat_map(ModelParams::iter) {
            if t.dtype() != dtype {
                return Err(Error::Contract(format!(
                    "{prefix}/{name} has dtype {:?}, expected {dtype:?}",
                    t.dtype()
                )));
            }
            tensors.push(Entry {
                name: format!("{prefix}/{name}"),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
            for &v in t.data() {
                match dtype {
                    DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        dtype,
        stage: ckpt.stage.clone(),
        step: ckpt.step,
        tensors,
    };
    let (json, bin) = paths(stem);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    fs::write(&bin, payload).map_err(|e| Error::io(&bin, e))
}

pub fn load_checkpoint(stem: &Path) -> Result<Checkpoint> {
    let (json, bin) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let fmt_err = |msg: String| Error::Format {
        path: json.clone(),
        msg,
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| fmt_err(e.to_string()))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(fmt_err(format!("unknown format {:?}", manifest.format)));
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let width = manifest.dtype.size_of();
    let total: usize = manifest.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * width {
        return Err(Error::Format {
            path: bin,
            msg: format!("expected {} bytes, found {}", total * width, bytes.len()),
        });
    }
    let value = |i: usize| -> f64 {
        let b = &bytes[i * width..(i + 1) * width];
        match manifest.dtype {
            DType::F64 => f64::from_le_bytes(b.try_into().expect("8 bytes")),
            DType::F32 => f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64,
        }
    };
    let mut student = BTreeMap::new();
    let mut teacher = BTreeMap::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset + n > total {
            return Err(fmt_err(format!("tensor {} overruns the payload", e.name)));
        }
        let t = Tensor::with_dtype(&e.shape, (e.offset..e.offset + n).map(value).collect(), manifest.dtype)?;
        if !t.is_finite() {
            return Err(Error::Data(format!("checkpoint tensor {} is not finite", e.name)));
        }
        match e.name.split_once('/') {
            Some(("student", rest)) => student.insert(rest.to_string(), t),
            Some(("teacher", rest)) => teacher.insert(rest.to_string(), t),
            _ => {
                return Err(fmt_err(format!(
                    "tensor name {:?} lacks a student/teacher prefix",
                    e.name
                )))
            }
        };
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        step: manifest.step,
        student: ModelParams::from_map(student),
        teacher: (!teacher.is_empty()).then(|| ModelParams::from_map(teacher)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{EncoderConfig, EncoderPath};

    fn bitwise_same(a: &ModelParams, b: &ModelParams) -> bool {
        a.registry() == b.registry() && a.iter().zip(b.iter()).all(|((_, x), (_, y))| x.bitwise_eq(y))
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        for (path, dtype) in [(EncoderPath::Conv, DType::F64), (EncoderPath::Token, DType::F32)] {
            let cfg = EncoderConfig {
                path,
                ..Default::default()
            };
            let student = ModelParams::init(&cfg, 1, dtype).unwrap();
            let teacher = ModelParams::init(&cfg, 2, dtype).unwrap();
            let ckpt = Checkpoint {
                stage: "two".into(),
                step: 17,
                student,
                teacher: Some(teacher),
            };
            let stem = dir.path().join(format!("{path:?}"));
            save_checkpoint(&stem, &ckpt).unwrap();
            let back = load_checkpoint(&stem).unwrap();
            assert_eq!(back.stage, "two");
            assert_eq!(back.step, 17);
            assert!(bitwise_same(&back.student, &ckpt.student));
            assert!(bitwise_same(
                back.teacher.as_ref().unwrap(),
                ckpt.teacher.as_ref().unwrap()
            ));
        }
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("c");
        let ckpt = Checkpoint {
            stage: "one".into(),
            step: 0,
            student: ModelParams::init(&EncoderConfig::default(), 1, DType::F64).unwrap(),
            teacher: None,
        };
        save_checkpoint(&stem, &ckpt).unwrap();
        let bin = dir.path().join("c.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(Error::Format { .. })));
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
