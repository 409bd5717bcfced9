//! Run configuration: one strict JSON document for every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use cva_core::losses::ConsisKind;
use cva_core::nets::EncoderConfig;
use cva_core::train::{ProbeConfig, TrainConfig};
use cva_core::views::SamplerConfig;
use cva_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Directory written by `cva synth`.
    pub data: PathBuf,
    /// Directory receiving traces and checkpoints.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "runs".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Consistency {
    #[serde(rename = "none")]
    None,
    /// Symmetrised cosine regression inside the overlap.
    #[serde(rename = "cva")]
    Cva,
    /// Symmetrised NT-Xent inside the overlap.
    #[serde(rename = "c-cva")]
    CCva,
    #[serde(rename = "gram")]
    Gram,
}

/// Shorthand for the loss family; overrides the matching `train.weights`
/// fields. Masking is controlled by `train.mask_ratio` (0 gives a plain
/// autoencoder).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Objective {
    pub consis: Consistency,
    pub contrastive: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides `train.seed` and `probe.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub sampler: SamplerConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub objective: Option<Objective>,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolved()
    }

    /// Folds the seed and the objective block into the sub-configs and
    /// validates them.
    pub fn resolved(mut self) -> Result<Self, Error> {
        self.train.seed = self.seed;
        self.probe.seed = self.seed;
        if let Some(obj) = self.objective {
            let w = &mut self.train.weights;
            match obj.consis {
                Consistency::None => w.lambda_consis = 0.0,
                kind => {
                    w.consis_kind = match kind {
                        Consistency::Cva => ConsisKind::Cosine,
                        Consistency::CCva => ConsisKind::Ntxent,
                        _ => ConsisKind::Gram,
                    };
                    if w.lambda_consis == 0.0 {
                        w.lambda_consis = 1.0;
                    }
                }
            }
            if !obj.contrastive {
                w.lambda_con = 0.0;
            } else if w.lambda_con == 0.0 {
                w.lambda_con = 1.0;
            }
        }
        self.sampler.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        if self.sampler.crop_size != self.encoder.crop_size {
            return Err(Error::Config(format!(
                "sampler.crop_size {:?} differs from encoder.crop_size {:?}",
                self.sampler.crop_size, self.encoder.crop_size
            )));
        }
        Ok(self)
    }
}

/// JSON Schema derived from the default document: every object is closed
/// and every leaf carries its default.
pub fn schema() -> Value {
    let mut defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    defaults["objective"] = json!({"consis": "cva", "contrastive": true});
    let mut root = node(&defaults);
    root["$schema"] = json!("https://json-schema.org/draft/2020-12/schema");
    root["title"] = json!("cva run configuration");
    root["properties"]["objective"]["type"] = json!(["object", "null"]);
    root["properties"]["objective"]["default"] = Value::Null;
    root["properties"]["objective"]["properties"]["consis"]["enum"] = json!(["none", "cva", "c-cva", "gram"]);
    root["properties"]["objective"]["required"] = json!(["consis", "contrastive"]);
    root
}

fn node(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let props: Map<String, Value> = m.iter().map(|(k, v)| (k.clone(), node(v))).collect();
            json!({"type": "object", "additionalProperties": false, "properties": props})
        }
        Value::Array(a) => {
            let items = a.first().map(node).unwrap_or(json!({}));
            json!({"type": "array", "items": items, "default": v})
        }
        Value::Number(n) if n.is_u64() || n.is_i64() => json!({"type": "integer", "default": v}),
        Value::Number(_) => json!({"type": "number", "default": v}),
        Value::Bool(_) => json!({"type": "boolean", "default": v}),
        Value::String(_) => json!({"type": "string", "default": v}),
        Value::Null => json!({"default": null}),
    }
}
