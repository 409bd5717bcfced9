//! Toy student/teacher networks.
//!
//! Two encoder paths share the same heads. The conv path is a stack of
//! stride-2 3×3×3 convolutions whose stage outputs are resized to a common
//! grid and concatenated. The token path embeds non-overlapping patches,
//! mixes them with a token MLP and a per-token MLP, and lays the tokens back
//! out on their grid. Projector, predictor and decoder act position-wise.

mod checkpoint;
mod layers;
mod mask;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, name_key, purpose};
use crate::tensor::{DType, Tape, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use layers::{
    decode_pixels, encode, fuse_multistage, global_head, patch_index, pool, position_mlp, predict, project, tokenize,
    untokenize,
};
pub use mask::{make_mask, Mask};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderPath {
    #[default]
    Conv,
    Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub path: EncoderPath,
    pub in_channels: usize,
    pub crop_size: [usize; 3],
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub patch: usize,
    pub embed_dim: usize,
    pub fuse_res: [usize; 3],
    pub proj_dim: usize,
    pub proj_hidden: usize,
    pub pred_hidden: usize,
    pub decoder_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            path: EncoderPath::Conv,
            in_channels: 1,
            crop_size: [32; 3],
            channels: vec![8, 16, 32],
            strides: vec![2, 2, 2],
            patch: 8,
            embed_dim: 32,
            fuse_res: [8; 3],
            proj_dim: 32,
            proj_hidden: 32,
            pred_hidden: 16,
            decoder_hidden: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels.len() != self.strides.len() {
            return bad(format!(
                "{} stage channels but {} strides",
                self.channels.len(),
                self.strides.len()
            ));
        }
        if self.channels.is_empty() || self.channels.contains(&0) || self.strides.contains(&0) {
            return bad("conv stages need positive channels and strides".into());
        }
        if self.in_channels == 0 || self.crop_size.contains(&0) || self.fuse_res.contains(&0) {
            return bad("in_channels, crop_size and fuse_res must be positive".into());
        }
        if [
            self.embed_dim,
            self.proj_dim,
            self.proj_hidden,
            self.pred_hidden,
            self.decoder_hidden,
        ]
        .contains(&0)
        {
            return bad("head widths must be positive".into());
        }
        if self.patch == 0 || self.crop_size.iter().any(|c| c % self.patch != 0) {
            return bad(format!(
                "crop_size {:?} not divisible by patch {}",
                self.crop_size, self.patch
            ));
        }
        if self.path == EncoderPath::Conv {
            let total: usize = self.strides.iter().product();
            if self.crop_size.iter().any(|c| c % total != 0) {
                return bad(format!(
                    "crop_size {:?} not divisible by cumulative stride {total}",
                    self.crop_size
                ));
            }
        }
        Ok(())
    }

    /// Patch grid shared by masking and the token path.
    pub fn grid(&self) -> [usize; 3] {
        self.crop_size.map(|c| c / self.patch)
    }

    pub fn n_cells(&self) -> usize {
        self.grid().iter().product()
    }

    /// Channel count of the fused map.
    pub fn fused_channels(&self) -> usize {
        match self.path {
            EncoderPath::Conv => self.channels.iter().sum(),
            EncoderPath::Token => self.embed_dim,
        }
    }

    /// Parameter registry: names and shapes, in a stable order.
    pub fn registry(&self) -> Vec<(String, Vec<usize>)> {
        let mut r: Vec<(String, Vec<usize>)> = Vec::new();
        let mut add = |name: &str, shape: &[usize]| r.push((name.to_string(), shape.to_vec()));
        let c_in = self.in_channels;
        match self.path {
            EncoderPath::Conv => {
                let mut prev = c_in;
                for (i, &c) in self.channels.iter().enumerate() {
                    add(&format!("enc.s{i}.w"), &[c, prev, 3, 3, 3]);
                    add(&format!("enc.s{i}.b"), &[c]);
                    prev = c;
                }
                add("mask.token", &[c_in]);
            }
            EncoderPath::Token => {
                let (d, n) = (self.embed_dim, self.n_cells());
                add("tok.embed.w", &[c_in * self.patch.pow(3), d]);
                add("tok.embed.b", &[d]);
                add("tok.mix.w", &[n, n]);
                add("tok.mix.b", &[n]);
                add("tok.mlp.w1", &[d, d]);
                add("tok.mlp.b1", &[d]);
                add("tok.mlp.w2", &[d, d]);
                add("tok.mlp.b2", &[d]);
                add("mask.token", &[1, d]);
            }
        }
        let (f, p, ph, qh, dh) = (
            self.fused_channels(),
            self.proj_dim,
            self.proj_hidden,
            self.pred_hidden,
            self.decoder_hidden,
        );
        for (pre, a, h, b) in [
            ("proj", f, ph, p),
            ("pred", p, qh, p),
            ("gproj", f, ph, p),
            ("gpred", p, qh, p),
        ] {
            add(&format!("{pre}.w1"), &[h, a]);
            add(&format!("{pre}.b1"), &[h]);
            add(&format!("{pre}.w2"), &[b, h]);
            add(&format!("{pre}.b2"), &[b]);
        }
        add("dec.w1", &[dh, f]);
        add("dec.b1", &[dh]);
        add("dec.w2", &[c_in, dh]);
        add("dec.b2", &[c_in]);
        r
    }
}

/// Named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// He-normal weights, zero biases and mask tokens. Each tensor has its
    /// own keyed stream, so adding a parameter never shifts the others.
    pub fn init(cfg: &EncoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.registry() {
            let is_weight = name.ends_with(".w") || name.ends_with(".w1") || name.ends_with(".w2");
            let t = if is_weight {
                let fan_in: usize = if name.starts_with("enc.") {
                    shape[1..].iter().product()
                } else if name.starts_with("tok.") {
                    shape[0]
                } else {
                    shape[1]
                };
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = keyed_rng(seed, &[purpose::INIT, name_key(&name)]);
                let normal = Normal::new(0.0, std).expect("positive std");
                let n: usize = shape.iter().product();
                Tensor::with_dtype(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect(), dtype)?
            } else {
                Tensor::zeros(&shape).cast(dtype)
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    /// Same registry with every value replaced by `f(name, tensor)`.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Tensor) -> Self {
        Self {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), f(k, v))).collect(),
        }
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let old = self.get(name)?;
        if old.shape() != value.shape() {
            return Err(Error::dim("set parameter", old.shape(), value.shape()));
        }
        self.tensors.insert(name.to_string(), value);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn dtype(&self) -> DType {
        self.tensors.values().next().map_or(DType::F64, Tensor::dtype)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn registry(&self) -> Vec<(String, Vec<usize>)> {
        self.tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.shape().to_vec()))
            .collect()
    }

    /// Errors unless both sets have identical names and shapes.
    pub fn check_registry(&self, other: &ModelParams) -> Result<()> {
        if self.registry() != other.registry() {
            let a: Vec<_> = self.names().collect();
            let b: Vec<_> = other.names().collect();
            let diff: Vec<_> = a
                .iter()
                .filter(|n| !b.contains(n))
                .chain(b.iter().filter(|n| !a.contains(n)))
                .collect();
            return Err(Error::Contract(format!(
                "parameter registries differ (names only in one side: {diff:?}, or shapes differ)"
            )));
        }
        Ok(())
    }

    /// Puts every tensor on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'t>)> {
        self.vars.iter()
    }

    /// Replaces one bound parameter, e.g. with a gradient-check leaf.
    pub fn with_var(mut self, name: &str, var: Var<'t>) -> Self {
        self.vars.insert(name.to_string(), var);
        self
    }
}
