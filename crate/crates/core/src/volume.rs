//! Volumes and their raw-binary persistence.
//!
//! On disk a volume is a pair `<name>.json` + `<name>.raw`. The sidecar holds
//! `dims`, `spacing`, `channels` and `dtype` (always `"f32le"`); the payload
//! is little-endian f32, channel-major, row-major spatial.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const RAW_DTYPE: &str = "f32le";

/// A channel-major 3D scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    channels: usize,
    dtype: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], channels: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || dims.contains(&0) {
            return Err(Error::Contract(format!(
                "volume needs channels >= 1 and non-empty dims, got {channels} x {dims:?}"
            )));
        }
        let expected = channels * dims.iter().product::<usize>();
        if data.len() != expected {
            return Err(Error::dim(
                "volume",
                &[channels, dims[0], dims[1], dims[2]],
                &[data.len()],
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite voxel at flat index {i}")));
        }
        Ok(Self {
            dims,
            spacing,
            channels,
            data,
        })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        Self::filled(dims, channels, 0.0)
    }

    pub fn filled(dims: [usize; 3], channels: usize, value: f32) -> Self {
        let n = channels * dims.iter().product::<usize>();
        Self::new(dims, [1.0; 3], channels, vec![value; n]).expect("valid filled volume")
    }

    pub fn from_fn(dims: [usize; 3], channels: usize, mut f: impl FnMut(usize, [usize; 3]) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
        for c in 0..channels {
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        data.push(f(c, [z, y, x]));
                    }
                }
            }
        }
        Self::new(dims, [1.0; 3], channels, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn index(&self, c: usize, p: [usize; 3]) -> usize {
        ((c * self.dims[0] + p[0]) * self.dims[1] + p[1]) * self.dims[2] + p[2]
    }

    pub fn get(&self, c: usize, p: [usize; 3]) -> f32 {
        self.data[self.index(c, p)]
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Payload size in bytes.
    pub fn byte_len(&self) -> usize {
        self.data.len() * 4
    }

    /// `[C, D, H, W]` tensor view of the data.
    pub fn to_tensor(&self, dtype: DType) -> Tensor {
        let shape = [self.channels, self.dims[0], self.dims[1], self.dims[2]];
        Tensor::with_dtype(&shape, self.data.iter().map(|&v| v as f64).collect(), dtype)
            .expect("volume shape matches data")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::dim("from_tensor", s, &[0, 0, 0, 0]));
        }
        Self::new(
            [s[1], s[2], s[3]],
            [1.0; 3],
            s[0],
            t.data().iter().map(|&v| v as f32).collect(),
        )
    }

    /// Copies the box `origin..origin+size` out of every channel.
    pub fn extract(&self, origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if size[a] == 0 || origin[a] + size[a] > self.dims[a] {
                return Err(Error::Contract(format!(
                    "box origin {origin:?} size {size:?} outside volume {:?}",
                    self.dims
                )));
            }
        }
        let mut data = Vec::with_capacity(self.channels * size.iter().product::<usize>());
        for c in 0..self.channels {
            for z in 0..size[0] {
                for y in 0..size[1] {
                    let start = self.index(c, [origin[0] + z, origin[1] + y, origin[2]]);
                    data.extend_from_slice(&self.data[start..start + size[2]]);
                }
            }
        }
        Ok(Self {
            dims: size,
            spacing: self.spacing,
            channels: self.channels,
            data,
        })
    }

    pub(crate) fn with_data(&self, data: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, self.spacing, self.channels, data)
    }
}

fn sidecar_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut json = stem.as_os_str().to_owned();
    json.push(".json");
    let mut raw = stem.as_os_str().to_owned();
    raw.push(".raw");
    (json.into(), raw.into())
}

/// Writes `<stem>.json` and `<stem>.raw`.
pub fn save_raw(stem: &Path, v: &Volume) -> Result<()> {
    let (json_path, raw_path) = sidecar_paths(stem);
    let header = Header {
        dims: v.dims,
        spacing: v.spacing,
        channels: v.channels,
        dtype: RAW_DTYPE.to_string(),
    };
    let text = serde_json::to_string_pretty(&header).expect("header serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    let mut bytes = Vec::with_capacity(v.byte_len());
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))
}

/// Reads a volume written by [`save_raw`].
pub fn load_raw(stem: &Path) -> Result<Volume> {
    let (json_path, raw_path) = sidecar_paths(stem);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: json_path.clone(),
        msg: e.to_string(),
    })?;
    if header.dtype != RAW_DTYPE {
        return Err(Error::Format {
            path: json_path,
            msg: format!("unsupported dtype {:?}, expected {RAW_DTYPE:?}", header.dtype),
        });
    }
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.channels * header.dims.iter().product::<usize>() * 4;
    if bytes.len() != expected {
        return Err(Error::Format {
            path: raw_path,
            msg: format!("expected {expected} bytes, found {}", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new(header.dims, header.spacing, header.channels, data)
}

/// Per-channel mean 0, population std 1.
pub fn zscore_normalize(v: &Volume) -> Result<Volume> {
    let n = v.voxels();
    let mut out = Vec::with_capacity(v.data.len());
    for c in 0..v.channels {
        let ch = v.channel(c);
        let mean = ch.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let var = ch.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Degenerate(format!("channel {c} is constant")));
        }
        out.extend(ch.iter().map(|&x| ((x as f64 - mean) / std) as f32));
    }
    v.with_data(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_volume(seed: u64, dims: [usize; 3], channels: usize) -> Volume {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, channels, |_, _| rng.random_range(-3.0..5.0)).unwrap()
    }

    #[test]
    fn length_and_finiteness_are_enforced() {
        assert!(Volume::new([2, 2, 2], [1.0; 3], 1, vec![0.0; 7]).is_err());
        assert!(matches!(
            Volume::new([1, 1, 2], [1.0; 3], 1, vec![0.0, f32::NAN]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let v = random_volume(1, [3, 4, 5], 2).with_spacing([1.5, 0.7, 2.0]);
        let stem = dir.path().join("vol");
        save_raw(&stem, &v).unwrap();
        let raw = fs::read(dir.path().join("vol.raw")).unwrap();
        assert_eq!(raw.len(), 2 * 3 * 4 * 5 * 4);
        assert_eq!(raw.len(), v.byte_len());
        let back = load_raw(&stem).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert_eq!(back.spacing(), v.spacing());
        assert!(back
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        let header: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("vol.json")).unwrap()).unwrap();
        assert_eq!(header["dtype"], "f32le");
    }

    #[test]
    fn truncated_payload_names_byte_counts() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        save_raw(&stem, &random_volume(2, [2, 2, 2], 1)).unwrap();
        let raw = dir.path().join("v.raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..bytes.len() - 3]).unwrap();
        match load_raw(&stem) {
            Err(Error::Format { msg, .. }) => {
                assert!(msg.contains("32") && msg.contains("29"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_payload_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        save_raw(&stem, &random_volume(3, [1, 1, 2], 1)).unwrap();
        let mut bytes = fs::read(dir.path().join("v.raw")).unwrap();
        bytes[4..8].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(dir.path().join("v.raw"), bytes).unwrap();
        assert!(matches!(load_raw(&stem), Err(Error::Data(_))));
    }

    #[test]
    fn missing_files_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_raw(&dir.path().join("nope")), Err(Error::Io { .. })));
    }

    #[test]
    fn zscore_two_points() {
        let v = Volume::new([1, 1, 2], [1.0; 3], 1, vec![0.0, 2.0]).unwrap();
        assert_eq!(zscore_normalize(&v).unwrap().data(), &[-1.0, 1.0]);
    }

    #[test]
    fn zscore_constant_is_degenerate() {
        assert!(matches!(
            zscore_normalize(&Volume::filled([2, 2, 2], 1, 3.0)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn zscore_is_idempotent() {
        let once = zscore_normalize(&random_volume(4, [6, 5, 4], 1)).unwrap();
        let twice = zscore_normalize(&once).unwrap();
        let d = once
            .data()
            .iter()
            .zip(twice.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max);
        assert!(d <= 1e-6, "{d}");
    }

    #[test]
    fn extract_matches_indexing() {
        let v = random_volume(5, [5, 6, 7], 2);
        let e = v.extract([1, 2, 3], [3, 2, 4]).unwrap();
        for c in 0..2 {
            for z in 0..3 {
                for y in 0..2 {
                    for x in 0..4 {
                        assert_eq!(e.get(c, [z, y, x]), v.get(c, [1 + z, 2 + y, 3 + x]));
                    }
                }
            }
        }
        assert!(v.extract([3, 0, 0], [3, 1, 1]).is_err());
    }

    proptest! {
        #[test]
        fn zscore_moments_by_two_pass_oracle(seed in any::<u64>(), d in 1usize..6, h in 1usize..6, w in 2usize..6) {
            let v = random_volume(seed, [d, h, w], 1);
            let z = zscore_normalize(&v).unwrap();
            let n = z.data().len() as f64;
            let mean = z.data().iter().map(|&x| x as f64).sum::<f64>() / n;
            let var = z.data().iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((var.sqrt() - 1.0).abs() <= 1e-6);
        }

        #[test]
        fn persistence_round_trip(seed in any::<u64>(), c in 1usize..3, d in 1usize..4, h in 1usize..4, w in 1usize..4) {
            let dir = tempfile::tempdir().unwrap();
            let v = random_volume(seed, [d, h, w], c);
            let stem = dir.path().join("p");
            save_raw(&stem, &v).unwrap();
            prop_assert_eq!(load_raw(&stem).unwrap(), v);
        }
    }
}
