//! Synthetic blob volumes with matching label maps.
//!
//! Each blob is a Gaussian bump (σ = r/2) whose amplitude lies in the band of
//! the intensity range owned by its class, so class identity is visible in
//! the image. The label of a voxel is the class of the blob whose sphere of
//! radius r contains it. Blobs are placed so that every sphere dilated by two
//! voxels stays clear of every other sphere.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, purpose};
use crate::volume::{zscore_normalize, Volume};

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub n_blobs: usize,
    pub radius: (f64, f64),
    pub intensity: (f64, f64),
    pub noise_sigma: f64,
    pub label_classes: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            dims: [48, 48, 48],
            n_blobs: 6,
            radius: (3.0, 6.0),
            intensity: (1.0, 3.0),
            noise_sigma: 0.1,
            label_classes: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub center: [usize; 3],
    pub radius: f64,
    pub class: usize,
    pub amplitude: f64,
}

impl Blob {
    pub fn dist2(&self, p: [usize; 3]) -> f64 {
        (0..3).map(|a| (p[a] as f64 - self.center[a] as f64).powi(2)).sum()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        self.dist2(p) <= self.radius * self.radius
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (r0, r1) = self.radius;
        if self.label_classes == 0 {
            return Err(Error::Config("label_classes must be >= 1".into()));
        }
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config(format!("radius range {r0}..{r1} is invalid")));
        }
        let min_dim = *self.dims.iter().min().unwrap_or(&0);
        if self.n_blobs > 0 && 2.0 * r1.ceil() + 1.0 > min_dim as f64 {
            return Err(Error::Config(format!(
                "dims {:?} too small for blob radius up to {r1}",
                self.dims
            )));
        }
        if self.dims.contains(&0) {
            return Err(Error::Config("dims must be positive".into()));
        }
        let (lo, hi) = self.intensity;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "intensity range {lo}..{hi} must be positive and ordered"
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Blob layout for a spec; the same draws [`synth_generate`] uses.
pub fn synth_blobs(spec: &SynthSpec) -> Result<Vec<Blob>> {
    spec.validate()?;
    let mut rng = keyed_rng(spec.seed, &[purpose::SYNTH]);
    let k = spec.label_classes;
    let (lo, hi) = spec.intensity;
    let band = (hi - lo) / k as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.n_blobs);
    for i in 0..spec.n_blobs {
        let radius = if spec.radius.0 == spec.radius.1 {
            spec.radius.0
        } else {
            rng.random_range(spec.radius.0..spec.radius.1)
        };
        let class = rng.random_range(1..=k);
        let amplitude = lo + band * (class as f64 - 1.0) + band * rng.random::<f64>();
        let margin = radius.ceil() as usize;
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let center = [0, 1, 2].map(|a| rng.random_range(margin..spec.dims[a] - margin));
            let clear = blobs.iter().all(|b| {
                let d2: f64 = (0..3).map(|a| (center[a] as f64 - b.center[a] as f64).powi(2)).sum();
                d2.sqrt() > radius + b.radius + 3.0
            });
            if clear {
                placed = Some(center);
                break;
            }
        }
        let center = placed.ok_or_else(|| {
            Error::Config(format!(
                "could not place blob {i} of {} in dims {:?}",
                spec.n_blobs, spec.dims
            ))
        })?;
        blobs.push(Blob {
            center,
            radius,
            class,
            amplitude,
        });
    }
    Ok(blobs)
}

/// Returns the z-scored intensity volume and its label volume.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Volume, Volume)> {
    let blobs = synth_blobs(spec)?;
    let mut rng = keyed_rng(spec.seed, &[purpose::NOISE]);
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let dims = spec.dims;
    let mut image = Vec::with_capacity(dims.iter().product());
    let mut labels = Vec::with_capacity(image.capacity());
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let p = [z, y, x];
                let mut v = 0.0;
                let mut label = 0;
                for b in &blobs {
                    let s = b.radius / 2.0;
                    let d2 = b.dist2(p);
                    v += b.amplitude * (-d2 / (2.0 * s * s)).exp();
                    if d2 <= b.radius * b.radius {
                        label = b.class;
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                image.push(v as f32);
                labels.push(label as f32);
            }
        }
    }
    let image = zscore_normalize(&Volume::new(dims, [1.0; 3], 1, image)?)?;
    Ok((image, Volume::new(dims, [1.0; 3], 1, labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            seed: 11,
            dims: [24, 24, 24],
            n_blobs: 4,
            radius: (2.5, 4.0),
            label_classes: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, la) = synth_generate(&small()).unwrap();
        let (b, lb) = synth_generate(&small()).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(la, lb);
        let other = synth_generate(&SynthSpec { seed: 12, ..small() }).unwrap().0;
        assert_ne!(a, other);
    }

    #[test]
    fn no_blobs_gives_background_only() {
        let (img, lab) = synth_generate(&SynthSpec { n_blobs: 0, ..small() }).unwrap();
        assert!(lab.data().iter().all(|&v| v == 0.0));
        assert!(img.data().iter().any(|&v| v != img.data()[0]));
    }

    #[test]
    fn output_is_zscored() {
        let (img, _) = synth_generate(&small()).unwrap();
        let n = img.data().len() as f64;
        let mean = img.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (img.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() <= 1e-3 && (std - 1.0).abs() <= 1e-3);
    }

    #[test]
    fn radius_must_fit() {
        let bad = SynthSpec {
            dims: [8, 8, 8],
            radius: (3.0, 5.0),
            ..small()
        };
        assert!(matches!(synth_generate(&bad), Err(Error::Config(_))));
        assert!(SynthSpec {
            label_classes: 0,
            ..small()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn class_voxel_counts_match_independent_scan() {
        let spec = small();
        let (_, lab) = synth_generate(&spec).unwrap();
        let blobs = synth_blobs(&spec).unwrap();
        let mut expected = vec![0usize; spec.label_classes + 1];
        for b in &blobs {
            let r = b.radius;
            for z in 0..spec.dims[0] {
                for y in 0..spec.dims[1] {
                    for x in 0..spec.dims[2] {
                        let d2 = (z as f64 - b.center[0] as f64).powi(2)
                            + (y as f64 - b.center[1] as f64).powi(2)
                            + (x as f64 - b.center[2] as f64).powi(2);
                        if d2 <= r * r {
                            expected[b.class] += 1;
                        }
                    }
                }
            }
        }
        let mut got = vec![0usize; spec.label_classes + 1];
        for &v in lab.data() {
            got[v as usize] += 1;
        }
        assert_eq!(&got[1..], &expected[1..]);
        assert!(lab
            .data()
            .iter()
            .all(|&v| v >= 0.0 && v as usize <= spec.label_classes && v.fract() == 0.0));
    }

    #[test]
    fn intensity_peak_lies_inside_each_labelled_blob() {
        for seed in 0..5 {
            let spec = SynthSpec { seed, ..small() };
            let (img, lab) = synth_generate(&spec).unwrap();
            for b in synth_blobs(&spec).unwrap() {
                let reach = b.radius + 2.0;
                let mut best = (f32::MIN, [0; 3]);
                for z in 0..spec.dims[0] {
                    for y in 0..spec.dims[1] {
                        for x in 0..spec.dims[2] {
                            let p = [z, y, x];
                            if b.dist2(p) <= reach * reach && img.get(0, p) > best.0 {
                                best = (img.get(0, p), p);
                            }
                        }
                    }
                }
                assert!(b.contains(best.1));
                assert_eq!(lab.get(0, best.1) as usize, b.class);
            }
        }
    }
}
