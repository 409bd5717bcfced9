//! Paired crops with a controlled overlap fraction.
//!
//! A pair is two equally sized boxes in the source frame whose intersection
//! holds between `gamma_min` and `gamma_max` of the crop volume. The
//! intersection, translated into each crop's local frame, gives Ω₁ and Ω₂.
//! Spatial transforms act on the source before cropping, so both crops agree
//! voxel for voxel inside Ω until intensity augmentation is applied.

mod augment;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::consts::{GAMMA_MAX, GAMMA_MIN};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, purpose};
use crate::volume::Volume;

pub use augment::{apply_intensity, apply_spatial, blur_kernel, draw_record, AugmentRecord, IntensityOp, MirrorAxes};

/// Axis-aligned integer box, `origin` inclusive, `origin + size` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Box3 {
    pub origin: [usize; 3],
    pub size: [usize; 3],
}

impl Box3 {
    pub fn new(origin: [usize; 3], size: [usize; 3]) -> Result<Self> {
        if size.contains(&0) {
            return Err(Error::Contract(format!("box size {size:?} has an empty axis")));
        }
        Ok(Self { origin, size })
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    pub fn end(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.size[a])
    }

    pub fn contains(&self, other: &Box3) -> bool {
        (0..3).all(|a| other.origin[a] >= self.origin[a] && other.end()[a] <= self.end()[a])
    }

    pub fn fits_in(&self, dims: [usize; 3]) -> bool {
        (0..3).all(|a| self.end()[a] <= dims[a])
    }

    pub fn intersect(&self, other: &Box3) -> Option<Box3> {
        let (e1, e2) = (self.end(), other.end());
        let mut origin = [0; 3];
        let mut size = [0; 3];
        for a in 0..3 {
            let lo = self.origin[a].max(other.origin[a]);
            let hi = e1[a].min(e2[a]);
            if hi <= lo {
                return None;
            }
            origin[a] = lo;
            size[a] = hi - lo;
        }
        Some(Box3 { origin, size })
    }
}

/// Intersection volume of `a` and `b` over the crop volume `vp`.
pub fn overlap_fraction(a: &Box3, b: &Box3, vp: usize) -> f64 {
    a.intersect(b).map_or(0.0, |i| i.volume() as f64 / vp as f64)
}

/// Translates a source-frame box into the local frame of `crop`.
pub fn map_overlap_to_local(src_overlap: &Box3, crop: &Box3) -> Result<Box3> {
    if !crop.contains(src_overlap) {
        return Err(Error::Contract(format!(
            "overlap {src_overlap:?} not inside crop {crop:?}"
        )));
    }
    Ok(Box3 {
        origin: [0, 1, 2].map(|a| src_overlap.origin[a] - crop.origin[a]),
        size: src_overlap.size,
    })
}

/// Inverse of [`map_overlap_to_local`].
pub fn map_local_to_source(local: &Box3, crop: &Box3) -> Box3 {
    Box3 {
        origin: [0, 1, 2].map(|a| local.origin[a] + crop.origin[a]),
        size: local.size,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub crop_size: [usize; 3],
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub max_attempts: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            crop_size: [32; 3],
            gamma_min: GAMMA_MIN,
            gamma_max: GAMMA_MAX,
            max_attempts: 100,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max && self.gamma_max <= 1.0) {
            return Err(Error::Config(format!(
                "need 0 < gamma_min <= gamma_max <= 1, got {} and {}",
                self.gamma_min, self.gamma_max
            )));
        }
        if self.crop_size.contains(&0) {
            return Err(Error::Config(format!(
                "crop_size {:?} has an empty axis",
                self.crop_size
            )));
        }
        Ok(())
    }

    pub fn crop_volume(&self) -> usize {
        self.crop_size.iter().product()
    }

    fn accepts(&self, frac: f64) -> bool {
        frac >= self.gamma_min && frac <= self.gamma_max
    }
}

/// Crop placement and the matching overlap boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairGeometry {
    pub box1: Box3,
    pub box2: Box3,
    pub omega1: Box3,
    pub omega2: Box3,
}

impl PairGeometry {
    fn from_boxes(box1: Box3, box2: Box3) -> Result<Self> {
        let inter = box1
            .intersect(&box2)
            .ok_or_else(|| Error::Sampling("crops do not overlap".into()))?;
        Ok(Self {
            box1,
            box2,
            omega1: map_overlap_to_local(&inter, &box1)?,
            omega2: map_overlap_to_local(&inter, &box2)?,
        })
    }

    pub fn overlap_fraction(&self) -> f64 {
        overlap_fraction(&self.box1, &self.box2, self.box1.volume())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub crop1: Volume,
    pub crop2: Volume,
    pub geometry: PairGeometry,
    pub aug1: AugmentRecord,
    pub aug2: AugmentRecord,
}

fn constructive<R: Rng + ?Sized>(dims: [usize; 3], cfg: &SamplerConfig, o1: [usize; 3], rng: &mut R) -> Option<Box3> {
    let c = cfg.crop_size;
    let vp = cfg.crop_volume() as f64;
    let f = if cfg.gamma_min == cfg.gamma_max {
        cfg.gamma_min
    } else {
        rng.random_range(cfg.gamma_min..=cfg.gamma_max)
    };
    let floor = 0.8 * f.cbrt();
    let mut axes = [0usize, 1, 2];
    let solved = rng.random_range(0..3);
    axes.swap(solved, 2);

    let draw = |rng: &mut R, lo: f64| -> f64 {
        let lo = lo.min(1.0);
        if lo >= 1.0 {
            1.0
        } else {
            rng.random_range(lo..=1.0)
        }
    };
    let ra = draw(rng, floor.max(f));
    let rb = draw(rng, floor.max(f / ra));
    let mut len = [0usize; 3];
    len[axes[0]] = ((ra * c[axes[0]] as f64).round() as usize).clamp(1, c[axes[0]]);
    let want_b = ((rb * c[axes[1]] as f64).round() as usize).clamp(1, c[axes[1]]);
    // Lengths on the last axis step the fraction by la·lb/vp, which can
    // exceed a narrow window; take the second length nearest the drawn one
    // for which some integer third length lands inside.
    let la = len[axes[0]];
    let third = |lb: usize| -> Option<(usize, usize)> {
        let per = (la * lb) as f64;
        let lo = ((cfg.gamma_min * vp / per).ceil() as usize).max(1);
        let hi = ((cfg.gamma_max * vp / per).floor() as usize).min(c[axes[2]]);
        (lo <= hi).then_some((lo, hi))
    };
    let lb = (1..=c[axes[1]])
        .filter(|&lb| third(lb).is_some())
        .min_by_key(|&lb| lb.abs_diff(want_b))?;
    let (lo, hi) = third(lb)?;
    let target = ((f * vp / (la * lb) as f64).round() as usize).clamp(lo, hi);
    len[axes[1]] = lb;
    len[axes[2]] = target;

    let frac = len.iter().product::<usize>() as f64 / vp;
    if !cfg.accepts(frac) {
        return None;
    }
    let mut o2 = [0usize; 3];
    for a in 0..3 {
        let shift = c[a] - len[a];
        let max_origin = dims[a] - c[a];
        let mut options = Vec::with_capacity(2);
        if o1[a] + shift <= max_origin {
            options.push(o1[a] + shift);
        }
        if shift > 0 && o1[a] >= shift {
            options.push(o1[a] - shift);
        }
        o2[a] = *options.choose(rng)?;
    }
    Some(Box3 { origin: o2, size: c })
}

/// Draws a crop placement pair satisfying the overlap constraint.
///
/// Each constructive attempt draws a first origin and a target overlap
/// fraction `f ~ U[gamma_min, gamma_max]`, then solves the second placement.
/// When no attempt lands inside the source, rejection sampling over uniform
/// origin pairs takes over. Both stages are bounded by `max_attempts`.
pub fn sample_geometry<R: Rng + ?Sized>(dims: [usize; 3], cfg: &SamplerConfig, rng: &mut R) -> Result<PairGeometry> {
    cfg.validate()?;
    let c = cfg.crop_size;
    if (0..3).any(|a| dims[a] < c[a]) {
        return Err(Error::Sampling(format!(
            "source dims {dims:?} smaller than crop size {c:?}"
        )));
    }
    let uniform_origin = |rng: &mut R| [0, 1, 2].map(|a| rng.random_range(0..=dims[a] - c[a]));
    for _ in 0..cfg.max_attempts {
        let box1 = Box3 {
            origin: uniform_origin(rng),
            size: c,
        };
        if let Some(box2) = constructive(dims, cfg, box1.origin, rng) {
            return PairGeometry::from_boxes(box1, box2);
        }
    }
    let vp = cfg.crop_volume();
    for _ in 0..cfg.max_attempts {
        let box1 = Box3 {
            origin: uniform_origin(rng),
            size: c,
        };
        let box2 = Box3 {
            origin: uniform_origin(rng),
            size: c,
        };
        if cfg.accepts(overlap_fraction(&box1, &box2, vp)) {
            return PairGeometry::from_boxes(box1, box2);
        }
    }
    Err(Error::Sampling(format!(
        "no placement with overlap in [{}, {}] after {} attempts for dims {dims:?}, crop {c:?}",
        cfg.gamma_min, cfg.gamma_max, cfg.max_attempts
    )))
}

/// Samples and extracts a crop pair before intensity augmentation.
pub fn sample_crop_pair<R: Rng + ?Sized>(src: &Volume, cfg: &SamplerConfig, rng: &mut R) -> Result<ViewPair> {
    let geometry = sample_geometry(src.dims(), cfg, rng)?;
    Ok(ViewPair {
        crop1: src.extract(geometry.box1.origin, geometry.box1.size)?,
        crop2: src.extract(geometry.box2.origin, geometry.box2.size)?,
        geometry,
        aug1: AugmentRecord::identity(),
        aug2: AugmentRecord::identity(),
    })
}

/// Full pipeline: shared mirroring, crop pair, then one intensity op per crop.
///
/// Every random draw is keyed by `(seed, volume_id, draw)` and the crop index,
/// so the result does not depend on evaluation order.
pub fn generate_pair(src: &Volume, cfg: &SamplerConfig, seed: u64, volume_id: u64, draw: u64) -> Result<ViewPair> {
    let mirror = MirrorAxes::random(&mut keyed_rng(seed, &[purpose::SPATIAL, volume_id, draw]));
    let mirrored = apply_spatial(src, mirror);
    let mut pair = sample_crop_pair(&mirrored, cfg, &mut keyed_rng(seed, &[purpose::CROP, volume_id, draw]))?;
    let [aug1, aug2] = [0u64, 1].map(|crop| AugmentRecord {
        mirror,
        ..draw_record(&mut keyed_rng(seed, &[purpose::INTENSITY, volume_id, draw, crop]))
    });
    pair.crop1 = apply_intensity(&pair.crop1, &aug1)?;
    pair.crop2 = apply_intensity(&pair.crop2, &aug2)?;
    pair.aug1 = aug1;
    pair.aug2 = aug2;
    Ok(pair)
}
