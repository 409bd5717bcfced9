use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{keyed_rng, purpose};
use crate::volume::Volume;

pub const NOISE_SIGMA_MAX: f64 = 0.1;
pub const BLUR_SIGMAS: [f64; 2] = [0.5, 1.0];
pub const BRIGHTNESS_RANGE: (f64, f64) = (-0.2, 0.2);
pub const CONTRAST_RANGE: (f64, f64) = (0.8, 1.2);
pub const GAMMA_RANGE: (f64, f64) = (0.7, 1.5);

/// Bit `a` set means axis `a` (z, y, x) is flipped.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MirrorAxes(pub u8);

impl MirrorAxes {
    pub const NONE: MirrorAxes = MirrorAxes(0);

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        MirrorAxes(rng.random_range(0..8))
    }

    pub fn flips(self, axis: usize) -> bool {
        self.0 >> axis & 1 == 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum IntensityOp {
    None,
    GaussianNoise { sigma: f64 },
    RicianNoise { sigma: f64 },
    Blur { sigma: f64 },
    Brightness { shift: f64 },
    Contrast { scale: f64 },
    Gamma { gamma: f64 },
}

/// Everything needed to replay one crop's augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub mirror: MirrorAxes,
    pub op: IntensityOp,
    pub noise_key: u64,
    pub draws: u32,
}

impl AugmentRecord {
    pub fn identity() -> Self {
        Self {
            mirror: MirrorAxes::NONE,
            op: IntensityOp::None,
            noise_key: 0,
            draws: 0,
        }
    }
}

/// Picks one intensity op uniformly, then its parameter.
pub fn draw_record<R: Rng + ?Sized>(rng: &mut R) -> AugmentRecord {
    let mut draws = 1;
    let kind = rng.random_range(0..7u8);
    let mut param = |lo: f64, hi: f64| {
        draws += 1;
        rng.random_range(lo..=hi)
    };
    let op = match kind {
        0 => IntensityOp::None,
        1 => IntensityOp::GaussianNoise {
            sigma: param(0.0, NOISE_SIGMA_MAX),
        },
        2 => IntensityOp::RicianNoise {
            sigma: param(0.0, NOISE_SIGMA_MAX),
        },
        3 => IntensityOp::Blur {
            sigma: BLUR_SIGMAS[(param(0.0, 1.0) < 0.5) as usize],
        },
        4 => IntensityOp::Brightness {
            shift: param(BRIGHTNESS_RANGE.0, BRIGHTNESS_RANGE.1),
        },
        5 => IntensityOp::Contrast {
            scale: param(CONTRAST_RANGE.0, CONTRAST_RANGE.1),
        },
        _ => IntensityOp::Gamma {
            gamma: param(GAMMA_RANGE.0, GAMMA_RANGE.1),
        },
    };
    let noise_key = rng.random::<u64>();
    AugmentRecord {
        mirror: MirrorAxes::NONE,
        op,
        noise_key,
        draws: draws + 1,
    }
}

/// Flips the selected axes of every channel.
pub fn apply_spatial(src: &Volume, mirror: MirrorAxes) -> Volume {
    if mirror == MirrorAxes::NONE {
        return src.clone();
    }
    let d = src.dims();
    let src_coord = |a: usize, i: usize| if mirror.flips(a) { d[a] - 1 - i } else { i };
    let out = Volume::from_fn(d, src.channels(), |c, p| {
        src.get(c, [src_coord(0, p[0]), src_coord(1, p[1]), src_coord(2, p[2])])
    })
    .expect("mirroring preserves validity");
    out.with_spacing(src.spacing())
}

/// Normalized 1D Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn blur_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Half-sample symmetric reflection into `[0, n)`.
pub(crate) fn reflect(mut i: i64, n: usize) -> usize {
    let n = n as i64;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn blur(data: &[f64], dims: [usize; 3], channels: usize, sigma: f64) -> Vec<f64> {
    let k = blur_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let stride = [dims[1] * dims[2], dims[2], 1];
    let n = dims.iter().product::<usize>();
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for c in 0..channels {
            let base = c * n;
            for z in 0..dims[0] {
                for y in 0..dims[1] {
                    for x in 0..dims[2] {
                        let p = [z, y, x];
                        let at = base + z * stride[0] + y * stride[1] + x;
                        let line = at - p[axis] * stride[axis];
                        let mut acc = 0.0;
                        for (t, w) in k.iter().enumerate() {
                            let j = reflect(p[axis] as i64 + t as i64 - r, dims[axis]);
                            acc += w * cur[line + j * stride[axis]];
                        }
                        next[at] = acc;
                    }
                }
            }
        }
        cur = next;
    }
    cur
}

/// Applies the record's intensity op to a crop.
pub fn apply_intensity(crop: &Volume, record: &AugmentRecord) -> Result<Volume> {
    let x: Vec<f64> = crop.data().iter().map(|&v| v as f64).collect();
    let noise = |sigma: f64| -> Result<(Normal<f64>, crate::rng::KeyedRng)> {
        let dist = Normal::new(0.0, sigma).map_err(|e| Error::Augmentation(e.to_string()))?;
        Ok((dist, keyed_rng(record.noise_key, &[purpose::NOISE])))
    };
    let out: Vec<f64> = match record.op {
        IntensityOp::None => return Ok(crop.clone()),
        IntensityOp::GaussianNoise { sigma } => {
            let (dist, mut rng) = noise(sigma)?;
            x.iter().map(|v| v + dist.sample(&mut rng)).collect()
        }
        IntensityOp::RicianNoise { sigma } => {
            let (dist, mut rng) = noise(sigma)?;
            x.iter()
                .map(|v| {
                    let (n1, n2) = (dist.sample(&mut rng), dist.sample(&mut rng));
                    ((v + n1).powi(2) + n2 * n2).sqrt()
                })
                .collect()
        }
        IntensityOp::Blur { sigma } => blur(&x, crop.dims(), crop.channels(), sigma),
        IntensityOp::Brightness { shift } => x.iter().map(|v| v + shift).collect(),
        IntensityOp::Contrast { scale } => {
            let mean = x.iter().sum::<f64>() / x.len() as f64;
            x.iter().map(|v| mean + scale * (v - mean)).collect()
        }
        IntensityOp::Gamma { gamma } => {
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                x.iter()
                    .map(|v| lo + (hi - lo) * ((v - lo) / (hi - lo)).powf(gamma))
                    .collect()
            } else {
                x
            }
        }
    };
    let data: Vec<f32> = out.into_iter().map(|v| v as f32).collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Augmentation(format!(
            "{:?} produced a non-finite value at {i}",
            record.op
        )));
    }
    crop.with_data(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: [usize; 3]) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, 1, |_, _| rng.random_range(-2.0..2.0)).unwrap()
    }

    fn with_op(op: IntensityOp) -> AugmentRecord {
        AugmentRecord {
            op,
            noise_key: 77,
            ..AugmentRecord::identity()
        }
    }

    #[test]
    fn mirror_is_an_involution() {
        let v = random_volume(1, [4, 5, 6]);
        for m in 0..8 {
            let m = MirrorAxes(m);
            assert_eq!(apply_spatial(&apply_spatial(&v, m), m), v);
        }
        assert_eq!(apply_spatial(&v, MirrorAxes::NONE), v);
    }

    #[test]
    fn x_mirror_index_map() {
        let v = random_volume(2, [3, 4, 5]);
        let m = apply_spatial(&v, MirrorAxes(0b100));
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    assert_eq!(m.get(0, [z, y, x]), v.get(0, [z, y, 4 - x]));
                }
            }
        }
    }

    #[test]
    fn none_and_brightness() {
        let v = random_volume(3, [3, 3, 3]);
        assert_eq!(apply_intensity(&v, &AugmentRecord::identity()).unwrap(), v);
        let c = Volume::filled([3, 3, 3], 1, 0.75);
        let b = apply_intensity(&c, &with_op(IntensityOp::Brightness { shift: 0.125 })).unwrap();
        assert!(b.data().iter().all(|&x| x == 0.875));
    }

    #[test]
    fn blur_kernel_is_normalized_and_symmetric() {
        for s in BLUR_SIGMAS {
            let k = blur_kernel(s);
            assert!((k.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert!(k.iter().zip(k.iter().rev()).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn blur_matches_direct_convolution_and_keeps_mean() {
        let v = random_volume(4, [5, 6, 7]);
        let sigma = 0.5;
        let out = apply_intensity(&v, &with_op(IntensityOp::Blur { sigma })).unwrap();
        let k = blur_kernel(sigma);
        let r = (k.len() / 2) as i64;
        let d = v.dims();
        for z in 0..d[0] {
            for y in 0..d[1] {
                for x in 0..d[2] {
                    let mut acc = 0.0f64;
                    for (a, wa) in k.iter().enumerate() {
                        for (b, wb) in k.iter().enumerate() {
                            for (c, wc) in k.iter().enumerate() {
                                let p = [
                                    reflect(z as i64 + a as i64 - r, d[0]),
                                    reflect(y as i64 + b as i64 - r, d[1]),
                                    reflect(x as i64 + c as i64 - r, d[2]),
                                ];
                                acc += wa * wb * wc * v.get(0, p) as f64;
                            }
                        }
                    }
                    assert!((acc - out.get(0, [z, y, x]) as f64).abs() < 1e-5);
                }
            }
        }
        let mean = |v: &Volume| v.data().iter().map(|&x| x as f64).sum::<f64>() / v.data().len() as f64;
        assert!((mean(&v) - mean(&out)).abs() <= 1e-3);
    }

    #[test]
    fn noise_replays_from_record() {
        let v = random_volume(5, [4, 4, 4]);
        for op in [
            IntensityOp::GaussianNoise { sigma: 0.05 },
            IntensityOp::RicianNoise { sigma: 0.05 },
        ] {
            let a = apply_intensity(&v, &with_op(op)).unwrap();
            let b = apply_intensity(&v, &with_op(op)).unwrap();
            assert_eq!(a, b);
            assert_ne!(a, v);
        }
    }

    #[test]
    fn gamma_and_contrast_keep_range_and_mean() {
        let v = random_volume(6, [4, 4, 4]);
        let g = apply_intensity(&v, &with_op(IntensityOp::Gamma { gamma: 1.3 })).unwrap();
        let minmax = |v: &Volume| {
            v.data()
                .iter()
                .fold((f32::MAX, f32::MIN), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        };
        let (a, b) = (minmax(&v), minmax(&g));
        assert!((a.0 - b.0).abs() < 1e-6 && (a.1 - b.1).abs() < 1e-6);
        let c = apply_intensity(&v, &with_op(IntensityOp::Contrast { scale: 1.2 })).unwrap();
        let mean = |v: &Volume| v.data().iter().map(|&x| x as f64).sum::<f64>() / 64.0;
        assert!((mean(&v) - mean(&c)).abs() < 1e-6);
    }

    #[test]
    fn record_draw_is_deterministic_and_in_range() {
        for seed in 0..200 {
            let a = draw_record(&mut ChaCha8Rng::seed_from_u64(seed));
            assert_eq!(a, draw_record(&mut ChaCha8Rng::seed_from_u64(seed)));
            match a.op {
                IntensityOp::GaussianNoise { sigma } | IntensityOp::RicianNoise { sigma } => {
                    assert!((0.0..=NOISE_SIGMA_MAX).contains(&sigma))
                }
                IntensityOp::Blur { sigma } => assert!(BLUR_SIGMAS.contains(&sigma)),
                IntensityOp::Brightness { shift } => assert!(shift.abs() <= 0.2),
                IntensityOp::Contrast { scale } => assert!((0.8..=1.2).contains(&scale)),
                IntensityOp::Gamma { gamma } => assert!((0.7..=1.5).contains(&gamma)),
                IntensityOp::None => assert_eq!(a.draws, 2),
            }
        }
    }
}
