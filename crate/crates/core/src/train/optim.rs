//! AdamW, learning-rate schedules and the EMA teacher update.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ModelParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

impl Schedule {
    /// Learning rate at `step` of a run with `total` steps. The cosine
    /// schedule reaches exactly 0 at the last step.
    pub fn lr(self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                if total <= 1 {
                    return base;
                }
                let progress = (step.min(total - 1)) as f64 / (total - 1) as f64;
                0.5 * base * (1.0 + (PI * progress).cos())
            }
        }
    }
}

/// `ξ ← τ·ξ + (1 − τ)·θ`, element-wise over matching registries.
///
/// `τ = 0` copies the student and `τ = 1` keeps the teacher, both bitwise.
pub fn ema_update(teacher: &ModelParams, student: &ModelParams, tau: f64) -> Result<ModelParams> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Contract(format!("EMA decay {tau} outside [0, 1]")));
    }
    teacher.check_registry(student)?;
    if tau == 0.0 {
        return Ok(student.clone());
    }
    if tau == 1.0 {
        return Ok(teacher.clone());
    }
    let mut out = teacher.clone();
    for (name, xi) in teacher.iter() {
        let theta = student.get(name)?;
        let data = xi
            .data()
            .iter()
            .zip(theta.data())
            .map(|(x, t)| tau * x + (1.0 - tau) * t)
            .collect();
        out.set(name, Tensor::with_dtype(xi.shape(), data, xi.dtype())?)?;
    }
    Ok(out)
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: BTreeMap<String, u64>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            steps: BTreeMap::new(),
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied to `name` so far.
    pub fn steps(&self, name: &str) -> u64 {
        self.steps.get(name).copied().unwrap_or(0)
    }

    /// Updates every parameter that has a gradient; parameters without one
    /// are left untouched, weight decay included.
    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            let n = p.numel();
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let (b1, b2) = (self.beta1, self.beta2);
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let mut data = p.to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                data[i] -= lr * (update + self.weight_decay * data[i]);
            }
            params.set(name, Tensor::with_dtype(p.shape(), data, p.dtype())?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderConfig;
    use crate::tensor::DType;

    fn params(seed: u64) -> ModelParams {
        ModelParams::init(&EncoderConfig::default(), seed, DType::F64).unwrap()
    }

    fn same(a: &ModelParams, b: &ModelParams) -> bool {
        a.iter()
            .zip(b.iter())
            .all(|((n1, x), (n2, y))| n1 == n2 && x.bitwise_eq(y))
    }

    #[test]
    fn ema_endpoints_are_exact() {
        let (xi, theta) = (params(1), params(2));
        assert!(same(&ema_update(&xi, &theta, 0.0).unwrap(), &theta));
        assert!(same(&ema_update(&xi, &theta, 1.0).unwrap(), &xi));
        let then = ema_update(&ema_update(&xi, &theta, 0.0).unwrap(), &theta, 1.0).unwrap();
        assert!(same(&then, &theta));
    }

    #[test]
    fn ema_midpoint_and_affinity() {
        let zero = params(1).map(|_, t| Tensor::zeros(t.shape()));
        let one = params(1).map(|_, t| Tensor::ones(t.shape()));
        let mid = ema_update(&zero, &one, 0.5).unwrap();
        assert!(mid.iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.5)));

        let (a, b, c) = (params(3), params(4), params(5));
        let tau = 0.3;
        let lhs = ema_update(&a, &b, tau).unwrap();
        for (name, t) in lhs.iter() {
            let oracle: Vec<f64> = a
                .get(name)
                .unwrap()
                .data()
                .iter()
                .zip(b.get(name).unwrap().data())
                .map(|(x, y)| 0.3 * x + 0.7 * y)
                .collect();
            assert!(t.data().iter().zip(&oracle).all(|(x, y)| (x - y).abs() < 1e-15));
        }
        let bad = ModelParams::init(
            &EncoderConfig {
                channels: vec![4, 8, 16],
                ..Default::default()
            },
            1,
            DType::F64,
        )
        .unwrap();
        assert!(matches!(ema_update(&c, &bad, 0.5), Err(Error::Contract(_))));
        assert!(ema_update(&a, &b, 1.5).is_err());
    }

    #[test]
    fn cosine_schedule_ends_near_zero() {
        assert_eq!(Schedule::Cosine.lr(0.005, 0, 200), 0.005);
        assert!(Schedule::Cosine.lr(0.005, 199, 200) <= 1e-3 * 0.005);
        assert!((Schedule::Cosine.lr(1.0, 50, 101) - 0.5).abs() < 1e-12);
        assert_eq!(Schedule::Constant.lr(0.3, 77, 100), 0.3);
        assert_eq!(Schedule::Cosine.lr(0.3, 0, 1), 0.3);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = ModelParams::from_map([("w".to_string(), Tensor::new(&[2], vec![1.0, -1.0]).unwrap())].into());
        let mut opt = AdamW::new(0.0);
        let g = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())]);
        opt.step(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap().data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
        assert_eq!(opt.steps("w"), 1);
    }

    #[test]
    fn adamw_skips_parameters_without_gradients() {
        let mut p = params(6);
        let before = p.clone();
        AdamW::new(0.1).step(&mut p, &BTreeMap::new(), 1.0).unwrap();
        assert!(same(&p, &before));
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut p = ModelParams::from_map([("w".to_string(), Tensor::new(&[3], vec![2.0, -3.0, 0.5]).unwrap())].into());
        let mut opt = AdamW::new(0.0);
        for _ in 0..500 {
            let g = p.get("w").unwrap().map(|x| 2.0 * x);
            opt.step(&mut p, &BTreeMap::from([("w".to_string(), g)]), 0.05).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }
}
