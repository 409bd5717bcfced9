//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::consts::{FD_STEP, GRAD_TOL, REL_ERR_FLOOR};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// One-sided slopes differing by more than this (relative) mark a kink.
    pub kink_tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: FD_STEP,
            tolerance: GRAD_TOL,
            kink_tolerance: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_err: f64,
    pub worst_element: Option<usize>,
    pub checked: usize,
    /// Elements skipped because the function is not differentiable there.
    pub non_smooth: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    /// First non-finite gradient encountered, if any.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err() <= self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    f(&tape, &vars)?.item()
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, element by element, for every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(root)?;
    let f0 = root.item()?;
    if !f0.is_finite() {
        return Ok(GradCheckReport {
            tolerance: cfg.tolerance,
            failure: Some(format!("forward value {f0}")),
            ..Default::default()
        });
    }

    let mut report = GradCheckReport {
        tolerance: cfg.tolerance,
        ..Default::default()
    };
    let h = cfg.step;
    for (i, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads
            .get(*var)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut r = InputReport {
            input: i,
            ..Default::default()
        };
        for j in 0..input.numel() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut data = input.to_vec();
                data[j] += delta;
                let mut probe = inputs.to_vec();
                probe[i] = Tensor::with_dtype(input.shape(), data, input.dtype())?;
                eval(&f, &probe)
            };
            let (fp, fm) = (shifted(h)?, shifted(-h)?);
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[j];
            if !a.is_finite() || !numeric.is_finite() {
                report
                    .failure
                    .get_or_insert_with(|| format!("input {i} element {j}: analytic {a}, numeric {numeric}"));
                continue;
            }
            let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
            if (fwd - bwd).abs() > cfg.kink_tolerance * fwd.abs().max(bwd.abs()).max(1.0) {
                r.non_smooth.push(j);
                continue;
            }
            let e = rel_err(a, numeric);
            r.checked += 1;
            if r.worst_element.is_none() || e > r.max_rel_err {
                r.max_rel_err = e;
                r.worst_element = Some(j);
            }
        }
        report.inputs.push(r);
    }
    Ok(report)
}
