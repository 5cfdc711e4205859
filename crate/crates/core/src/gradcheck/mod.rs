//! Finite-difference verification of analytic gradients.
//!
//! The relative error of one entry is `|analytic - numeric| / max(|analytic|,
//! |numeric|, floor)`. The floor keeps entries whose true gradient is zero
//! from turning round-off into a huge ratio; it defaults to `1e-3`.

mod suite;

pub use suite::{run_suite, unit_names, Kind, Scope, SuiteOptions, SuiteReport, UnitReport, MODEL_TOL, UNIT_TOL};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Ctx, ParamStore, ParamVars};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
    /// Check only this many randomly chosen entries per input (all when `None`).
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, tol: 1e-4, floor: 1e-3, max_entries: None, seed: 0 }
    }
}

impl GradCheckConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Checks the gradient of scalar-valued `f` at `x`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    grad_check_many(|t, xs| f(t, &xs[0]), std::slice::from_ref(x), cfg)
}

/// Checks the gradient of `<probe, f(x)>` with respect to `x` and every
/// parameter in `store`, for a fixed random probe drawn from `cfg.seed`.
pub fn check_block<F>(store: &ParamStore<f64>, x: &Tensor<f64>, f: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Ctx<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let probe_shape = {
        let tape = Tape::new();
        let pv = ParamVars::constants(store);
        f(&Ctx::new(&tape, &pv), &Var::constant(x.clone()))?.shape()
    };
    let probe: Tensor<f64> = Rng::new(cfg.seed).split("probe").uniform_tensor(probe_shape, -1.0, 1.0);
    let mut inputs = vec![x.clone()];
    inputs.extend(store.tensors().iter().cloned());
    grad_check_many(
        |tape, vars| {
            let pv = ParamVars::from_vars(store.names(), &vars[1..]);
            let y = f(&Ctx::new(tape, &pv), &vars[0])?;
            tape.sum(&tape.mul(&y, &Var::constant(probe.clone()))?)
        },
        &inputs,
        cfg,
    )
}

/// Checks the gradient of scalar-valued `f` with respect to every input.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&Tape<f64>, &[Var<f64>]) -> Result<Var<f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<f64>> = xs.iter().map(|x| Var::constant(x.clone())).collect();
        let out = f(&tape, &vars)?;
        if out.value().numel() != 1 {
            return Err(Error::Autodiff(format!("grad_check needs a scalar output, got {}", out.shape())));
        }
        let v = out.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check objective".into() });
        }
        Ok(v)
    };

    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&tape, &leaves)?;
    let grads = tape.backward(&out)?;

    let rng = Rng::new(cfg.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), checked: 0, tol: cfg.tol, passed: true };
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(&leaves[k])?;
        let entries: Vec<usize> = match cfg.max_entries {
            Some(m) if m < x.numel() => {
                let mut idx = rng.split_index("entries", k as u64).permutation(x.numel());
                idx.truncate(m);
                idx.sort_unstable();
                idx
            }
            _ => (0..x.numel()).collect(),
        };
        for i in entries {
            let mut plus = x.to_vec();
            plus[i] += cfg.step;
            let mut minus = x.to_vec();
            minus[i] -= cfg.step;
            let mut xs = inputs.to_vec();
            xs[k] = Tensor::from_vec(x.shape(), plus)?;
            let fp = eval(&xs)?;
            xs[k] = Tensor::from_vec(x.shape(), minus)?;
            let fm = eval(&xs)?;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
        }
    }
    report.passed = report.max_rel_error < cfg.tol;
    Ok(report)
}
