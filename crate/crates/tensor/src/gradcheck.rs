//! Central finite-difference gradient checking on `f64` tapes.
//!
//! The numeric side never touches backward rules: it only re-runs the
//! forward closure with perturbed inputs.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Probe at most this many entries per input (evenly strided); `None` probes all.
    pub max_probes: Option<usize>,
    /// Gradient scale below which errors are judged in absolute terms.
    pub min_scale: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes: None,
            min_scale: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub probes: usize,
    pub max_abs_err: f64,
    /// `max_abs_err` divided by the largest gradient magnitude seen on either
    /// side, or by `min_scale` when that is larger.
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub inputs: Vec<InputReport>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of the scalar `f(inputs)` against central
/// differences for every input.
pub fn check<F, E>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v).expect("leaf gradient");
        let n = inputs[k].len();
        let stride = match cfg.max_probes {
            Some(p) if p < n => n.div_ceil(p),
            _ => 1,
        };
        let (mut max_err, mut max_mag, mut probes) = (0.0f64, 0.0f64, 0);
        for i in (0..n).step_by(stride) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let a = analytic.data()[i];
            max_err = max_err.max((a - numeric).abs());
            max_mag = max_mag.max(a.abs()).max(numeric.abs());
            probes += 1;
        }
        let rel_err = max_err / max_mag.max(cfg.min_scale);
        reports.push(InputReport {
            probes,
            max_abs_err: max_err,
            rel_err,
        });
    }
    Ok(GradReport { inputs: reports })
}

/// Checks the gradient of `f` with respect to every trainable parameter of
/// `store`. `f` must fetch parameters through `tape.param`.
pub fn check_params<F, E>(
    store: &ParamStore<f64>,
    cfg: GradCheckConfig,
    f: F,
) -> Result<Vec<(String, InputReport)>, E>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, E>,
    E: From<TensorError>,
{
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    let inputs: Vec<Tensor<f64>> = ids.iter().map(|&id| store.value(id).clone()).collect();
    let report = check(&inputs, cfg, |tape, vars| {
        for (&id, &v) in ids.iter().zip(vars) {
            tape.bind(id, v);
        }
        f(tape, store)
    })?;
    Ok(ids
        .iter()
        .map(|&id| store.name(id).to_string())
        .zip(report.inputs)
        .collect())
}
