//! Central-difference verification of tape gradients.

use crate::error::{Result, TensorError};
use crate::params::{ParamStore, ParamVars};
use crate::tape::{Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, within `[1e-6, 1e-3]`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Caps how many entries of each parameter are probed (evenly strided).
    pub max_entries_per_param: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            tolerance: 1e-4,
            max_entries_per_param: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Relative error `|a - n| / max(1, |a|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if !t.is_scalar() {
        return Err(TensorError::Contract(format!(
            "objective must be scalar, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Compares tape gradients of `f` against central differences for every
/// entry of every parameter in `params`.
pub fn gradient_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&opts.step) {
        return Err(TensorError::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-3]",
            opts.step
        )));
    }
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let loss = f(&mut tape, &vars)?;
    let base = scalar_of(&tape, loss)?;
    if !base.is_finite() {
        return Err(TensorError::Evaluation {
            param: "<unperturbed>".into(),
        });
    }
    let analytic = tape.backward(loss)?.named();

    let eval = |store: &ParamStore, name: &str| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = store.register_frozen(&mut tape);
        let v = f(&mut tape, &vars)?;
        let y = scalar_of(&tape, v)?;
        if y.is_finite() {
            Ok(y)
        } else {
            Err(TensorError::Evaluation { param: name.to_string() })
        }
    };

    let mut work = params.clone();
    let mut report = Vec::new();
    let mut overall: f64 = 0.0;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name)?.numel();
        let stride = match opts.max_entries_per_param {
            Some(cap) if cap > 0 && cap < n => n.div_ceil(cap),
            _ => 1,
        };
        let grad = analytic
            .get(&name)
            .cloned()
            .unwrap_or_else(|| params.get(&name).map(|t| t.zeros_like()).unwrap());
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for idx in (0..n).step_by(stride) {
            let orig = work.get(&name)?.data()[idx];
            work.get_mut(&name)?.data_mut()[idx] = orig + opts.step;
            let plus = eval(&work, &name)?;
            work.get_mut(&name)?.data_mut()[idx] = orig - opts.step;
            let minus = eval(&work, &name)?;
            work.get_mut(&name)?.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            worst = worst.max(relative_error(grad.data()[idx], numeric));
            checked += 1;
        }
        overall = overall.max(worst);
        report.push(ParamCheck {
            name,
            checked,
            max_rel_error: worst,
        });
    }
    Ok(GradCheckReport {
        params: report,
        max_rel_error: overall,
        passed: overall <= opts.tolerance,
    })
}
