//! Central finite-difference verification of analytic gradients.

use super::params::{GradStore, ParamId, ParamRegistry};
use crate::error::{Result, TipsError};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            denom_floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub trainable: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }

    pub fn fraction_passing(&self) -> f64 {
        if self.params.is_empty() {
            return 1.0;
        }
        let ok = self
            .params
            .iter()
            .filter(|p| p.max_rel_error <= self.tolerance)
            .count();
        ok as f64 / self.params.len() as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic against central-difference gradients for every entry of
/// every parameter. `objective` must return the loss and, when handed a
/// gradient store, add the analytic gradient into it. Frozen parameters are
/// required to have an analytic gradient of exactly zero.
pub fn grad_check<F>(
    params: &mut ParamRegistry,
    mut objective: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamRegistry, Option<&mut GradStore>) -> Result<f64>,
{
    let mut analytic = params.grad_store();
    let base = objective(params, Some(&mut analytic))?;
    if !base.is_finite() {
        return Err(TipsError::Numeric(format!("loss {base} at check point")));
    }
    let ids: Vec<ParamId> = params.ids().collect();
    let mut report = Vec::with_capacity(ids.len());
    for id in ids {
        let n = params.value(id).data().len();
        let grad = analytic.get(id).clone();
        let max_abs_analytic = grad.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        let trainable = params.is_trainable(id);
        let mut max_rel: f64 = 0.0;
        if !trainable {
            // frozen: analytic gradient must be exactly zero
            if max_abs_analytic != 0.0 {
                max_rel = f64::INFINITY;
            }
        } else {
            for e in 0..n {
                let orig = params.value(id).data()[e];
                params.value_mut(id).data_mut()[e] = orig + opts.step;
                let plus = objective(params, None);
                params.value_mut(id).data_mut()[e] = orig - opts.step;
                let minus = objective(params, None);
                params.value_mut(id).data_mut()[e] = orig;
                let (plus, minus) = (plus?, minus?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(TipsError::Numeric(format!(
                        "loss not finite when perturbing {}[{e}]",
                        params.name(id)
                    )));
                }
                let numeric = (plus - minus) / (2.0 * opts.step);
                max_rel = max_rel.max(relative_error(grad.data()[e], numeric, opts.denom_floor));
            }
        }
        report.push(ParamCheck {
            name: params.name(id).to_string(),
            entries: n,
            max_rel_error: max_rel,
            max_abs_analytic,
            trainable,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tolerance: opts.tolerance,
    })
}
