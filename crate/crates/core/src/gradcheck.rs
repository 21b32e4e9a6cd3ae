//! Central finite-difference verification of taped gradients.
//!
//! Each entry is probed at `±step` and `±2·step`, and the two central
//! differences are combined by Richardson extrapolation. That cancels the
//! `step²` truncation term, which dominates where the loss curves sharply
//! (cosine similarity of short codes), while its rounding noise stays at
//! about 1.5 times that of the plain `±step` difference. The plain `±step`
//! error is reported as well.
//!
//! Entries whose probes change any piecewise branch (relu sign, clamp
//! saturation) relative to the unperturbed forward pass are excluded: the
//! difference straddles a kink there and is not a derivative.

use crate::autodiff::{Graph, ParamId, Var};
use crate::error::{CcdError, Result};
use crate::tensor::Tensor2;

/// Denominator floor for the relative error, so entries whose true gradient
/// is ~0 are compared at this absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Against the selected difference.
    pub max_rel_error: f64,
    /// Against the plain `±step` central difference.
    pub plain_max_rel_error: f64,
    /// `(param index, flat entry)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(params: &[Tensor2], f: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, p)| g.param(ParamId(i), p.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    Ok((g, vars, loss))
}

/// Compares the taped gradient of `loss_fn` against central differences for
/// every entry of every tensor in `params`. `loss_fn` must be deterministic.
pub fn finite_diff_check<F>(params: &[Tensor2], step: f64, tolerance: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, loss) = evaluate(params, &loss_fn)?;
    let base = g.value(loss).item()?;
    if !base.is_finite() {
        return Err(CcdError::numeric("loss is non-finite at the unperturbed point"));
    }
    let signature = g.branch_signature();
    let grads = g.backward(loss)?;
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        plain_max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped_kinks: 0,
        tolerance,
    };
    let mut probe = params.to_vec();
    for pi in 0..params.len() {
        let analytic = grads
            .param(ParamId(pi))
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(params[pi].rows(), params[pi].cols()));
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            let mut side = |delta: f64| -> Result<(f64, bool)> {
                probe[pi].data_mut()[e] = orig + delta;
                let (g, _, l) = evaluate(&probe, &loss_fn)?;
                let v = g.value(l).item()?;
                if !v.is_finite() {
                    return Err(CcdError::numeric(format!(
                        "non-finite loss while probing parameter {pi} entry {e}"
                    )));
                }
                Ok((v, g.branch_signature() == signature))
            };
            let mut same = true;
            let mut central = |h: f64| -> Result<f64> {
                let (plus, sp) = side(h)?;
                let (minus, sm) = side(-h)?;
                same &= sp && sm;
                Ok((plus - minus) / (2.0 * h))
            };
            let plain = central(step)?;
            let wide = central(2.0 * step)?;
            probe[pi].data_mut()[e] = orig;
            if !same {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (4.0 * plain - wide) / 3.0;
            let a = analytic.data()[e];
            let err = relative_error(a, numeric);
            report.plain_max_rel_error = report.plain_max_rel_error.max(relative_error(a, plain));
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, e));
            }
        }
    }
    Ok(report)
}
