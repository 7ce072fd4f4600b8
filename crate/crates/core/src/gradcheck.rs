//! Central finite-difference verification of tape gradients.
//!
//! The analytic gradient comes from one backward pass. Each numeric partial
//! re-evaluates the loss on a replay tape, so stop-gradient nodes hold the
//! values recorded at the unperturbed point.

use crate::autograd::{ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Base step; the actual step is `step * max(1, |θ|)`.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss` against central differences for
/// every scalar of the listed parameters (all parameters when `ids` is empty).
pub fn grad_check<F>(
    params: &mut ParamStore,
    ids: &[ParamId],
    config: GradCheckConfig,
    loss: F,
) -> GradCheckReport
where
    F: Fn(&mut Tape) -> Var,
{
    let ids: Vec<ParamId> = if ids.is_empty() {
        params.ids().collect()
    } else {
        ids.to_vec()
    };

    let (analytic, frozen) = {
        let mut tape = Tape::new(params);
        let out = loss(&mut tape);
        let grads = tape.backward(out);
        let analytic: Vec<Vec<f64>> = ids
            .iter()
            .map(|&id| match grads.param(id) {
                Some(g) => g.data().to_vec(),
                None => vec![0.0; params.get(id).len()],
            })
            .collect();
        (analytic, tape.detached_values().to_vec())
    };

    let eval = |params: &ParamStore| -> f64 {
        let mut tape = Tape::replay(params, frozen.clone());
        let out = loss(&mut tape);
        tape.scalar(out)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        entries_checked: 0,
    };
    for (id, analytic) in ids.iter().zip(&analytic) {
        for (j, &a) in analytic.iter().enumerate() {
            let original = params.get(*id).data()[j];
            let h = config.step * original.abs().max(1.0);
            params.get_mut(*id).data_mut()[j] = original + h;
            let plus = eval(params);
            params.get_mut(*id).data_mut()[j] = original - h;
            let minus = eval(params);
            params.get_mut(*id).data_mut()[j] = original;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(a, numeric, config.floor);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err.max(report.max_rel_error);
                report.worst = Some((params.name(*id).to_string(), j));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report
}
