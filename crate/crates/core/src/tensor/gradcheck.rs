//! Central finite-difference verification of tape gradients.

use super::{Param, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Index of the worst scalar inside the parameter.
    pub argmax: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Compare tape gradients against central finite differences
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every trainable scalar.
///
/// `build` must construct the loss from the given leaves (bound to `params`
/// in order) and be deterministic; it is re-invoked for every probe.
/// Relative error is `|a−n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(params: &mut [Param], eps: f64, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Param(format!("grad_check eps must be positive, got {eps}")));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).data()[0].is_finite() {
        return Err(Error::Eval("grad_check: non-finite loss".into()));
    }
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params.iter())
        .map(|(v, p)| {
            grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
        })
        .collect();
    drop(tape);

    let eval = |params: &mut [Param], build: &mut F| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = params.iter().map(|p| t.param(p)).collect();
        let l = build(&mut t, &vs)?;
        let v = t.value(l).data()[0];
        if !v.is_finite() {
            return Err(Error::Eval("grad_check: non-finite loss".into()));
        }
        Ok(v)
    };

    let mut entries = Vec::new();
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        let mut worst = GradCheckEntry {
            name: params[pi].name.clone(),
            max_rel_err: 0.0,
            argmax: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for si in 0..params[pi].value.numel() {
            let orig = params[pi].value.data()[si];
            params[pi].value.data_mut()[si] = orig + eps;
            let fp = eval(params, &mut build)?;
            params[pi].value.data_mut()[si] = orig - eps;
            let fm = eval(params, &mut build)?;
            params[pi].value.data_mut()[si] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[si];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.max_rel_err {
                worst.max_rel_err = rel;
                worst.argmax = si;
                worst.analytic = a;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { entries })
}
