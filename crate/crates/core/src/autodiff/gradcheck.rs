//! Central finite-difference check of analytic gradients, run in `f64`.
//!
//! The closure builds a scalar from leaf variables; the checker perturbs each
//! input element by `±step` and compares `(f(x+h) − f(x−h)) / 2h` against the
//! reverse-mode result. Elements whose perturbation flips the sign pattern of
//! a relu/abs input are skipped: the function is not differentiable across
//! that segment and a finite difference says nothing about the gradient.

use crate::error::Result;
use crate::tensor::Tensor;

use super::{Graph, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per input: `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_errors: Vec<f64>,
    pub checked: usize,
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<(f64, u64)> {
        let g = Graph::instrumented();
        let vars: Vec<_> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&g, &vars)?.item()?;
        Ok((out, g.kink_signature().unwrap_or(0)))
    };

    let g = Graph::instrumented();
    let vars: Vec<_> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let loss = f(&g, &vars)?;
    let base_sig = g.kink_signature().unwrap_or(0);
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|v| grads.wrt(*v)).collect();

    let mut report = GradCheckReport {
        rel_errors: Vec::with_capacity(inputs.len()),
        checked: 0,
        skipped: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let (fp, sp) = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let (fm, sm) = eval(&work)?;
            work[i].data_mut()[j] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let numeric = (fp - fm) / (2.0 * step);
            let av = a.data()[j];
            diff2 += (av - numeric).powi(2);
            a2 += av * av;
            n2 += numeric * numeric;
        }
        let denom = a2.sqrt().max(n2.sqrt());
        report
            .rel_errors
            .push(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom });
    }
    Ok(report)
}
