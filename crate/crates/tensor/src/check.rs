//! Central finite-difference gradient checking.
//!
//! Used by tests across the workspace. The numeric side never touches the
//! backward pass: it only re-runs the forward closure on perturbed inputs.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::Result;

/// Default step for central differences in f64.
pub const FD_STEP: f64 = 1e-5;

/// Analytic vs numeric gradients for one input tensor.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, or the absolute error when both are tiny.
    pub fn rel_error(&self) -> f64 {
        rel_error(&self.analytic, &self.numeric)
    }
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Builds `f` on fresh graphs, compares backward gradients of each input with
/// central differences of step `h`. `f` must return a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, an) in analytic.into_iter().enumerate() {
        let mut numeric = vec![0.0; an.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let orig = work[ti].data()[k];
            work[ti].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[k] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(GradCheck {
            analytic: an,
            numeric,
        });
    }
    Ok(out)
}

/// Worst relative error over all inputs of [`check_gradients`].
pub fn max_rel_error<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    Ok(check_gradients(inputs, FD_STEP, f)?
        .iter()
        .map(GradCheck::rel_error)
        .fold(0.0, f64::max))
}
