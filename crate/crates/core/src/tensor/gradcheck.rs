//! Central finite-difference gradient checking at 64-bit precision.
//!
//! The relative error reported for an input is
//! `max_i |analytic_i - numeric_i| / max(max_i |numeric_i|, max_i |analytic_i|, floor)`,
//! i.e. the infinity-norm error scaled by the gradient's magnitude. This
//! avoids spurious blow-ups on individual near-zero entries.

use super::graph::{Graph, Var};
use super::value::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, floor: 1e-10 }
    }
}

#[derive(Debug, Clone)]
pub struct InputReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.rel_error).fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `f` against central differences for
/// every element of every input.
///
/// `f` must rebuild the computation from scratch on the graph it is given
/// and return a scalar.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut reports = Vec::with_capacity(inputs.len());
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.tensor(*var).into_data();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..inputs[k].numel() {
            let orig = inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + cfg.step;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - cfg.step;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            numeric.push((up - down) / (2.0 * cfg.step));
        }
        let rel_error = relative_error(&analytic, &numeric, cfg.floor);
        reports.push(InputReport {
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport { inputs: reports })
}

pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(floor, f64::max);
    diff / scale
}
