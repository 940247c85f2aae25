//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Largest `|analytic − numeric| / max(1, |analytic|)` over every input
/// coordinate, with central differences of step [`FD_STEP`].
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| g.constant(x.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&g, &vars)?;
    let grads = g.backward(out)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[k].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros).clone();
        for i in 0..inputs[k].len() {
            let x0 = inputs[k].data()[i];
            probe[k].data_mut()[i] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = x0;
            worst = worst.max(rel_err(analytic.data()[i], (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}

/// Gradient check against stored parameters.
///
/// At most `per_param` coordinates of each parameter are probed (chosen by
/// `rng`), which keeps full-model checks tractable.
pub fn grad_check_params<F>(
    store: &ParamStore,
    per_param: usize,
    rng: &mut Rng,
    f: F,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let out = f(&g, store)?;
    let grads = g.backward(out)?;
    let mut probe = store.clone();
    probe.zero_grad();
    probe.accumulate_grads(&g, &grads)?;
    let analytic: Vec<(String, Option<Tensor>)> = probe
        .iter()
        .map(|(n, p)| (n.to_string(), p.grad.clone()))
        .collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let g = Graph::new();
        Ok(f(&g, s)?.value().item())
    };
    let mut worst: f64 = 0.0;
    for (name, grad) in analytic {
        let len = probe.value(&name)?.len();
        let coords: Vec<usize> = if len <= per_param {
            (0..len).collect()
        } else {
            (0..per_param).map(|_| rng.below(len)).collect()
        };
        for i in coords {
            let x0 = probe.value(&name)?.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = x0 + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = x0 - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = x0;
            let a = grad.as_ref().map_or(0.0, |g| g.data()[i]);
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    Ok(worst)
}
