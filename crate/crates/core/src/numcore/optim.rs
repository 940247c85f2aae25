use super::params::ParamStore;
use crate::error::{Error, Result};

/// AdamW hyperparameters (decoupled weight decay).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Applies one AdamW update to every trainable parameter.
///
/// Every trainable parameter must carry a gradient; frozen parameters are
/// skipped and keep their moment state.
pub fn adamw_step(store: &mut ParamStore, opt: &AdamW) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
        return Err(Error::MissingGrad(name.to_string()));
    }
    let (b1, b2) = opt.betas;
    for (_, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let grad = p.grad.as_ref().expect("checked above");
        p.steps += 1;
        let bc1 = 1.0 - b1.powi(p.steps as i32);
        let bc2 = 1.0 - b2.powi(p.steps as i32);
        let values = p.value.data_mut();
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        for i in 0..values.len() {
            let g = grad.data()[i];
            let w = values[i];
            let decayed = w - opt.lr * opt.weight_decay * w;
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] = decayed - opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}
