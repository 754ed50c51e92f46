//! Adam with bias-corrected moments.
//!
//! State lives outside the optimizer so training can checkpoint and resume
//! mid-run: the caller owns one [`AdamState`] per parameter map and feeds it
//! back on every step.

use crate::error::Error;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One Adam update over every parameter that has a gradient.
///
/// Gradients are validated first: if any contains a NaN or infinity the
/// function returns an error and neither the parameters nor the state have
/// been touched.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<(), Error> {
    for (name, g) in grads {
        if !params.contains_key(name) {
            return Err(Error::UnknownParam(name.clone()));
        }
        if g.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).unwrap();
        let (rows, cols) = p.shape();
        debug_assert_eq!(g.shape(), (rows, cols));
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(rows, cols));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(rows, cols));
        let pd = p.data_mut();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.data()[i];
            md[i] = config.beta1 * md[i] + (1.0 - config.beta1) * gi;
            vd[i] = config.beta2 * vd[i] + (1.0 - config.beta2) * gi * gi;
            let mhat = md[i] / bc1;
            let vhat = vd[i] / bc2;
            pd[i] -= config.lr * mhat / (vhat.sqrt() + config.eps);
        }
    }
    Ok(())
}

/// Scales the whole gradient map so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let total: f64 = grads
        .values()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if total > max_norm {
        let s = max_norm / total;
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), t);
        m
    }

    #[test]
    fn first_step_moves_by_lr() {
        // with bias correction the very first step is lr * g / (|g| + eps)
        let mut params = single("w", Tensor::scalar(1.0));
        let grads = single("w", Tensor::scalar(0.5));
        let mut state = AdamState::default();
        let cfg = AdamConfig { lr: 0.1, ..AdamConfig::default() };
        adam_step(&mut params, &grads, &mut state, &cfg).unwrap();
        let got = params["w"].item();
        assert!((got - (1.0 - 0.1)).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn nan_gradient_leaves_params_untouched() {
        let mut params = single("w", Tensor::scalar(1.0));
        let grads = single("w", Tensor::scalar(f64::NAN));
        let mut state = AdamState::default();
        let err = adam_step(&mut params, &grads, &mut state, &AdamConfig::default());
        assert!(err.is_err());
        assert_eq!(params["w"].item(), 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut grads = single("w", Tensor::from_vec(1, 2, vec![3.0, 4.0]).unwrap());
        let norm = clip_grad_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let clipped = grads["w"].frobenius_norm();
        assert!((clipped - 1.0).abs() < 1e-12);
    }
}
