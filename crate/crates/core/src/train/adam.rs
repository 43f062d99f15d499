//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParameterStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err(Error::Config(format!(
                "Adam moments must lie in (0, 1), got beta1 {} beta2 {}",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("Adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// One Adam update of a flat parameter slice. `step` is the 1-based index
/// of this update.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    config: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || m.len() != n || v.len() != n {
        return Err(Error::Optimizer(format!(
            "length mismatch: params {n}, grads {}, moments {}/{}",
            grads.len(),
            m.len(),
            v.len()
        )));
    }
    if step == 0 {
        return Err(Error::Optimizer("step index starts at 1".into()));
    }
    let (b1, b2) = (T::c(config.beta1), T::c(config.beta2));
    let one = T::one();
    let c1 = one / (one - b1.powi(step as i32));
    let c2 = one / (one - b2.powi(step as i32));
    let (lr, eps) = (T::c(lr), T::c(config.eps));
    for i in 0..n {
        let g = grads[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] * c1;
        let v_hat = v[i] * c2;
        params[i] = params[i] - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam state for a whole parameter store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Updates applied so far.
    pub step: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    /// Zero moments shaped like every parameter in `params`.
    pub fn new(config: AdamConfig, params: &ParameterStore<T>) -> Self {
        let zeros = |_: ()| -> BTreeMap<String, Tensor<T>> {
            params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    /// Apply one update to every parameter using its stored gradient.
    /// Parameters without a gradient count as zero gradient.
    pub fn update(&mut self, params: &mut ParameterStore<T>, lr: f64) -> Result<()> {
        self.step += 1;
        for (name, p) in params.iter_mut() {
            let (m, v) = match (self.m.get_mut(name), self.v.get_mut(name)) {
                (Some(m), Some(v)) => (m, v),
                _ => return Err(Error::Optimizer(format!("no optimizer state for {name}"))),
            };
            let grads = p
                .grad()
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.numel()]);
            adam_step(
                p.data_mut(),
                &grads,
                m.data_mut(),
                v.data_mut(),
                self.step,
                lr,
                &self.config,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0f64, -2.0];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, [1.0, -2.0]);
        assert_eq!((m, v), (vec![0.0; 2], vec![0.0; 2]));

        let (mut m, mut v) = (vec![0.5, 0.1], vec![0.2, 0.4]);
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 3, 0.1, &AdamConfig::default()).unwrap();
        assert!((m[0] - 0.45).abs() < 1e-15 && (v[1] - 0.3996).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_lr_sign() {
        let mut p = vec![0.0f64; 4];
        let g = [3.0, -0.5, 1e-3, -40.0];
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        adam_step(&mut p, &g, &mut m, &mut v, 1, 1e-3, &AdamConfig::default()).unwrap();
        for (d, g) in p.iter().zip(g) {
            assert!(d.signum() == -g.signum());
            assert!(d.abs() >= 0.9e-3 && d.abs() <= 1e-3);
        }
    }

    #[test]
    fn length_mismatch() {
        let mut p = vec![0.0f64; 2];
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        let r = adam_step(&mut p, &[1.0], &mut m, &mut v, 1, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::Optimizer(_))));
    }
}
