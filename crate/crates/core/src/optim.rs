//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.99,
            epsilon: 1e-8,
        }
    }
}

/// Moment buffers for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &[f64] {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &[f64] {
        &self.second[index]
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update of every parameter from its accumulated gradient.
    ///
    /// Parameters without a gradient buffer are treated as having a zero
    /// gradient, which leaves them unchanged.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.first.len() {
            return Err(dim_err!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            ));
        }
        self.step += 1;
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let t = store.get_mut(id);
            if t.numel() != self.first[i].len() {
                return Err(dim_err!(
                    "parameter {} has {} values, moments have {}",
                    i,
                    t.numel(),
                    self.first[i].len()
                ));
            }
            let grad = t.grad().map(<[f64]>::to_vec);
            let grad = grad.unwrap_or_else(|| vec![0.0; t.numel()]);
            adam_update(
                t.data_mut(),
                &grad,
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                &self.config,
            )?;
        }
        Ok(())
    }
}

/// Applies one Adam step at (1-based) `step` to a flat parameter buffer.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grad.len() != param.len() || m.len() != param.len() || v.len() != param.len() {
        return Err(dim_err!(
            "adam: param {}, grad {}, moments {}/{}",
            param.len(),
            grad.len(),
            m.len(),
            v.len()
        ));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn defaults() {
        let c = AdamConfig::default();
        assert_eq!((c.learning_rate, c.beta1, c.beta2), (2e-4, 0.5, 0.99));
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut st = AdamState::new(&store, AdamConfig::default());
        for _ in 0..2 {
            store.get_mut(id).accumulate_grad(&[0.0; 3]).unwrap();
            st.step(&mut store).unwrap();
            store.zero_grad();
        }
        assert_eq!(store.get(id).data(), &[0.5, -1.0, 2.0]);
        assert_eq!(st.first_moment(0), &[0.0; 3]);
        assert_eq!(st.second_moment(0), &[0.0; 3]);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let cfg = AdamConfig {
            learning_rate: 0.1,
            ..AdamConfig::default()
        };
        let (mut p, mut m, mut v) = ([0.0], [0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg).unwrap();
        // m̂ = v̂ = 1 after bias correction.
        assert!((p[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        assert!(adam_update(&mut p, &[1.0], &mut m, &mut v, 1, &cfg).is_err());
    }
}
