//! Adam with bias correction, plus global-norm gradient clipping.

use std::collections::HashMap;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Per-parameter first/second moment estimates keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamState<E> {
    pub config: AdamConfig,
    pub step_count: u64,
    moments: HashMap<String, (Tensor<E>, Tensor<E>)>,
}

impl<E: Element> AdamState<E> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            moments: HashMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Tensor<E>, Tensor<E>)> {
        self.moments.get(name)
    }

    pub fn import_moments(&mut self, name: String, m: Tensor<E>, v: Tensor<E>) {
        self.moments.insert(name, (m, v));
    }

    /// Name-sorted copy of the moment estimates (for checkpoints).
    pub fn snapshot(&self) -> Vec<(String, Tensor<E>, Tensor<E>)> {
        let mut out: Vec<(String, Tensor<E>, Tensor<E>)> = self
            .moments
            .iter()
            .map(|(k, (m, v))| (k.clone(), m.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn restore(config: AdamConfig, step_count: u64, moments: Vec<(String, Tensor<E>, Tensor<E>)>) -> Self {
        let mut state = AdamState::new(config);
        state.step_count = step_count;
        for (name, m, v) in moments {
            state.moments.insert(name, (m, v));
        }
        state
    }

    /// One Adam update over every unfrozen parameter in `params`.
    ///
    /// Frozen tensors (and frozen elements) are left bitwise untouched and
    /// their moments are not advanced. A missing gradient for an unfrozen
    /// parameter is an error; extra gradients are ignored.
    pub fn step(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &HashMap<String, Tensor<E>>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let b1 = E::from_f64(self.config.beta1);
        let b2 = E::from_f64(self.config.beta2);
        let lr = E::from_f64(self.config.lr);
        let eps = E::from_f64(self.config.eps);
        let bias1 = E::one() - E::from_f64(self.config.beta1.powi(t as i32));
        let bias2 = E::one() - E::from_f64(self.config.beta2.powi(t as i32));

        for p in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let g = grads.get(&p.name).ok_or_else(|| {
                Error::Optim(format!("missing gradient for unfrozen parameter {:?}", p.name))
            })?;
            if g.shape() != p.tensor.shape() {
                return Err(Error::Optim(format!(
                    "gradient shape {:?} does not match parameter {:?} {:?}",
                    g.shape(),
                    p.name,
                    p.tensor.shape()
                )));
            }
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (Tensor::zeros(p.tensor.shape()), Tensor::zeros(p.tensor.shape())));

            let frozen_elems = p.frozen_elems.as_deref();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                if let Some(mask) = frozen_elems {
                    if mask[i] {
                        continue;
                    }
                }
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (E::one() - b1) * gi;
                let vi = b2 * v.data()[i] + (E::one() - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm
/// exceeds `max_norm`; otherwise the gradients pass through unchanged.
pub fn clip_global_norm<E: Element>(grads: &mut HashMap<String, Tensor<E>>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let mut sq = 0.0f64;
    // Norm accumulation follows a sorted key order so the result does not
    // depend on hash iteration order.
    let mut names: Vec<&String> = grads.keys().collect();
    names.sort();
    for name in &names {
        for &x in grads[*name].data() {
            let xf = x.to_f64();
            sq += xf * xf;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            for x in g.data_mut() {
                *x = *x * scale;
            }
        }
    }
    norm
}
