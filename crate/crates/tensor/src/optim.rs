use std::collections::BTreeMap;

use crate::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot {
    pub m: Tensor,
    pub v: Tensor,
}

/// Adam with bias correction. State is keyed by parameter name so it can be
/// checkpointed alongside the parameters themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            slots: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter present in `grads`.
    pub fn update<'a>(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
        lr: f32,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, grad) in grads {
            let param = params
                .get_mut(name)
                .ok_or_else(|| TensorError::Shape(format!("no parameter named {name}")))?;
            if param.shape() != grad.shape() {
                return Err(TensorError::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
            });
            let p = param.data_mut();
            let m = slot.m.data_mut();
            let v = slot.v.data_mut();
            for (i, &g) in grad.data().iter().enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![1.0, -1.0]).unwrap())]);
        let grad = Tensor::new(&[2], vec![0.3, -4.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        adam.update(&mut params, [("w", &grad)], 0.1).unwrap();
        let p = params["w"].data();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = BTreeMap::from([("x".to_string(), Tensor::scalar(5.0))]);
        let mut adam = Adam::new(AdamConfig { beta1: 0.9, ..AdamConfig::default() });
        for _ in 0..2000 {
            let x = params["x"].item();
            let g = Tensor::scalar(2.0 * (x - 1.5));
            adam.update(&mut params, [("x", &g)], 0.05).unwrap();
        }
        assert!((params["x"].item() - 1.5).abs() < 1e-2);
    }
}
