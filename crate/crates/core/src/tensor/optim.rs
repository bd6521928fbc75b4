use crate::error::{invalid_arg, Result};
use crate::params::{ParamGrads, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment of parameter `index`, if it has been updated.
    pub fn moments(&self, index: usize) -> Option<(&[T], &[T])> {
        self.moments
            .get(index)?
            .as_ref()
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    /// One update of every trainable parameter in `params`.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &ParamGrads<T>) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid_arg!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            ));
        }
        for ((_, p), g) in params.iter().zip(grads) {
            match g {
                None if p.trainable => {
                    return Err(invalid_arg!("missing gradient for trainable parameter {:?}", p.name))
                }
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(invalid_arg!(
                        "gradient shape {:?} does not match parameter {:?} {:?}",
                        g.shape(),
                        p.name,
                        p.value.shape()
                    ))
                }
                _ => {}
            }
        }
        self.moments.resize(params.len(), None);
        self.step += 1;

        let c = self.config;
        let t = self.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        let decay = T::lit(1.0 - c.lr * c.weight_decay);
        let (inv_bc1, inv_bc2) = (T::lit(1.0 / bc1), T::lit(1.0 / bc2));

        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let param = params.get_mut(id);
            if !param.trainable {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let (m, v) = self.moments[i].get_or_insert_with(|| {
                let n = param.value.len();
                (vec![T::zero(); n], vec![T::zero(); n])
            });
            for (((w, &gi), mi), vi) in param
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi * inv_bc1;
                let v_hat = *vi * inv_bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
