use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

/// Hyperparameters and moment estimates of Adam with a fixed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub step_count: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Adam hyperparameters; the moments live in [`AdamState`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Adam {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-7
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }
}

impl Adam {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be non-negative".into()));
        }
        Ok(())
    }

    /// Fresh state with zeroed moments shaped after `params`.
    pub fn init<T: Scalar>(&self, params: &ParamStore<T>) -> Result<AdamState<T>> {
        self.validate()?;
        let m: Vec<Vec<T>> = params
            .ids()
            .map(|id| vec![T::zero(); params.get(id).len()])
            .collect();
        let v = m.clone();
        Ok(AdamState {
            step_count: 0,
            m,
            v,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        })
    }
}

impl<T: Scalar> AdamState<T> {
    /// One bias-corrected Adam update using each parameter's grad slot.
    /// Parameters without an allocated grad slot are treated as zero-gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract(
                "adam_step",
                format!("state tracks {} tensors, store has {}", self.m.len(), params.len()),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.beta2);
        let c1 = T::from_f64(1.0 - self.beta1.powi(t));
        let c2 = T::from_f64(1.0 - self.beta2.powi(t));
        let lr = T::from_f64(self.learning_rate);
        let eps = T::from_f64(self.epsilon);

        for ((tensor, m), v) in params.tensors_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != tensor.len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("moment length {} vs parameter length {}", m.len(), tensor.len()),
                ));
            }
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                // zero gradient: moments still decay
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi = b1 * *mi;
                    *vi = b2 * *vi;
                }
                apply(tensor.data_mut(), m, v, c1, c2, lr, eps);
                continue;
            };
            for ((mi, vi), &g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *mi = b1 * *mi + one_minus_b1 * g;
                *vi = b2 * *vi + one_minus_b2 * g * g;
            }
            apply(tensor.data_mut(), m, v, c1, c2, lr, eps);
        }
        Ok(())
    }
}

fn apply<T: Scalar>(data: &mut [T], m: &[T], v: &[T], c1: T, c2: T, lr: T, eps: T) {
    for ((p, &mi), &vi) in data.iter_mut().zip(m).zip(v) {
        let m_hat = mi / c1;
        let v_hat = vi / c2;
        *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f32], grads: &[f32]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        let id = s
            .insert("p", Tensor::new([values.len()], values.to_vec()).unwrap())
            .unwrap();
        s.get_mut(id).grad_mut().copy_from_slice(grads);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(&[0.3, -1.2, 4.0], &[0.0; 3]);
        let before = s.clone();
        let mut st = Adam::default().init(&s).unwrap();
        for _ in 0..5 {
            st.step(&mut s).unwrap();
        }
        assert_eq!(s.by_name("p").unwrap().data(), before.by_name("p").unwrap().data());
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        let lr = 1e-3;
        let grads = [2.5f32, -0.75, 40.0];
        let mut s = store(&[0.0; 3], &grads);
        let mut st = Adam::with_learning_rate(lr).init(&s).unwrap();
        st.step(&mut s).unwrap();
        for (&p, &g) in s.by_name("p").unwrap().data().iter().zip(&grads) {
            // closed form: lr·g / (sqrt(g²) + eps)
            let expected = -(lr * g as f64 / ((g as f64).abs() + 1e-7));
            assert!(((p as f64) - expected).abs() <= 1e-6 * lr, "{p} vs {expected}");
            assert!(p.signum() == -g.signum());
        }
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(Adam::with_learning_rate(0.0).validate().is_err());
        assert!(Adam {
            beta1: 1.0,
            ..Adam::default()
        }
        .validate()
        .is_err());
    }
}
