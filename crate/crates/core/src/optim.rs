//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter moment estimates and step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

impl<T: Element> AdamWState<T> {
    pub fn new(dims: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(dims.to_vec()),
            v: Tensor::zeros(dims.to_vec()),
            t: 0,
        }
    }
}

/// One AdamW update in place: `p -= lr*wd*p`, then the bias-corrected Adam step.
pub fn adamw_step<T: Element>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<()> {
    if param.dims() != grad.dims() || param.dims() != state.m.dims() || param.dims() != state.v.dims() {
        return Err(Error::Shape(format!(
            "adamw shapes differ: param {:?}, grad {:?}, m {:?}, v {:?}",
            param.dims(),
            grad.dims(),
            state.m.dims(),
            state.v.dims()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = T::from_f64(cfg.lr);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let eps = T::from_f64(cfg.eps);
    let decay = T::one() - lr * T::from_f64(cfg.weight_decay);
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (m, v) = (state.m.data_mut(), state.v.data_mut());
    for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
        *p *= decay;
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_without_decay_is_noop() {
        let mut p = Tensor::<f64>::from_fn(vec![3], |i| i as f64 - 1.0);
        let before = p.clone();
        let mut st = AdamWState::new(p.dims());
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &Tensor::zeros(vec![3]), &mut st, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_with_decay_shrinks() {
        let mut p = Tensor::<f64>::full(vec![2], 2.0);
        let mut st = AdamWState::new(p.dims());
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adamw_step(&mut p, &Tensor::zeros(vec![2]), &mut st, &cfg).unwrap();
        assert!(p.data().iter().all(|&x| (x - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-15));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::<f32>::zeros(vec![2]);
        let mut st = AdamWState::new(&[2]);
        let r = adamw_step(&mut p, &Tensor::zeros(vec![3]), &mut st, &AdamWConfig::default());
        assert!(matches!(r, Err(Error::Shape(_))));
        assert_eq!(st.t, 0);
    }
}
