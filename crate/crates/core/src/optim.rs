//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::parallel::FlushDenormals;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// Moment estimates, one pair of buffers per parameter tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub config: AdamConfig,
    /// Completed steps.
    pub t: u64,
    names: Vec<String>,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Zeroed moments mirroring `store`.
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let names = store.names().map(String::from).collect();
        let zeros: Vec<Vec<T>> = store.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
        AdamState {
            config,
            t: 0,
            names,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn first_moment(&self, i: usize) -> &[T] {
        &self.m[i]
    }

    pub fn second_moment(&self, i: usize) -> &[T] {
        &self.v[i]
    }

    fn check(&self, store: &ParamStore<T>) -> Result<()> {
        let drift = store.len() != self.names.len()
            || store
                .iter()
                .zip(&self.names)
                .zip(&self.m)
                .any(|((p, n), m)| &p.name != n || p.value.len() != m.len());
        if drift {
            return Err(Error::ParamMismatch {
                reason: "optimizer state no longer mirrors the parameter store".into(),
                names: self.names.clone(),
            });
        }
        Ok(())
    }
}

/// One in-place Adam update from the gradients currently in `store`.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    state.check(store)?;
    let _ftz = FlushDenormals::enable();
    state.t += 1;
    let c = state.config;
    let t = state.t as i32;
    let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
    let (one_b1, one_b2) = (T::of_f64(1.0 - c.beta1), T::of_f64(1.0 - c.beta2));
    let bc1 = T::of_f64(1.0 - c.beta1.powi(t));
    let bc2 = T::of_f64(1.0 - c.beta2.powi(t));
    let (lr, eps) = (T::of_f64(c.lr), T::of_f64(c.eps));
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data();
        for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn zero_grads<T: Scalar>(store: &mut ParamStore<T>) {
    store.zero_grads();
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParamKind;
    use crate::tensor::Tensor4;

    fn scalar_store(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w.weight", ParamKind::Weight, Tensor4::full([1, 1, 1, 1], w)).unwrap();
        s.iter_mut().next().unwrap().grad.fill(g);
        s
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut s = scalar_store(0.25, 0.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        assert_eq!(s.value("w.weight").unwrap().data(), &[0.25]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so Δw = -lr·g/(|g| + ε).
        let mut s = scalar_store(0.0, 2.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        let want = -1e-3 * 2.0 / (2.0 + 1e-8);
        assert!((s.value("w.weight").unwrap().data()[0] - want).abs() < 1e-18);
    }

    #[test]
    fn constant_gradient_two_steps() {
        let mut s = scalar_store(0.0, 2.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        let w1 = s.value("w.weight").unwrap().data()[0];
        adam_step(&mut s, &mut st).unwrap();
        let w2 = s.value("w.weight").unwrap().data()[0];
        // With a constant gradient the bias-corrected moments stay g and g².
        let step = 1e-3 * 2.0 / (2.0 + 1e-8);
        assert!(w2 < w1 && w1 < 0.0);
        assert!((w2 - (-2.0 * step)).abs() < 1e-15);
    }

    #[test]
    fn first_step_bounded_by_lr() {
        let mut s = ParamStore::<f32>::new();
        let g = Tensor4::from_fn([4, 3, 2, 2], |i| ((i * 37 % 11) as f32 - 5.0) * 10f32.powi(i as i32 % 5 - 2));
        s.insert("a.weight", ParamKind::Weight, Tensor4::zeros([4, 3, 2, 2])).unwrap();
        s.iter_mut().next().unwrap().grad = g;
        let mut st = AdamState::new(&s, AdamConfig::default());
        adam_step(&mut s, &mut st).unwrap();
        assert!(s.value("a.weight").unwrap().data().iter().all(|w| w.abs() <= 1e-3 * (1.0 + 1e-6)));
        assert!(st.second_moment(0).iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn shape_drift_is_an_error() {
        let mut s = scalar_store(0.0, 1.0);
        let mut st = AdamState::new(&s, AdamConfig::default());
        s.insert("x.bias", ParamKind::Bias, Tensor4::zeros([1, 1, 1, 1])).unwrap();
        assert!(adam_step(&mut s, &mut st).is_err());
    }

    #[test]
    fn zero_grads_is_idempotent() {
        let mut s = scalar_store(1.0, 3.0);
        zero_grads(&mut s);
        zero_grads(&mut s);
        assert_eq!(s.get("w.weight").unwrap().grad.data(), &[0.0]);
    }
}
