use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{Real, Tensor};

/// Adam with coupled (L2) weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn from_config(params: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.adam_eps)
    }

    /// Applies one update from the gradients currently held in `params`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bias1 = 1.0 - self.beta1.powi(t);
        let bias2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let wd = T::lit(self.weight_decay);
        let lr = T::lit(self.lr);
        let (bias1, bias2, eps) = (T::lit(bias1), T::lit(bias2), T::lit(self.eps));

        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (i, value) in values.iter_mut().enumerate() {
                let g = grads[i] + wd * *value;
                let mi = b1 * m.data()[i] + one_b1 * g;
                let vi = b2 * v.data()[i] + one_b2 * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *value = *value - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.register("x", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.25);
        let mut adam = AdamState::new(&s, 0.1, 0.0, 0.9, 0.999, 1e-8);
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.25]);
    }

    #[test]
    fn hand_traced_three_steps() {
        // g = 1 every step: m_t = 1 − 0.9^t, v_t = 1 − 0.999^t, so both
        // bias-corrected moments are exactly 1 and each step moves by
        // lr / (1 + eps).
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, 0.1, 0.0, 0.9, 0.999, 1e-8);
        let mut expected = 0.0;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=3 {
            s.iter_mut().next().unwrap().grad = Tensor::scalar(1.0);
            adam.step(&mut s).unwrap();
            m = 0.9 * m + 0.1;
            v = 0.999 * v + 0.001;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            expected -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
            let got = s.iter().next().unwrap().value.data()[0];
            assert!((got - expected).abs() < 1e-12, "step {t}: {got} vs {expected}");
            assert!((got + 0.1 * t as f64).abs() < 1e-8);
        }
        assert!((adam.first_moment[0].data()[0] - (1.0 - 0.9f64.powi(3))).abs() < 1e-15);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let mut s = scalar_store(0.0);
        let mut adam = AdamState::new(&s, 0.01, 0.0, 0.9, 0.999, 1e-8);
        let mut prev = 0.0;
        let mut last_step = 0.0;
        for _ in 0..500 {
            s.iter_mut().next().unwrap().grad = Tensor::scalar(-3.0);
            adam.step(&mut s).unwrap();
            let now = s.iter().next().unwrap().value.data()[0];
            last_step = now - prev;
            prev = now;
        }
        assert!((last_step - 0.01).abs() < 1e-6, "{last_step}");
    }

    #[test]
    fn weight_decay_is_added_to_gradient() {
        let mut s = scalar_store(2.0);
        let mut adam = AdamState::new(&s, 0.1, 0.5, 0.9, 0.999, 1e-8);
        adam.step(&mut s).unwrap();
        // effective gradient 0 + 0.5·2 = 1, first step moves by lr
        assert!((s.iter().next().unwrap().value.data()[0] - 1.9).abs() < 1e-8);
    }

    #[test]
    fn nan_gradient_aborts_without_mutation() {
        let mut s = scalar_store(1.0);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(f64::NAN);
        let mut adam = AdamState::new(&s, 0.1, 0.0, 0.9, 0.999, 1e-8);
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains('x'));
        assert_eq!(adam.step, 0);
        assert_eq!(s.iter().next().unwrap().value.data(), &[1.0]);
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let mut s = scalar_store(0.123456789);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(5.0);
        let mut adam = AdamState::new(&s, 0.0, 5e-4, 0.9, 0.999, 1e-8);
        adam.step(&mut s).unwrap();
        assert_eq!(s.iter().next().unwrap().value.data()[0].to_bits(), 0.123456789f64.to_bits());
    }
}
