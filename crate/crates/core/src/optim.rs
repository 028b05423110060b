//! Adam for the generator, SGD with momentum for the discriminator.

use crate::error::{shape_mismatch, Result};
use crate::nn::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moments are kept per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<R: Real = f32> {
    pub cfg: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

fn zeros_like<R: Real>(store: &ParamStore<R>) -> Vec<Tensor<R>> {
    store
        .params()
        .iter()
        .map(|p| Tensor::zeros(p.tensor.shape()).expect("parameter shapes are valid"))
        .collect()
}

fn grad_of<'a, R: Real>(name: &str, t: &'a Tensor<R>) -> Result<Option<&'a [R]>> {
    match &t.grad {
        None => Ok(None),
        Some(g) if g.len() == t.len() => Ok(Some(g)),
        Some(g) => Err(shape_mismatch(format!(
            "gradient of {name} has {} values, parameter has {}",
            g.len(),
            t.len()
        ))),
    }
}

fn check_state<R: Real>(store: &ParamStore<R>, states: &[&Vec<Tensor<R>>]) -> Result<()> {
    for state in states {
        if state.len() != store.params().len()
            || state.iter().zip(store.params()).any(|(s, p)| s.shape() != p.tensor.shape())
        {
            return Err(shape_mismatch("optimizer state does not match parameters"));
        }
    }
    Ok(())
}

impl<R: Real> Adam<R> {
    pub fn new(cfg: AdamConfig, store: &ParamStore<R>) -> Self {
        Self {
            cfg,
            step: 0,
            m: zeros_like(store),
            v: zeros_like(store),
        }
    }

    /// One update from the `grad` slots of `store`. Parameters without a
    /// gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<R>) -> Result<()> {
        check_state(store, &[&self.m, &self.v])?;
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (R::of(self.cfg.beta1), R::of(self.cfg.beta2));
        let c1 = R::one() / (R::one() - b1.powi(t));
        let c2 = R::one() / (R::one() - b2.powi(t));
        let (lr, eps) = (R::of(self.cfg.lr), R::of(self.cfg.eps));
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = grad_of(&p.name, &p.tensor)? else {
                continue;
            };
            let g = g.to_vec();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (R::one() - b1) * g[k];
                v[k] = b2 * v[k] + (R::one() - b2) * g[k] * g[k];
                let m_hat = m[k] * c1;
                let v_hat = v[k] * c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            momentum: 0.5,
        }
    }
}

/// `v <- momentum * v + g; w <- w - lr * v`.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdMomentum<R: Real = f32> {
    pub cfg: SgdConfig,
    pub step: u64,
    pub velocity: Vec<Tensor<R>>,
}

impl<R: Real> SgdMomentum<R> {
    pub fn new(cfg: SgdConfig, store: &ParamStore<R>) -> Self {
        Self {
            cfg,
            step: 0,
            velocity: zeros_like(store),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<R>) -> Result<()> {
        check_state(store, &[&self.velocity])?;
        self.step += 1;
        let (lr, mu) = (R::of(self.cfg.lr), R::of(self.cfg.momentum));
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let Some(g) = grad_of(&p.name, &p.tensor)? else {
                continue;
            };
            let g = g.to_vec();
            let vel = self.velocity[i].data_mut();
            for (k, w) in p.tensor.data_mut().iter_mut().enumerate() {
                vel[k] = mu * vel[k] + g[k];
                *w -= lr * vel[k];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    fn single(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add_param("w".into(), ParamKind::Kernel, &[1]).unwrap();
        let p = s.param_mut("w").unwrap();
        p.data_mut()[0] = w;
        p.grad = Some(vec![g]);
        s
    }

    fn w(s: &ParamStore<f64>) -> f64 {
        s.param("w").unwrap().data()[0]
    }

    #[test]
    fn adam_first_step_by_hand() {
        let mut s = single(1.0, 0.5);
        let mut opt = Adam::new(AdamConfig::default(), &s);
        opt.step(&mut s).unwrap();
        // m_hat = 0.5, v_hat = 0.25, update = -2e-4 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 2e-4 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((w(&s) - expected).abs() < 1e-15);
        assert!((w(&s) - 0.9998).abs() < 1e-10);
    }

    #[test]
    fn adam_first_step_is_lr_for_any_gradient() {
        for g in [1e-3, 0.5, 3.0, -40.0] {
            let mut s = single(0.0, g);
            let mut opt = Adam::new(AdamConfig::default(), &s);
            opt.step(&mut s).unwrap();
            let exact = 2e-4 * g.abs() / (g.abs() + 1e-8);
            assert!((w(&s).abs() - exact).abs() < 1e-15, "g = {g}");
            assert!((w(&s).abs() - 2e-4).abs() < 2e-4 * 1e-5, "g = {g}");
        }
    }

    #[test]
    fn zero_gradient_leaves_weight() {
        let mut s = single(1.0, 0.0);
        Adam::new(AdamConfig::default(), &s).step(&mut s).unwrap();
        assert_eq!(w(&s), 1.0);
        let mut s = single(1.0, 0.0);
        SgdMomentum::new(SgdConfig::default(), &s).step(&mut s).unwrap();
        assert_eq!(w(&s), 1.0);
    }

    #[test]
    fn sgd_momentum_recurrence() {
        let mut s = single(1.0, 1.0);
        let mut opt = SgdMomentum::new(SgdConfig { lr: 0.1, momentum: 0.5 }, &s);
        opt.step(&mut s).unwrap();
        assert!((w(&s) - 0.9).abs() < 1e-15);
        assert_eq!(opt.velocity[0].data(), &[1.0]);
        opt.step(&mut s).unwrap();
        assert!((w(&s) - 0.75).abs() < 1e-15);
        assert_eq!(opt.velocity[0].data(), &[1.5]);
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let mut s = single(1.0, 2.0);
        SgdMomentum::new(SgdConfig { lr: 0.1, momentum: 0.0 }, &s).step(&mut s).unwrap();
        assert!((w(&s) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn both_optimizers_descend_on_a_parabola() {
        // f(w) = w^2, f'(w) = 2w, from w = 1.
        let mut s = single(1.0, 2.0);
        Adam::new(AdamConfig::default(), &s).step(&mut s).unwrap();
        assert!(w(&s).powi(2) < 1.0);
        let mut s = single(1.0, 2.0);
        SgdMomentum::new(SgdConfig::default(), &s).step(&mut s).unwrap();
        assert!(w(&s).powi(2) < 1.0);
    }

    #[test]
    fn mismatched_gradient_is_rejected() {
        let mut s = single(1.0, 1.0);
        s.param_mut("w").unwrap().grad = Some(vec![1.0, 2.0]);
        assert!(Adam::new(AdamConfig::default(), &s).step(&mut s).is_err());
    }
}
