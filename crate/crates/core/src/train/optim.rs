//! Adam and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub power: f64,
    pub total_iter: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, power: f64, total_iter: usize) -> Result<Self> {
        if !(base_lr > 0.0 && base_lr.is_finite()) || !power.is_finite() || total_iter == 0 {
            return Err(Error::Config(format!(
                "invalid schedule: base_lr {base_lr}, power {power}, total_iter {total_iter}"
            )));
        }
        Ok(Self {
            base_lr,
            power,
            total_iter,
        })
    }
}

/// `base_lr * (1 - iter / total_iter)^power`; iterations past the end give 0.
pub fn poly_lr(sched: &LrSchedule, iter: usize) -> f64 {
    if iter > sched.total_iter {
        log::warn!("iteration {iter} is past the schedule end {}; using lr 0", sched.total_iter);
        return 0.0;
    }
    sched.base_lr * (1.0 - iter as f64 / sched.total_iter as f64).powf(sched.power)
}

/// Bias-corrected Adam with one moment pair per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(_, p)| Tensor::zeros(p.tensor.shape()))
                .collect::<Vec<_>>()
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update of every trainable parameter holding a gradient. The
    /// whole step is rejected if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, p) in params.iter() {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (id, p) in params.iter_mut() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let Some(g) = p.tensor.take_grad() else { continue };
            let (m, v) = (self.m[id.0].values_mut(), self.v[id.0].values_mut());
            for (i, w) in p.tensor.values_mut().iter_mut().enumerate() {
                let gi = g[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * gi;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * gi * gi;
                m[i] = T::from_f64(mi);
                v[i] = T::from_f64(vi);
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + self.epsilon);
                *w = T::from_f64(w.as_f64() - update);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn schedule_examples() {
        let s = LrSchedule::new(1e-4, 0.95, 1000).unwrap();
        assert_eq!(poly_lr(&s, 0), 1e-4);
        assert_eq!(poly_lr(&s, 1000), 0.0);
        assert_eq!(poly_lr(&s, 1001), 0.0);
        assert!((poly_lr(&s, 500) - 1e-4 * 0.5f64.powf(0.95)).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for i in 0..=1000 {
            let lr = poly_lr(&s, i);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(LrSchedule::new(0.0, 0.95, 10).is_err());
        assert!(LrSchedule::new(1e-4, 0.95, 0).is_err());
    }

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", ParamGroup::Backbone, Tensor::scalar(x));
        s
    }

    #[test]
    fn matches_scalar_reference_on_square() {
        let mut store = scalar_store(1.0);
        let mut adam = Adam::new(&store);
        // reference: plain scalar transcription of the update equations
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.1 * mh / (vh.sqrt() + 1e-8);

            let id = store.find("x").unwrap();
            let cur = store.get(id).tensor.values()[0];
            store.get_mut(id).tensor.accumulate_grad(&[2.0 * cur]);
            adam.step(&mut store, 0.1).unwrap();
            let got = store.get(id).tensor.values()[0];
            assert!((got - x).abs() < 1e-12, "step {t}: {got} vs {x}");
        }
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        for g in [1e-3, 0.5, -7.0] {
            let mut store = scalar_store(0.0);
            let mut adam = Adam::new(&store);
            store.get_mut(store.find("x").unwrap()).tensor.accumulate_grad(&[g]);
            adam.step(&mut store, 0.01).unwrap();
            let x = store.iter().next().unwrap().1.tensor.values()[0];
            assert!((x + 0.01 * g.signum()).abs() < 1e-6 * 0.01 / g.abs().min(1.0));
        }
    }

    #[test]
    fn zero_gradient_frozen_and_non_finite() {
        let mut store = scalar_store(3.0);
        let mut adam = Adam::new(&store);
        let id = store.find("x").unwrap();
        store.get_mut(id).tensor.accumulate_grad(&[0.0]);
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).tensor.values()[0], 3.0);
        assert_eq!(adam.step, 1);

        store.get_mut(id).tensor.accumulate_grad(&[f64::NAN]);
        assert!(matches!(adam.step(&mut store, 0.1), Err(Error::NonFiniteGradient(n)) if n == "x"));
        assert_eq!(adam.step, 1);
        store.zero_grad();

        // frozen parameters never collect gradients and are skipped
        store.set_trainable(ParamGroup::Backbone, false);
        store.get_mut(id).tensor.accumulate_grad(&[1.0]);
        assert!(store.get(id).tensor.grad().is_none());
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.get(id).tensor.values()[0], 3.0);
    }
}
