use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// AdamW hyperparameters. Defaults: lr 5e-5, weight decay 1e-3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && [self.lr, self.eps, self.weight_decay]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// Adam moments for an ordered list of parameter tensors, with decoupled
/// weight decay (`p ← p − lr·wd·p` before the Adam update).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes
            .into_iter()
            .map(|n| (vec![T::zero(); n], vec![T::zero(); n]))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn for_params<'a>(
        config: AdamConfig,
        params: impl IntoIterator<Item = &'a Tensor<T>>,
    ) -> Self {
        Self::new(config, params.into_iter().map(Tensor::len))
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam_step",
                left: vec![self.m.len()],
                right: vec![params.len(), grads.len()],
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: vec![g.len(), m.len()],
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let lr = T::of(c.lr);
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (ob1, ob2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let eps = T::of(c.eps);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                if c.weight_decay != 0.0 {
                    *pi *= decay;
                }
                *mi = b1 * *mi + ob1 * gi;
                *vi = b2 * *vi + ob2 * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lr: f64, wd: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = vec![Tensor::<f32>::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut st = AdamState::for_params(cfg(0.1, 0.0), &p);
        for _ in 0..5 {
            st.step(&mut p, &[vec![0.0; 3]]).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g² at t=1, so Δ = −lr·g/(|g|+eps).
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::for_params(cfg(0.1, 0.0), &p);
        st.step(&mut p, &[vec![1.0]]).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn converges_on_convex_quadratic() {
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut st = AdamState::for_params(cfg(0.1, 0.0), &p);
        let loss = |x: f64| (x - 3.0).powi(2);
        let mut losses = vec![loss(0.0)];
        for _ in 0..50 {
            let x = p[0].data()[0];
            st.step(&mut p, &[vec![2.0 * (x - 3.0)]]).unwrap();
            losses.push(loss(p[0].data()[0]));
        }
        assert!((p[0].data()[0] - 3.0).abs() < 3.0);
        // Momentum carries p past 3 around step 39; every 10-step window
        // before that is strictly decreasing step by step.
        for w in 0..=29 {
            let win = &losses[w..=w + 10];
            assert!(
                win.windows(2).all(|s| s[1] < s[0]),
                "window at {w}: {win:?}"
            );
        }
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let mut p = vec![Tensor::<f64>::scalar(2.0)];
        let mut st = AdamState::for_params(cfg(0.1, 0.5), &p);
        st.step(&mut p, &[vec![0.0]]).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = vec![Tensor::<f32>::zeros(&[2])];
        let mut st = AdamState::for_params(AdamConfig::default(), &p);
        assert!(st.step(&mut p, &[vec![0.0; 3]]).is_err());
        assert!(st.step(&mut p, &[]).is_err());
    }
}
