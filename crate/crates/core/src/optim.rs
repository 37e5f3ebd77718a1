//! ADAM and gradient-buffer plumbing.

use crate::error::{invalid, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-parameter gradient buffers, in network parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<S> {
    pub tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn zeros_like(params: &[Tensor<S>]) -> Self {
        Self {
            tensors: params.iter().map(|p| Tensor::zeros(p.shape()).unwrap()).collect(),
        }
    }

    pub fn zero(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(S::zero());
        }
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return shape_err("gradients", "parameter count differs");
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return shape_err("gradients", format!("{:?} vs {:?}", a.shape(), b.shape()));
            }
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, &y)| *x += y);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: S) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Global L2 norm, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|v| {
                let v = v.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

pub fn zero_grads<S: Scalar>(grads: &mut Gradients<S>) {
    grads.zero();
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// factor applied (1 when already within bounds).
pub fn clip_grad_norm<S: Scalar>(grads: &mut Gradients<S>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm <= max_norm || norm == 0.0 {
        return 1.0;
    }
    let scale = max_norm / norm;
    grads.scale(S::lit(scale));
    scale
}

/// What to do with a gradient containing NaN or infinity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NonFinitePolicy {
    /// Leave parameters and state untouched and report [`StepOutcome::Skipped`].
    Skip,
    #[default]
    Abort,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub non_finite: NonFinitePolicy,
    /// Global-norm clipping applied before the update; off when `None`.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            non_finite: NonFinitePolicy::Abort,
            clip_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

/// ADAM with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig, params: &[Tensor<S>]) -> Self {
        let zeros = |p: &Tensor<S>| Tensor::zeros(p.shape()).unwrap();
        Self {
            config,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(config: AdamConfig, t: u64, m: Vec<Tensor<S>>, v: Vec<Tensor<S>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return shape_err("adam", "first and second moments disagree");
        }
        if v.iter().flat_map(|t| t.data()).any(|&x| x < S::zero()) {
            return invalid("adam", "negative second moment");
        }
        Ok(Self { config, t, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<S>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<S>] {
        &self.v
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor<S>], grads: &Gradients<S>) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grads.tensors.len() != params.len() {
            return shape_err(
                "adam",
                format!(
                    "{} params, {} grads, state for {}",
                    params.len(),
                    grads.tensors.len(),
                    self.m.len()
                ),
            );
        }
        for ((p, g), m) in params.iter().zip(&grads.tensors).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return shape_err("adam", format!("{:?} / {:?} / {:?}", p.shape(), g.shape(), m.shape()));
            }
        }
        if !grads.is_finite() {
            return match self.config.non_finite {
                NonFinitePolicy::Skip => Ok(StepOutcome::Skipped),
                NonFinitePolicy::Abort => Err(Error::NonFinite { op: "adam_step" }),
            };
        }
        let clipped;
        let grads = match self.config.clip_norm {
            Some(max) => {
                let mut c = grads.clone();
                clip_grad_norm(&mut c, max);
                clipped = c;
                &clipped
            }
            None => grads,
        };

        self.t += 1;
        let cfg = self.config;
        let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - cfg.beta1), S::lit(1.0 - cfg.beta2));
        let bc1 = S::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let bc2 = S::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let (lr, eps) = (S::lit(cfg.lr), S::lit(cfg.eps));
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let iter = p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut());
            for (((theta, &gi), mi), vi) in iter {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *theta -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::new(&[1], vec![v]).unwrap()]
    }

    fn grad(v: f64) -> Gradients<f64> {
        Gradients {
            tensors: vec![Tensor::new(&[1], vec![v]).unwrap()],
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.0);
        let mut adam = Adam::new(AdamConfig::with_lr(1e-4), &p);
        adam.step(&mut p, &grad(1.0)).unwrap();
        // m_hat = v_hat = 1
        let expected = -1e-4 / (1.0 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-18);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn zero_gradient_still_counts_a_step() {
        let mut p = scalar_param(0.7);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        adam.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p[0].data()[0], 0.7);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn constant_gradient_steps_are_bounded() {
        let mut p = scalar_param(0.0);
        let lr = 1e-3;
        let mut adam = Adam::new(AdamConfig::with_lr(lr), &p);
        let mut prev = 0.0;
        for _ in 0..2 {
            adam.step(&mut p, &grad(0.5)).unwrap();
            let delta = p[0].data()[0] - prev;
            prev = p[0].data()[0];
            assert!(delta < 0.0);
            assert!(delta.abs() <= lr * 1.01);
        }
    }

    #[test]
    fn non_finite_policy() {
        let mut p = scalar_param(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(adam.step(&mut p, &grad(f64::NAN)).is_err());
        adam.config.non_finite = NonFinitePolicy::Skip;
        assert_eq!(adam.step(&mut p, &grad(f64::INFINITY)).unwrap(), StepOutcome::Skipped);
        assert_eq!(adam.step_count(), 0);
        assert_eq!(p[0].data()[0], 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = Gradients {
            tensors: vec![Tensor::new(&[2], vec![3.0f64, 4.0]).unwrap()],
        };
        assert_eq!(clip_grad_norm(&mut g, 10.0), 1.0);
        let s = clip_grad_norm(&mut g, 1.0);
        assert!((s - 0.2).abs() < 1e-12);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert!((g.tensors[0].data()[0] - 0.6).abs() < 1e-12);

        let mut doubled = Gradients {
            tensors: vec![Tensor::new(&[2], vec![6.0f64, 8.0]).unwrap()],
        };
        clip_grad_norm(&mut doubled, 1.0);
        assert!(doubled.tensors[0].max_abs_diff(&g.tensors[0]).unwrap() < 1e-12);
    }
}
