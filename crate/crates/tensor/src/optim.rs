//! SGD with momentum and the warmup + cosine learning-rate schedule.

use crate::error::{Result, TensorError};
use crate::params::ParamSet;
use crate::scalar::Scalar;

/// Per-parameter velocities plus the step hyper-parameters.
#[derive(Clone, Debug)]
pub struct OptimizerState<F> {
    velocities: Vec<Vec<F>>,
    pub momentum: F,
    pub weight_decay: F,
    lr: F,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &ParamSet<F>, momentum: F, weight_decay: F, lr: F) -> Result<Self> {
        if !(F::zero() <= momentum && momentum < F::one()) {
            return Err(TensorError::Contract(format!("momentum {momentum} outside [0, 1)")));
        }
        let mut s = Self {
            velocities: params.ids().map(|id| vec![F::zero(); params.value(id).numel()]).collect(),
            momentum,
            weight_decay,
            lr: F::zero(),
        };
        s.set_lr(lr)?;
        Ok(s)
    }

    pub fn lr(&self) -> F {
        self.lr
    }

    pub fn set_lr(&mut self, lr: F) -> Result<()> {
        if !(lr >= F::zero()) || !lr.is_finite() {
            return Err(TensorError::Contract(format!("learning rate {lr} must be finite and >= 0")));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn velocity(&self, index: usize) -> &[F] {
        &self.velocities[index]
    }

    pub fn velocity_mut(&mut self, index: usize) -> &mut [F] {
        &mut self.velocities[index]
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }
}

/// One update: `v ← μ·v + (g + λ·θ)`, `θ ← θ − η·v`, for trainable parameters.
///
/// A missing gradient counts as zero. Non-finite gradients abort before any
/// parameter is touched.
pub fn sgd_momentum_step<F: Scalar>(params: &mut ParamSet<F>, grads: &[Option<Vec<F>>], state: &mut OptimizerState<F>) -> Result<()> {
    if grads.len() != params.len() || state.len() != params.len() {
        return Err(TensorError::Contract(format!(
            "{} params, {} grads, {} velocity buffers",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    for (id, g) in params.ids().zip(grads) {
        if let Some(g) = g {
            if g.len() != params.value(id).numel() {
                return Err(TensorError::Contract(format!("gradient size mismatch for {}", params.name(id))));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::Numeric(format!("non-finite gradient for {}", params.name(id))));
            }
        }
    }
    let (mu, wd, lr) = (state.momentum, state.weight_decay, state.lr);
    let ids: Vec<_> = params.ids().collect();
    for (id, g) in ids.into_iter().zip(grads) {
        if !params.is_trainable(id) {
            continue;
        }
        let v = &mut state.velocities[id.index()];
        let theta = params.value_mut(id).data_mut();
        for i in 0..theta.len() {
            let gi = g.as_ref().map_or(F::zero(), |g| g[i]);
            v[i] = mu * v[i] + (gi + wd * theta[i]);
            theta[i] -= lr * v[i];
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Scalar>(grads: &mut [Option<Vec<F>>], max_norm: F) -> F {
    let sq: F = grads.iter().flatten().flat_map(|g| g.iter()).map(|&x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > F::zero() {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|x| *x *= k));
    }
    norm
}

/// Linear warmup over `[0, warmup)` followed by cosine annealing to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, total_epochs: usize) -> Result<Self> {
        if warmup_epochs > total_epochs {
            return Err(TensorError::Contract(format!("warmup {warmup_epochs} exceeds total epochs {total_epochs}")));
        }
        if !(base_lr >= 0.0) || !base_lr.is_finite() {
            return Err(TensorError::Contract(format!("base lr {base_lr} must be finite and >= 0")));
        }
        Ok(Self {
            base_lr,
            warmup_epochs,
            total_epochs,
        })
    }

    pub fn lr_at(&self, epoch: f64) -> f64 {
        let (w, e) = (self.warmup_epochs as f64, self.total_epochs as f64);
        let epoch = epoch.clamp(0.0, e);
        if epoch < w {
            return self.base_lr * epoch / w;
        }
        if e <= w {
            return self.base_lr;
        }
        let progress = (epoch - w) / (e - w);
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn one_param(theta: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("w", Tensor::from_f64(vec![1], &[theta])).unwrap();
        p
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(&p, 0.0, 0.0, 0.1).unwrap();
        sgd_momentum_step(&mut p, &[Some(vec![0.1])], &mut s).unwrap();
        assert!((p.value(p.ids().next().unwrap()).item() - 0.99).abs() < 1e-15);
    }

    #[test]
    fn momentum_carries_velocity() {
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(&p, 0.9, 0.0, 0.1).unwrap();
        s.velocity_mut(0)[0] = 1.0;
        sgd_momentum_step(&mut p, &[Some(vec![0.0])], &mut s).unwrap();
        assert!((s.velocity(0)[0] - 0.9).abs() < 1e-15);
        assert!((p.value(p.ids().next().unwrap()).item() - 0.91).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_alone() {
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(&p, 0.9, 1e-6, 1e-3).unwrap();
        sgd_momentum_step(&mut p, &[Some(vec![0.0])], &mut s).unwrap();
        assert!((p.value(p.ids().next().unwrap()).item() - (1.0 - 1e-9)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = one_param(1.0);
        let mut s = OptimizerState::new(&p, 0.9, 0.0, 0.1).unwrap();
        let err = sgd_momentum_step(&mut p, &[Some(vec![f64::NAN])], &mut s).unwrap_err();
        assert!(matches!(err, TensorError::Numeric(_)));
        assert_eq!(p.value(p.ids().next().unwrap()).item(), 1.0);
    }

    #[test]
    fn frozen_params_do_not_move() {
        let mut p = one_param(1.0);
        let id = p.ids().next().unwrap();
        p.set_trainable(id, false);
        let mut s = OptimizerState::new(&p, 0.9, 1e-2, 0.1).unwrap();
        sgd_momentum_step(&mut p, &[Some(vec![5.0])], &mut s).unwrap();
        assert_eq!(p.value(id).item(), 1.0);
    }

    #[test]
    fn invalid_state_rejected() {
        let p = one_param(1.0);
        assert!(OptimizerState::new(&p, 1.0, 0.0, 0.1).is_err());
        assert!(OptimizerState::new(&p, 0.5, 0.0, -0.1).is_err());
        assert!(LrSchedule::new(1e-3, 21, 20).is_err());
    }

    #[test]
    fn schedule_reference_points() {
        let s = LrSchedule::new(1e-3, 20, 50).unwrap();
        assert_eq!(s.lr_at(0.0), 0.0);
        assert!((s.lr_at(20.0) - 1e-3).abs() < 1e-18);
        assert!(s.lr_at(50.0).abs() < 1e-18);
        assert!((s.lr_at(10.0) - 5e-4).abs() < 1e-18);
        // continuity at the warmup boundary
        assert!((s.lr_at(20.0 - 1e-9) - s.lr_at(20.0)).abs() < 1e-12);
    }

    #[test]
    fn schedule_without_cosine_phase() {
        let s = LrSchedule::new(0.1, 5, 5).unwrap();
        assert_eq!(s.lr_at(5.0), 0.1);
        assert_eq!(s.lr_at(2.5), 0.05);
        let z = LrSchedule::new(0.1, 0, 0).unwrap();
        assert_eq!(z.lr_at(0.0), 0.1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0, 4.0]), None];
        let n = clip_grad_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        let g0: &Vec<f64> = g[0].as_ref().unwrap();
        assert!(((g0[0] * g0[0] + g0[1] * g0[1]).sqrt() - 1.0).abs() < 1e-12);
    }
}
