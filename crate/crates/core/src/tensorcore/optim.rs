use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdCosine,
    Adadelta,
}

/// Optimizer hyper-parameters, schedule position and per-parameter
/// accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub base_lr: f64,
    pub step: usize,
    pub total_steps: usize,
    pub rho: f64,
    pub epsilon: f64,
    /// Adadelta running averages of squared gradients, one per parameter.
    pub sq_grad: Vec<Vec<f64>>,
    /// Adadelta running averages of squared updates.
    pub sq_update: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn sgd_cosine(base_lr: f64, total_steps: usize) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
        }
        if !(base_lr > 0.0) {
            return Err(Error::Config(format!("learning rate {base_lr} must be positive")));
        }
        Ok(Self {
            kind: OptimizerKind::SgdCosine,
            base_lr,
            step: 0,
            total_steps,
            rho: 0.0,
            epsilon: 0.0,
            sq_grad: Vec::new(),
            sq_update: Vec::new(),
        })
    }

    /// Adadelta with rho = 0.95 and epsilon = 1e-6.
    pub fn adadelta(base_lr: f64) -> Result<Self> {
        Self::adadelta_with(base_lr, 0.95, 1e-6)
    }

    pub fn adadelta_with(base_lr: f64, rho: f64, epsilon: f64) -> Result<Self> {
        if !(base_lr > 0.0) {
            return Err(Error::Config(format!("learning rate {base_lr} must be positive")));
        }
        if !(rho > 0.0 && rho < 1.0) {
            return Err(Error::Config(format!("adadelta rho {rho} outside (0, 1)")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("adadelta epsilon {epsilon} must be positive")));
        }
        Ok(Self {
            kind: OptimizerKind::Adadelta,
            base_lr,
            step: 0,
            total_steps: usize::MAX,
            rho,
            epsilon,
            sq_grad: Vec::new(),
            sq_update: Vec::new(),
        })
    }

    /// Learning rate that the next step will use.
    pub fn current_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::SgdCosine => cosine_lr(self.base_lr, self.step, self.total_steps),
            OptimizerKind::Adadelta => self.base_lr,
        }
    }

    fn ensure_accumulators(&mut self, store: &ParamStore) {
        if self.sq_grad.len() != store.len() {
            self.sq_grad = store.iter().map(|p| vec![0.0; p.value().len()]).collect();
            self.sq_update = self.sq_grad.clone();
        }
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total))`, clamped at the end of the
/// schedule.
pub fn cosine_lr(base_lr: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos())
}

/// Plain gradient step with the cosine-decayed learning rate; frozen
/// parameters are skipped.
pub fn sgd_cosine_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.kind != OptimizerKind::SgdCosine {
        return Err(Error::Config("optimizer state is not sgd-cosine".into()));
    }
    if state.total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    let lr = state.current_lr();
    for p in store.iter_mut().filter(|p| p.trainable()) {
        let (value, grad) = p.value_and_grad_mut();
        for (v, g) in value.iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }
    state.step = (state.step + 1).min(state.total_steps);
    Ok(())
}

/// Adadelta update scaled by `base_lr`:
/// `E[g²] ← ρE[g²] + (1-ρ)g²`, `Δ = -sqrt(E[Δ²]+ε)/sqrt(E[g²]+ε)·g`,
/// `E[Δ²] ← ρE[Δ²] + (1-ρ)Δ²`, `x ← x + lr·Δ`.
pub fn adadelta_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.kind != OptimizerKind::Adadelta {
        return Err(Error::Config("optimizer state is not adadelta".into()));
    }
    state.ensure_accumulators(store);
    let (rho, eps, lr) = (state.rho, state.epsilon, state.base_lr);
    for (i, p) in store.iter_mut().enumerate() {
        let sg = &mut state.sq_grad[i];
        let su = &mut state.sq_update[i];
        if !p.trainable() {
            continue;
        }
        let (value, grad) = p.value_and_grad_mut();
        for j in 0..value.len() {
            let g = grad[j];
            sg[j] = rho * sg[j] + (1.0 - rho) * g * g;
            let delta = -((su[j] + eps).sqrt() / (sg[j] + eps).sqrt()) * g;
            su[j] = rho * su[j] + (1.0 - rho) * delta * delta;
            value[j] += lr * delta;
        }
    }
    state.step = state.step.saturating_add(1);
    Ok(())
}

pub fn optimizer_step(store: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    match state.kind {
        OptimizerKind::SgdCosine => sgd_cosine_step(store, state),
        OptimizerKind::Adadelta => adadelta_step(store, state),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorcore::ArrayF;

    fn store_with_grad(g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", ArrayF::full(&[3], 1.0));
        s.get_mut(id).accumulate_grad(&ArrayF::full(&[3], g));
        s
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert_eq!(cosine_lr(0.1, 10, 10), 0.0);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=50).map(|s| cosine_lr(0.3, s, 50)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(OptimizerState::sgd_cosine(0.1, 0).is_err());
    }

    #[test]
    fn sgd_step_uses_scheduled_lr() {
        let mut s = store_with_grad(2.0);
        let mut st = OptimizerState::sgd_cosine(0.1, 4).unwrap();
        sgd_cosine_step(&mut s, &mut st).unwrap();
        assert!(s.iter().next().unwrap().value().data().iter().all(|&v| (v - 0.8).abs() < 1e-15));
        assert_eq!(st.step, 1);
    }

    #[test]
    fn frozen_values_bitwise_unchanged() {
        for kind in [OptimizerKind::SgdCosine, OptimizerKind::Adadelta] {
            let mut s = store_with_grad(3.0);
            s.set_trainable(super::super::ParamId(0), false);
            let before = s.clone();
            let mut st = match kind {
                OptimizerKind::SgdCosine => OptimizerState::sgd_cosine(0.5, 10).unwrap(),
                OptimizerKind::Adadelta => OptimizerState::adadelta(0.5).unwrap(),
            };
            for _ in 0..5 {
                optimizer_step(&mut s, &mut st).unwrap();
            }
            assert_eq!(s.get(super::super::ParamId(0)).value(), before.get(super::super::ParamId(0)).value());
        }
    }

    #[test]
    fn adadelta_zero_gradient_decays_accumulators() {
        let mut s = store_with_grad(1.0);
        let mut st = OptimizerState::adadelta(0.03).unwrap();
        adadelta_step(&mut s, &mut st).unwrap();
        let (g1, u1) = (st.sq_grad[0][0], st.sq_update[0][0]);
        s.zero_grad();
        let before = s.clone();
        adadelta_step(&mut s, &mut st).unwrap();
        assert_eq!(s, before);
        assert!((st.sq_grad[0][0] - 0.95 * g1).abs() < 1e-18);
        assert!((st.sq_update[0][0] - 0.95 * u1).abs() < 1e-18);
    }

    /// Scalar fixed-point iteration of the Adadelta update map.
    fn adadelta_fixed_point(g: f64, rho: f64, eps: f64) -> f64 {
        let (mut sg, mut su, mut d) = (0.0f64, 0.0f64, 0.0f64);
        for _ in 0..200_000 {
            sg = rho * sg + (1.0 - rho) * g * g;
            d = (su + eps).sqrt() / (sg + eps).sqrt() * g;
            su = rho * su + (1.0 - rho) * d * d;
        }
        d.abs()
    }

    #[test]
    fn adadelta_constant_gradient_update_converges() {
        let (rho, eps, lr) = (0.95, 1e-2, 0.03);
        for g in [1.0, 0.5] {
            let limit = adadelta_fixed_point(g, rho, eps);
            assert!((limit - g.abs()).abs() < 1e-9);
            let mut s = store_with_grad(g);
            let mut st = OptimizerState::adadelta_with(lr, rho, eps).unwrap();
            let mut last = 0.0;
            for _ in 0..20_000 {
                let before = s.get(super::super::ParamId(0)).value().data()[0];
                adadelta_step(&mut s, &mut st).unwrap();
                last = before - s.get(super::super::ParamId(0)).value().data()[0];
            }
            assert!((last - lr * limit).abs() < 1e-4 * lr, "g={g} update {last}");
        }
    }

    #[test]
    fn adadelta_validates_config() {
        assert!(OptimizerState::adadelta_with(0.03, 1.0, 1e-6).is_err());
        assert!(OptimizerState::adadelta_with(0.03, 0.9, 0.0).is_err());
        let mut s = store_with_grad(1.0);
        let mut st = OptimizerState::adadelta(0.1).unwrap();
        assert!(sgd_cosine_step(&mut s, &mut st).is_err());
    }
}
