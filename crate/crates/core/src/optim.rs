//! AdamW (decoupled weight decay) and momentum-free RMSProp.

use crate::autograd::Grads;
use crate::error::{shape_err, AaptError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    RmsProp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f32,
    pub weight_decay: f32,
    /// RMSProp smoothing of the running second moment.
    pub alpha: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl OptimizerConfig {
    pub fn adamw(learning_rate: f32, weight_decay: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            learning_rate,
            weight_decay,
            alpha: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn rmsprop(learning_rate: f32, alpha: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::RmsProp,
            learning_rate,
            weight_decay: 0.0,
            alpha,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(AaptError::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(AaptError::Config(format!("alpha must be in (0,1), got {}", self.alpha)));
        }
        if self.weight_decay < 0.0 {
            return Err(AaptError::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Per-parameter moment buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

impl OptimState {
    fn ensure(&mut self, params: &[Tensor]) {
        if self.second.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        }
    }
}

fn check(params: &[Tensor], grads: &[Vec<f32>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(shape_err!("{} params but {} gradients", params.len(), grads.len()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.numel() != g.len() {
            return Err(shape_err!("param of {} values got gradient of {}", p.numel(), g.len()));
        }
    }
    Ok(())
}

pub fn adamw_step(params: &mut [Tensor], grads: &[Vec<f32>], state: &mut OptimState, cfg: &OptimizerConfig) -> Result<()> {
    if cfg.kind != OptimizerKind::AdamW {
        return Err(AaptError::Contract("adamw_step needs an adamw config".into()));
    }
    check(params, grads)?;
    state.ensure(params);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let g = grads[i][j];
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            pd[j] *= decay;
            pd[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

pub fn rmsprop_step(params: &mut [Tensor], grads: &[Vec<f32>], state: &mut OptimState, cfg: &OptimizerConfig) -> Result<()> {
    if cfg.kind != OptimizerKind::RmsProp {
        return Err(AaptError::Contract("rmsprop_step needs an rmsprop config".into()));
    }
    check(params, grads)?;
    state.ensure(params);
    state.step += 1;
    for (i, p) in params.iter_mut().enumerate() {
        let s = &mut state.second[i];
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let g = grads[i][j];
            s[j] = cfg.alpha * s[j] + (1.0 - cfg.alpha) * g * g;
            if cfg.weight_decay > 0.0 {
                pd[j] *= 1.0 - cfg.learning_rate * cfg.weight_decay;
            }
            pd[j] -= cfg.learning_rate * g / (s[j].sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Optimizer bound to one [`ParamSet`] whose leaves start at `base`.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub state: OptimState,
    pub base: usize,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, base: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Optimizer { cfg, state: OptimState::default(), base })
    }

    /// Applies one update. Parameters that received no gradient are updated
    /// with a zero gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        let flat: Vec<Vec<f32>> = (0..params.len())
            .map(|i| match grads.param(self.base + i) {
                Some(g) => g.to_vec(),
                None => vec![0.0; params.get(i).numel()],
            })
            .collect();
        if flat.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(AaptError::NonFinite("gradient".into()));
        }
        match self.cfg.kind {
            OptimizerKind::AdamW => adamw_step(params.tensors_mut(), &flat, &mut self.state, &self.cfg),
            OptimizerKind::RmsProp => rmsprop_step(params.tensors_mut(), &flat, &mut self.state, &self.cfg),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f32) {
        self.cfg.learning_rate = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_grad_is_pure_decay() {
        let cfg = OptimizerConfig::adamw(1e-5, 0.01);
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p[0].clone();
        let mut st = OptimState::default();
        adamw_step(&mut p, &[vec![0.0; 3]], &mut st, &cfg).unwrap();
        for (a, b) in p[0].data().iter().zip(before.data()) {
            assert_eq!(*a, b * (1.0 - 1e-5 * 0.01));
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_quadratic_descends_monotonically() {
        let cfg = OptimizerConfig::adamw(0.1, 0.0);
        let mut p = vec![Tensor::new(vec![1], vec![1.0]).unwrap()];
        let mut st = OptimState::default();
        let mut prev = 1.0f32;
        for _ in 0..100 {
            let w = p[0].data()[0];
            adamw_step(&mut p, &[vec![2.0 * w]], &mut st, &cfg).unwrap();
            let now = p[0].data()[0];
            assert!(now.abs() <= prev.abs() + 1e-6, "{now} after {prev}");
            prev = now;
            if now.abs() < 0.05 {
                break;
            }
        }
        assert!(prev.abs() < 0.2, "did not approach zero: {prev}");
    }

    #[test]
    fn rmsprop_second_moment_arithmetic() {
        let cfg = OptimizerConfig::rmsprop(1e-3, 0.9);
        let mut p = vec![Tensor::zeros(&[1])];
        let mut st = OptimState::default();
        rmsprop_step(&mut p, &[vec![1.0]], &mut st, &cfg).unwrap();
        assert!((st.second[0][0] - 0.1).abs() < 1e-7);
        rmsprop_step(&mut p, &[vec![1.0]], &mut st, &cfg).unwrap();
        assert!((st.second[0][0] - 0.19).abs() < 1e-7);
    }

    #[test]
    fn rmsprop_zero_grad_leaves_params() {
        let cfg = OptimizerConfig::rmsprop(1e-3, 0.9);
        let mut p = vec![Tensor::new(vec![2], vec![0.3, -0.7]).unwrap()];
        let before = p[0].clone();
        let mut st = OptimState::default();
        rmsprop_step(&mut p, &[vec![0.0, 0.0]], &mut st, &cfg).unwrap();
        assert_eq!(p[0], before);
    }

    #[test]
    fn shape_mismatch_errors() {
        let cfg = OptimizerConfig::adamw(1e-3, 0.0);
        let mut p = vec![Tensor::zeros(&[2])];
        let mut st = OptimState::default();
        assert!(adamw_step(&mut p, &[vec![0.0; 3]], &mut st, &cfg).is_err());
        let r = OptimizerConfig::rmsprop(1e-3, 0.9);
        assert!(adamw_step(&mut p, &[vec![0.0; 2]], &mut st, &r).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::adamw(0.0, 0.0).validate().is_err());
        assert!(OptimizerConfig::rmsprop(1e-3, 1.0).validate().is_err());
        assert!(OptimizerConfig::adamw(1e-3, -1.0).validate().is_err());
        assert!(OptimizerConfig::adamw(1e-5, 0.01).validate().is_ok());
    }

    #[test]
    fn updates_are_deterministic() {
        let cfg = OptimizerConfig::adamw(1e-2, 0.01);
        let run = || {
            let mut p = vec![Tensor::from_fn(&[4], |i| i as f32 * 0.1)];
            let mut st = OptimState::default();
            for k in 0..5 {
                let g: Vec<f32> = (0..4).map(|i| ((i + k) as f32).sin()).collect();
                adamw_step(&mut p, &[g], &mut st, &cfg).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }
}
