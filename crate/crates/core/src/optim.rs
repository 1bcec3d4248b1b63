//! Adam / momentum SGD with decoupled weight decay, and the cosine schedule.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Param, ParamKind, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    /// Heavy-ball SGD using `momentum` as the velocity coefficient.
    SgdMomentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// β₁ for Adam, velocity coefficient for SGD.
    pub momentum: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            schedule: Schedule::Cosine,
            epochs: 400,
            batch_size: 128,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if self.epochs == 0 {
            return Err(Error::config("optimizer.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => cosine_lr(step, total_steps, self.lr),
        }
    }
}

/// `lr0 · (1 + cos(π·step/total)) / 2`; `step` is clamped to `total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * (1.0 + (PI * s).cos()) / 2.0
}

/// Normalization gains and biases are never decayed.
pub fn decays(kind: ParamKind) -> bool {
    kind != ParamKind::Norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub decayed: bool,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    t: u64,
    slots: BTreeMap<String, SlotState>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self {
            cfg,
            t: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn state(&self, name: &str) -> Option<&SlotState> {
        self.slots.get(name)
    }

    /// One update of every parameter that carries a gradient.
    pub fn step<T: Scalar>(&mut self, params: Vec<(String, &mut Param<T>)>, lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let (b1, b2) = (c.momentum, c.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = p.grad.as_ref() else { continue };
            let n = g.len();
            let slot = self.slots.entry(name).or_insert_with(|| SlotState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                decayed: decays(p.kind),
            });
            let wd = if slot.decayed { c.weight_decay } else { 0.0 };
            let g = g.data();
            let w = p.value.data_mut();
            for i in 0..n {
                let gi = g[i].as_f64();
                let wi = w[i].as_f64();
                let update = match c.kind {
                    OptimizerKind::Adam => {
                        slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * gi;
                        slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * gi * gi;
                        let mh = slot.m[i] / bc1;
                        let vh = slot.v[i] / bc2;
                        mh / (vh.sqrt() + c.eps)
                    }
                    OptimizerKind::SgdMomentum => {
                        slot.m[i] = b1 * slot.m[i] + gi;
                        slot.m[i]
                    }
                };
                let delta = lr * (update + wd * wi);
                if delta != 0.0 {
                    w[i] = T::lit(wi - delta);
                }
            }
        }
    }
}

/// Plain constant-rate SGD, used for the linear probe.
pub fn sgd_step<T: Scalar>(params: Vec<(String, &mut Param<T>)>, lr: f64) {
    for (_, p) in params {
        let Some(g) = p.grad.as_ref() else { continue };
        let g = g.data();
        for (w, &gi) in p.value.data_mut().iter_mut().zip(g) {
            let d = lr * gi.as_f64();
            if d != 0.0 {
                *w = T::lit(w.as_f64() - d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn param(v: Vec<f32>, g: Vec<f32>, kind: ParamKind) -> Param<f32> {
        let n = v.len();
        let mut p = Param::new(Tensor::from_vec(&[n], v).unwrap(), kind);
        p.grad = Some(Tensor::from_vec(&[n], g).unwrap());
        p
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 100, 0.1) - 0.1).abs() < 1e-12);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-12);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut cfg = OptimizerConfig::default();
        cfg.weight_decay = 0.0;
        let mut opt = Optimizer::new(cfg);
        let mut p = param(vec![0.3, -1.2], vec![0.0, 0.0], ParamKind::Weight);
        opt.step(vec![("w".into(), &mut p)], 1e-2);
        assert_eq!(p.value.data(), &[0.3, -1.2]);
    }

    #[test]
    fn norm_params_skip_decay() {
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let mut w = param(vec![1.0], vec![0.0], ParamKind::Weight);
        let mut g = param(vec![1.0], vec![0.0], ParamKind::Norm);
        opt.step(vec![("w".into(), &mut w), ("g".into(), &mut g)], 0.1);
        assert!(opt.state("w").unwrap().decayed);
        assert!(!opt.state("g").unwrap().decayed);
        assert!(w.value.data()[0] < 1.0);
        assert_eq!(g.value.data()[0], 1.0);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut cfg = OptimizerConfig::default();
        cfg.weight_decay = 0.0;
        let mut opt = Optimizer::new(cfg);
        let mut p = param(vec![0.0, 0.0], vec![2.0, -0.5], ParamKind::Weight);
        opt.step(vec![("p".into(), &mut p)], 0.01);
        // bias-corrected first step is lr·sign(g)
        assert!((p.value.data()[0] + 0.01).abs() < 1e-6);
        assert!((p.value.data()[1] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let cfg = OptimizerConfig {
            kind: OptimizerKind::SgdMomentum,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = Optimizer::new(cfg);
        let mut p = param(vec![0.0], vec![1.0], ParamKind::Weight);
        opt.step(vec![("p".into(), &mut p)], 0.1);
        opt.step(vec![("p".into(), &mut p)], 0.1);
        assert!((p.value.data()[0] + 0.1 * (1.0 + 1.9)).abs() < 1e-6);
    }

    #[test]
    fn validation_names_fields() {
        let cfg = OptimizerConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("optimizer.epochs"));
    }
}
