//! First-order optimizers and learning-rate schedules.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

fn check(p: &Tensor, g: &Tensor) -> Result<()> {
    if p.shape() != g.shape() {
        return shape_err(format!("gradient {:?} for parameter {:?}", g.shape(), p.shape()));
    }
    Ok(())
}

/// `g ← grad + wd·p; v ← μv + (1−dampening)·g; p ← p − lr·v`.
pub fn sgd_momentum_step(
    p: &mut Tensor,
    grad: &Tensor,
    v: &mut Tensor,
    lr: f64,
    mu: f64,
    dampening: f64,
    weight_decay: f64,
) -> Result<()> {
    check(p, grad)?;
    check(p, v)?;
    for ((p, &g), v) in p.data_mut().iter_mut().zip(grad.data()).zip(v.data_mut()) {
        let g = g + weight_decay * *p;
        *v = mu * *v + (1.0 - dampening) * g;
        *p -= lr * *v;
    }
    Ok(())
}

/// One Adam update at step `t` (1-based) with bias-corrected moments.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    p: &mut Tensor,
    grad: &Tensor,
    m: &mut Tensor,
    v: &mut Tensor,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    check(p, grad)?;
    if t == 0 {
        return Err(Error::Argument("Adam step counter starts at 1".into()));
    }
    let (c1, c2) = (1.0 - beta1.powi(t as i32), 1.0 - beta2.powi(t as i32));
    for (((p, &g), m), v) in p.data_mut().iter_mut().zip(grad.data()).zip(m.data_mut()).zip(v.data_mut()) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

fn default_momentum() -> f64 {
    0.9
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default = "default_momentum")]
        momentum: f64,
        #[serde(default)]
        dampening: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.9, dampening: 0.0, weight_decay: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { momentum, dampening, weight_decay } => {
                (0.0..=1.0).contains(&momentum) && (0.0..=1.0).contains(&dampening) && weight_decay >= 0.0
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Configuration(format!("invalid optimizer settings {self:?}")))
        }
    }

    fn slots(&self) -> usize {
        match self {
            OptimizerConfig::Sgd { .. } => 1,
            OptimizerConfig::Adam { .. } => 2,
        }
    }
}

/// Per-parameter buffers (velocity for SGD; first and second moments for
/// Adam) and the number of steps taken.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub slots: IndexMap<String, Vec<Tensor>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub state: OptimizerState,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer { config, state: OptimizerState::default() })
    }

    /// Update each named parameter in `params` from its gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        self.state.step += 1;
        let t = self.state.step;
        let n = self.config.slots();
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let slots = self
                .state
                .slots
                .entry(name.clone())
                .or_insert_with(|| vec![Tensor::zeros(p.shape()); n]);
            match self.config {
                OptimizerConfig::Sgd { momentum, dampening, weight_decay } => {
                    sgd_momentum_step(p, g, &mut slots[0], lr, momentum, dampening, weight_decay)?
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let (m, v) = slots.split_at_mut(1);
                    adam_step(p, g, &mut m[0], &mut v[0], t, lr, beta1, beta2, eps)?
                }
            }
        }
        Ok(())
    }
}

/// Piecewise-constant learning rate, multiplied by `gamma` at each milestone
/// iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub gamma: f64,
}

impl LrSchedule {
    pub fn new(base: f64, milestones: Vec<usize>, gamma: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Configuration(format!("milestones {milestones:?} are not strictly increasing")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(Error::Configuration(format!("decay factor {gamma} outside (0, 1]")));
        }
        if !(base >= 0.0 && base.is_finite()) {
            return Err(Error::Configuration(format!("learning rate {base} must be finite and non-negative")));
        }
        Ok(LrSchedule { base, milestones, gamma })
    }

    /// Milestones at the same fractions of `total` iterations as 34K and 54K
    /// of a 64K-iteration run.
    pub fn scaled_default(total: usize) -> Vec<usize> {
        let mut m: Vec<usize> = [34.0 / 64.0, 54.0 / 64.0].iter().map(|f| (f * total as f64).round() as usize).collect();
        m.dedup();
        m.retain(|&v| v > 0);
        m
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| iteration >= m).count();
        self.base * self.gamma.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_examples() {
        let mut p = Tensor::scalar(1.0);
        let mut v = Tensor::scalar(0.0);
        sgd_momentum_step(&mut p, &Tensor::scalar(0.0), &mut v, 0.1, 0.9, 0.0, 0.0).unwrap();
        assert_eq!((p.data()[0], v.data()[0]), (1.0, 0.0));
        sgd_momentum_step(&mut p, &Tensor::scalar(0.5), &mut v, 0.1, 0.9, 0.0, 0.0).unwrap();
        assert!((v.data()[0] - 0.5).abs() < 1e-15);
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_steps_match_unrolled_recurrence() {
        let (lr, mu, d, wd, g) = (0.05, 0.9, 0.9, 0.001, 0.3);
        let mut p = Tensor::scalar(2.0);
        let mut v = Tensor::scalar(0.0);
        for _ in 0..2 {
            sgd_momentum_step(&mut p, &Tensor::scalar(g), &mut v, lr, mu, d, wd).unwrap();
        }
        let g1 = g + wd * 2.0;
        let v1 = (1.0 - d) * g1;
        let p1 = 2.0 - lr * v1;
        let g2 = g + wd * p1;
        let v2 = mu * v1 + (1.0 - d) * g2;
        let p2 = p1 - lr * v2;
        assert!((p.data()[0] - p2).abs() < 1e-15);
        assert!((v.data()[0] - v2).abs() < 1e-15);
    }

    #[test]
    fn adam_examples() {
        let (mut p, mut m, mut v) = (Tensor::scalar(1.0), Tensor::scalar(0.0), Tensor::scalar(0.0));
        adam_step(&mut p, &Tensor::scalar(0.0), &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p.data()[0], 1.0);
        adam_step(&mut p, &Tensor::scalar(1.0), &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert!((p.data()[0] - (1.0 - 1e-3)).abs() < 1e-8);

        let grads = Tensor::from_vec(vec![0.3, -2.0, 0.01]);
        let step = |g: &Tensor| {
            let (mut p, mut m, mut v) = (Tensor::zeros(&[3]), Tensor::zeros(&[3]), Tensor::zeros(&[3]));
            adam_step(&mut p, g, &mut m, &mut v, 1, 1e-3, 0.9, 0.999, 1e-8).unwrap();
            p
        };
        let (a, b) = (step(&grads), step(&grads.scale(10.0)));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.signum(), y.signum());
            assert!((x / y - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn optimizer_counts_steps_and_mirrors_shapes() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::ones(&[2, 3]));
        let mut opt = Optimizer::new(OptimizerConfig::adam()).unwrap();
        for _ in 0..3 {
            opt.step(&mut ps, &[("w".into(), Tensor::ones(&[2, 3]))], 0.01).unwrap();
        }
        assert_eq!(opt.state.step, 3);
        assert!(opt.state.slots["w"].iter().all(|t| t.shape() == [2, 3]));
        assert!(Optimizer::new(OptimizerConfig::Sgd { momentum: 2.0, dampening: 0.0, weight_decay: 0.0 }).is_err());
    }

    #[test]
    fn schedule() {
        let s = LrSchedule::new(0.1, vec![10, 20], 0.1).unwrap();
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(10) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(25) - 0.001).abs() < 1e-15);
        assert!(LrSchedule::new(0.1, vec![20, 10], 0.1).is_err());
        assert!(LrSchedule::new(0.1, vec![], 0.0).is_err());
        assert!(LrSchedule::new(0.1, vec![], 1.5).is_err());
        assert_eq!(LrSchedule::scaled_default(64_000), vec![34_000, 54_000]);
    }
}
