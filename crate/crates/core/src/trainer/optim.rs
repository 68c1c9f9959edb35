use crate::error::{Error, Result};
use crate::model::{AdaptationMask, ParameterSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

/// `w -= lr * g` on the groups in `mask`.
pub fn sgd_step(params: &mut ParameterSet, grads: &ParameterSet, lr: f64, mask: &AdaptationMask) {
    for group in mask.groups() {
        for (w, g) in params.get_mut(group).iter_mut().zip(grads.get(group)) {
            *w -= lr * g;
        }
    }
}

/// First and second moments, one entry per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParameterSet,
    v: ParameterSet,
    step: i32,
}

impl AdamState {
    pub fn new(like: &ParameterSet) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// Bias-corrected Adam update on the groups in `mask`.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    lr: f64,
    config: &AdamConfig,
    mask: &AdaptationMask,
) {
    state.step += 1;
    let c1 = 1.0 - config.beta1.powi(state.step);
    let c2 = 1.0 - config.beta2.powi(state.step);
    for group in mask.groups() {
        let w = params.get_mut(group);
        let g = grads.get(group);
        let m = state.m.get_mut(group);
        for i in 0..w.len() {
            m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
        }
        let v = state.v.get_mut(group);
        for i in 0..w.len() {
            v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
        }
        let (m, v) = (state.m.get(group), state.v.get(group));
        for i in 0..w.len() {
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
}

/// An optimizer with its state, fresh at the start of every round.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        config: AdamConfig,
        state: AdamState,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, adam: AdamConfig, like: &ParameterSet) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                config: adam,
                state: AdamState::new(like),
            },
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet, mask: &AdaptationMask) {
        match self {
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr, mask),
            Optimizer::Adam { lr, config, state } => {
                adam_step(params, grads, state, *lr, config, mask)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, ModelConfig};

    fn tiny() -> ModelConfig {
        ModelConfig {
            feat_dim: 2,
            hidden_dim: 2,
            joint_dim: 2,
            vocab: 3,
            blank_id: 0,
            seed: 5,
        }
    }

    #[test]
    fn sgd_zero_gradient_is_noop() {
        let p0 = ParameterSet::init(&tiny());
        let mut p = p0.clone();
        sgd_step(&mut p, &p0.zeros_like(), 0.1, &AdaptationMask::all());
        assert!(p.bits_eq(&p0));
    }

    #[test]
    fn sgd_scalar_update() {
        let p0 = ParameterSet::init(&tiny());
        let mut g = p0.zeros_like();
        g.get_mut(Group::Joiner)[0] = 2.5;
        let mut p = p0.clone();
        sgd_step(&mut p, &g, 0.1, &AdaptationMask::all());
        assert_eq!(
            p.get(Group::Joiner)[0],
            p0.get(Group::Joiner)[0] - 0.1 * 2.5
        );
        assert!(p.group_bits_eq(&p0, Group::EncIn));
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps).
        let p0 = ParameterSet::zeros(&tiny());
        let mut g = p0.zeros_like();
        g.get_mut(Group::Joiner)[0] = 0.3;
        g.get_mut(Group::Joiner)[1] = -4.0;
        let mut p = p0.clone();
        let mut state = AdamState::new(&p);
        let cfg = AdamConfig::default();
        adam_step(&mut p, &g, &mut state, 1e-3, &cfg, &AdaptationMask::all());
        let w = p.get(Group::Joiner);
        assert!((w[0] + 1e-3 * 0.3 / (0.3 + 1e-8)).abs() < 1e-18);
        assert!((w[1] - 1e-3 * 4.0 / (4.0 + 1e-8)).abs() < 1e-18);
        assert!((w[0] + 1e-3).abs() < 1e-10);
        assert_eq!(w[2], 0.0);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn masked_groups_are_untouched() {
        let p0 = ParameterSet::init(&tiny());
        let mut g = p0.zeros_like();
        for group in Group::ALL {
            g.get_mut(group).fill(1.0);
        }
        let mask = AdaptationMask::preset("keyvalue").unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, AdamConfig::default(), &p0);
        let mut p = p0.clone();
        opt.step(&mut p, &g, &mask);
        for group in Group::ALL {
            assert_eq!(
                p.group_bits_eq(&p0, group),
                !mask.contains(group),
                "{group}"
            );
        }
    }
}
