//! AdaMax (infinity-norm Adam) with decoupled weight decay.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::autograd::Tensor;
use crate::error::{ensure_contract, Error, Result};

/// How the weight-decay factor is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// `θ ← θ·(1 − lr·wd)` every step.
    Param,
    /// No parameter shrink; the step size decays as `lr·(1 − wd)^(t−1)`.
    Lr,
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayMode::Param => "param",
            DecayMode::Lr => "lr",
        })
    }
}

impl FromStr for DecayMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "param" => Ok(DecayMode::Param),
            "lr" => Ok(DecayMode::Lr),
            _ => Err(Error::Config(format!("unknown decay mode '{s}'; valid: param, lr"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: DecayMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_mode: DecayMode::Param,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.weight_decay);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// Moment estimates keyed like the parameters they follow.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimState {
    pub m: BTreeMap<String, Tensor>,
    pub u: BTreeMap<String, Tensor>,
    /// Applied steps so far.
    pub step: u64,
    /// Steps rejected because of non-finite gradients.
    pub faults: u64,
}

impl OptimState {
    /// Zero moments mirroring `params`.
    pub fn new(params: &BTreeMap<String, Tensor>) -> Self {
        let zeros = || params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(&t.shape))).collect();
        Self {
            m: zeros(),
            u: zeros(),
            step: 0,
            faults: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN/inf; nothing changed except the fault counter.
    Rejected,
}

/// One AdaMax update. Parameters without a gradient entry are treated as having
/// a zero gradient (they still decay).
pub fn adamax_step(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimState,
    cfg: &OptimConfig,
) -> Result<StepOutcome> {
    for (k, g) in grads {
        let p = params
            .get(k)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {k}")))?;
        ensure_contract!(p.shape == g.shape, "gradient shape {:?} != parameter shape {:?} for {k}", g.shape, p.shape);
    }
    for (k, p) in params.iter() {
        for moments in [&state.m, &state.u] {
            let t = moments
                .get(k)
                .ok_or_else(|| Error::Contract(format!("optimizer state lacks {k}")))?;
            ensure_contract!(t.shape == p.shape, "optimizer state shape mismatch for {k}");
        }
    }
    if grads.values().any(|g| g.data.iter().any(|v| !v.is_finite())) {
        state.faults += 1;
        return Ok(StepOutcome::Rejected);
    }

    state.step += 1;
    let t = state.step;
    let (lr, shrink) = match cfg.decay_mode {
        DecayMode::Param => (cfg.lr, 1.0 - cfg.lr * cfg.weight_decay),
        DecayMode::Lr => (cfg.lr * (1.0 - cfg.weight_decay).powf((t - 1) as f64), 1.0),
    };
    let step_size = lr / (1.0 - cfg.beta1.powf(t as f64));
    for (k, p) in params.iter_mut() {
        let m = state.m.get_mut(k).expect("checked above");
        let u = state.u.get_mut(k).expect("checked above");
        let g = grads.get(k);
        for i in 0..p.data.len() {
            let gi = g.map_or(0.0, |g| g.data[i]);
            m.data[i] = cfg.beta1 * m.data[i] + (1.0 - cfg.beta1) * gi;
            u.data[i] = (cfg.beta2 * u.data[i]).max(gi.abs());
            p.data[i] = p.data[i] * shrink - step_size * m.data[i] / (u.data[i] + cfg.eps);
        }
    }
    Ok(StepOutcome::Applied)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([("x".to_string(), Tensor::new(vec![1], vec![v]))])
    }

    #[test]
    fn zero_gradient_only_shrinks() {
        let mut p = scalar_params(2.0);
        let mut s = OptimState::new(&p);
        let cfg = OptimConfig::default();
        adamax_step(&mut p, &BTreeMap::new(), &mut s, &cfg).unwrap();
        assert_eq!(p["x"].data[0], 2.0 * (1.0 - 2e-4 * 1e-4));
    }

    #[test]
    fn first_unit_gradient_step_is_lr() {
        let mut p = scalar_params(0.0);
        let mut s = OptimState::new(&p);
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let g = scalar_params(1.0);
        adamax_step(&mut p, &g, &mut s, &cfg).unwrap();
        assert!((s.m["x"].data[0] - 0.1).abs() < 1e-15);
        assert_eq!(s.u["x"].data[0], 1.0);
        assert!((p["x"].data[0] + 2e-4 / (1.0 + 1e-8)).abs() < 1e-18);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = scalar_params(1.0);
        let mut s = OptimState::new(&p);
        let before = (p.clone(), s.m.clone());
        let outcome = adamax_step(&mut p, &scalar_params(f64::NAN), &mut s, &OptimConfig::default()).unwrap();
        assert_eq!(outcome, StepOutcome::Rejected);
        assert_eq!((s.faults, s.step), (1, 0));
        assert_eq!((p, s.m), before);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = scalar_params(1.0);
        let mut s = OptimState::new(&p);
        let g = BTreeMap::from([("x".to_string(), Tensor::new(vec![2], vec![0.0, 0.0]))]);
        assert!(adamax_step(&mut p, &g, &mut s, &OptimConfig::default()).is_err());
        let g = BTreeMap::from([("y".to_string(), Tensor::new(vec![1], vec![0.0]))]);
        assert!(adamax_step(&mut p, &g, &mut s, &OptimConfig::default()).is_err());
    }

    #[test]
    fn lr_decay_mode_keeps_parameters_without_gradient() {
        let mut p = scalar_params(2.0);
        let mut s = OptimState::new(&p);
        let cfg = OptimConfig {
            decay_mode: DecayMode::Lr,
            ..OptimConfig::default()
        };
        adamax_step(&mut p, &BTreeMap::new(), &mut s, &cfg).unwrap();
        assert_eq!(p["x"].data[0], 2.0);
        assert_eq!("lr".parse::<DecayMode>().unwrap(), DecayMode::Lr);
        assert!("l2".parse::<DecayMode>().is_err());
    }
}
