use serde::{Deserialize, Serialize};

use super::NnError;

/// SGD with momentum, L2 weight decay and a step learning-rate schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<f32>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// `(epoch, multiplier)`: the multiplier applies from that 0-based epoch on.
    pub schedule: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: Vec<(usize, f64)>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_schedule: vec![(10, 0.1), (13, 0.1)],
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(NnError::InvalidSpec(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NnError::InvalidSpec(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(NnError::InvalidSpec("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

impl OptimizerState {
    pub fn new(n_params: usize, cfg: &SgdConfig) -> Self {
        OptimizerState {
            velocity: vec![0.0; n_params],
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
            schedule: cfg.lr_schedule.clone(),
        }
    }

    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .filter(|(e, _)| *e <= epoch)
            .fold(self.lr, |lr, (_, m)| lr * m)
    }

    pub fn reset(&mut self) {
        self.velocity.fill(0.0);
    }
}

/// v ← μ·v + g + λ·θ;  θ ← θ − lr_eff·v. Nothing is written if any updated
/// value would be non-finite.
pub fn sgd_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut OptimizerState,
    epoch: usize,
) -> Result<(), NnError> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(NnError::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    let lr = state.effective_lr(epoch);
    let mut new_v = Vec::with_capacity(params.len());
    let mut new_p = Vec::with_capacity(params.len());
    for ((&p, &g), &v) in params.iter().zip(grads).zip(&state.velocity) {
        let v2 = (state.momentum * f64::from(v) + f64::from(g) + state.weight_decay * f64::from(p)) as f32;
        let p2 = (f64::from(p) - lr * f64::from(v2)) as f32;
        if !(v2.is_finite() && p2.is_finite()) {
            return Err(NnError::NonFiniteUpdate);
        }
        new_v.push(v2);
        new_p.push(p2);
    }
    params.copy_from_slice(&new_p);
    state.velocity = new_v;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(n: usize, lr: f64, momentum: f64, wd: f64) -> OptimizerState {
        OptimizerState::new(
            n,
            &SgdConfig {
                lr,
                momentum,
                weight_decay: wd,
                lr_schedule: vec![],
            },
        )
    }

    #[test]
    fn plain_sgd() {
        let mut p = vec![1.0f32, -2.0];
        let mut s = state(2, 0.1, 0.0, 0.0);
        sgd_step(&mut p, &[0.5, 1.0], &mut s, 0).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-7 && (p[1] + 2.1).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = vec![0.0f32];
        let mut s = state(1, 1.0, 0.9, 0.0);
        sgd_step(&mut p, &[1.0], &mut s, 0).unwrap();
        sgd_step(&mut p, &[1.0], &mut s, 0).unwrap();
        assert!((p[0] + 2.9).abs() < 1e-6);
    }

    #[test]
    fn default_schedule() {
        let s = OptimizerState::new(1, &SgdConfig::default());
        assert!((s.effective_lr(9) - 0.1).abs() < 1e-15);
        assert!((s.effective_lr(10) - 0.01).abs() < 1e-15);
        assert!((s.effective_lr(14) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn non_finite_rejected_without_writing() {
        let mut p = vec![1.0f32];
        let mut s = state(1, 0.1, 0.0, 0.0);
        assert!(matches!(
            sgd_step(&mut p, &[f32::NAN], &mut s, 0),
            Err(NnError::NonFiniteUpdate)
        ));
        assert_eq!(p, vec![1.0]);
        assert!(sgd_step(&mut p, &[1.0, 2.0], &mut s, 0).is_err());
    }

    #[test]
    fn invalid_config() {
        let c = SgdConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = SgdConfig {
            lr: 0.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
