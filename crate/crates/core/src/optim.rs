//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lr_max: 1e-5,
            lr_min: 0.0,
            total_steps: 260,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || !(self.eps > 0.0) {
            return Err(Error::Config("AdamW needs 0 <= beta < 1 and eps > 0".into()));
        }
        if !(self.lr_max >= 0.0 && self.lr_min >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rates and weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update in place. A non-finite gradient leaves everything
/// untouched and returns an error.
pub fn adamw_step(
    config: &AdamWConfig,
    state: &mut AdamWState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    if params.len() != grad.len() || state.m.len() != params.len() {
        return Err(Error::Config(format!(
            "AdamW length mismatch: {} params, {} gradient, {} state",
            params.len(),
            grad.len(),
            state.m.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Eval { person: None, term: "gradient" });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + config.eps) + config.weight_decay * params[i]);
    }
    Ok(())
}

/// `lr_min + ½(lr_max − lr_min)(1 + cos(πt/T))`, clamped to `lr_min` past `T`.
pub fn cosine_lr(config: &AdamWConfig, step: usize) -> f64 {
    let total = config.total_steps.max(1);
    if step >= total {
        return config.lr_min;
    }
    let phase = std::f64::consts::PI * step as f64 / total as f64;
    config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1.0 + phase.cos())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct Minimization {
    /// Best iterate seen (the final one unless the objective rose).
    pub x: Vec<f64>,
    pub objective: f64,
    pub best_step: usize,
    /// Objective at every iterate, including the one after the last step.
    pub trajectory: Vec<StepRecord>,
    /// Set when evaluation failed; `x` is then the best iterate before it.
    pub error: Option<Error>,
}

/// Runs `total_steps` AdamW steps on `eval`, which returns the objective and
/// its gradient. `on_step` sees every recorded iterate.
pub fn minimize<F, C>(mut eval: F, x0: &[f64], config: &AdamWConfig, mut on_step: C) -> Result<Minimization>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    C: FnMut(&StepRecord),
{
    config.validate()?;
    let mut x = x0.to_vec();
    let mut state = AdamWState::new(x.len());
    let mut trajectory = Vec::with_capacity(config.total_steps + 1);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    let mut step = 0;
    loop {
        let lr = cosine_lr(config, step);
        let (value, grad) = match eval(&x).and_then(|(v, g)| {
            if v.is_finite() {
                Ok((v, g))
            } else {
                Err(Error::Eval { person: None, term: "objective" })
            }
        }) {
            Ok(vg) => vg,
            Err(e) => return Ok(interrupted(best, x0, trajectory, e)),
        };
        let record = StepRecord { step, lr, objective: value };
        on_step(&record);
        trajectory.push(record);
        if best.as_ref().map_or(true, |(b, _, _)| value < *b) {
            best = Some((value, step, x.clone()));
        }
        if step == config.total_steps {
            break;
        }
        if let Err(e) = adamw_step(config, &mut state, &mut x, &grad, lr) {
            return Ok(interrupted(best, x0, trajectory, e));
        }
        step += 1;
    }
    let (objective, best_step, x) = best.expect("at least one evaluation");
    Ok(Minimization {
        x,
        objective,
        best_step,
        trajectory,
        error: None,
    })
}

fn interrupted(
    best: Option<(f64, usize, Vec<f64>)>,
    x0: &[f64],
    trajectory: Vec<StepRecord>,
    error: Error,
) -> Minimization {
    let (objective, best_step, x) = best.unwrap_or((f64::NAN, 0, x0.to_vec()));
    Minimization {
        x,
        objective,
        best_step,
        trajectory,
        error: Some(error),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quadratic(x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()))
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let c = AdamWConfig::default();
        let mut s = AdamWState::new(2);
        let mut p = vec![1.0, -2.0];
        adamw_step(&c, &mut s, &mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_hand_value() {
        let c = AdamWConfig::default();
        let mut s = AdamWState::new(1);
        let mut p = vec![0.0];
        adamw_step(&c, &mut s, &mut p, &[1.0], 0.1).unwrap();
        assert!((p[0] - (-0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn pure_decoupled_decay() {
        let c = AdamWConfig { weight_decay: 0.1, ..AdamWConfig::default() };
        let mut s = AdamWState::new(1);
        let mut p = vec![1.0];
        adamw_step(&c, &mut s, &mut p, &[0.0], 0.1).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_refused() {
        let c = AdamWConfig::default();
        let mut s = AdamWState::new(2);
        let mut p = vec![1.0, 1.0];
        assert!(adamw_step(&c, &mut s, &mut p, &[0.5, f64::NAN], 0.1).is_err());
        assert_eq!(p, vec![1.0, 1.0]);
        assert_eq!(s, AdamWState::new(2));
        assert!(adamw_step(&c, &mut s, &mut p, &[0.5], 0.1).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        let c = AdamWConfig { lr_max: 0.3, lr_min: 0.1, total_steps: 100, ..AdamWConfig::default() };
        assert_eq!(cosine_lr(&c, 0), 0.3);
        assert_eq!(cosine_lr(&c, 100), 0.1);
        assert!((cosine_lr(&c, 50) - 0.2).abs() < 1e-15);
        assert_eq!(cosine_lr(&c, 1000), 0.1);
    }

    #[test]
    fn cosine_is_non_increasing() {
        let c = AdamWConfig { lr_max: 1.0, total_steps: 260, ..AdamWConfig::default() };
        for t in 0..260 {
            assert!(cosine_lr(&c, t + 1) <= cosine_lr(&c, t));
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let c = AdamWConfig { lr_max: 0.5, total_steps: 260, ..AdamWConfig::default() };
        let out = minimize(quadratic, &[10.0, 10.0], &c, |_| {}).unwrap();
        let n = (out.x[0].powi(2) + out.x[1].powi(2)).sqrt();
        assert!(n < 1e-3, "{n}");
        assert_eq!(out.trajectory.len(), 261);
        assert!(out.objective <= out.trajectory[0].objective);
    }

    #[test]
    fn zero_steps_returns_start() {
        let c = AdamWConfig { total_steps: 0, ..AdamWConfig::default() };
        let out = minimize(quadratic, &[3.0, 4.0], &c, |_| {}).unwrap();
        assert_eq!(out.x, vec![3.0, 4.0]);
        assert_eq!(out.trajectory.len(), 1);
    }

    #[test]
    fn error_returns_best_iterate() {
        let c = AdamWConfig { lr_max: 0.1, total_steps: 50, ..AdamWConfig::default() };
        let mut calls = 0;
        let out = minimize(
            |x: &[f64]| {
                calls += 1;
                if calls > 10 {
                    Err(Error::Eval { person: Some(3), term: "keyp" })
                } else {
                    quadratic(x)
                }
            },
            &[1.0],
            &c,
            |_| {},
        )
        .unwrap();
        assert!(out.error.is_some());
        assert_eq!(out.trajectory.len(), 10);
        assert!(out.objective < 1.0);
        assert_eq!(out.best_step, 9);
    }

    #[test]
    fn deterministic() {
        let c = AdamWConfig { lr_max: 0.05, total_steps: 40, ..AdamWConfig::default() };
        let a = minimize(quadratic, &[1.0, -2.0, 3.0], &c, |_| {}).unwrap();
        let b = minimize(quadratic, &[1.0, -2.0, 3.0], &c, |_| {}).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.trajectory, b.trajectory);
    }

    proptest! {
        #[test]
        fn step_is_bounded_by_lr(
            grads in proptest::collection::vec(proptest::collection::vec(-1e3..1e3f64, 4), 1..30),
            lr in 1e-6..1.0f64,
        ) {
            let c = AdamWConfig::default();
            let mut s = AdamWState::new(4);
            let mut p = vec![0.0; 4];
            for g in &grads {
                let before = p.clone();
                adamw_step(&c, &mut s, &mut p, g, lr).unwrap();
                for i in 0..4 {
                    prop_assert!((p[i] - before[i]).abs() <= 10.0 * lr);
                }
            }
        }
    }
}
