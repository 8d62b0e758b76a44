//! SGD with momentum and decoupled weight decay, plus the learning-rate
//! schedules.
//!
//! The update is the textbook recurrence
//!
//! ```text
//! v <- mu * v + g
//! p <- p - lr * v - lr * wd * p
//! ```
//!
//! Weight decay is applied directly to the parameter (not folded into the
//! gradient), so with a zero gradient parameters decay geometrically by
//! (1 - lr * wd) per step.

use ndarray::ArrayD;

use crate::config::{OptimizerConfig, Schedule};
use crate::params::ParamStore;

/// Learning rate at `step` of `max_steps`. Poly decay uses exponent 0.9 and
/// reaches exactly 0 at `max_steps`; the constant schedule ignores the step.
pub fn learning_rate(schedule: Schedule, base_lr: f64, step: usize, max_steps: usize) -> f64 {
    match schedule {
        Schedule::Constant => base_lr,
        Schedule::Poly => {
            let frac = 1.0 - (step as f64 / max_steps.max(1) as f64).min(1.0);
            base_lr * frac.powf(0.9)
        }
    }
}

pub struct SgdOptimizer {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: ParamStore,
}

impl SgdOptimizer {
    pub fn new(config: &OptimizerConfig, params: &ParamStore) -> SgdOptimizer {
        let mut velocity = ParamStore::new();
        for (name, value) in params.iter() {
            velocity.insert(name.to_string(), ArrayD::zeros(value.raw_dim()));
        }
        SgdOptimizer {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity,
        }
    }

    /// Resume with previously saved momentum buffers.
    pub fn with_velocity(config: &OptimizerConfig, velocity: ParamStore) -> SgdOptimizer {
        SgdOptimizer {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            velocity,
        }
    }

    pub fn velocity(&self) -> &ParamStore {
        &self.velocity
    }

    /// Apply one step. `grad_of` returns the gradient for a parameter name
    /// (zero counts as "no update from the loss", decay still applies).
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        lr: f64,
        mut grad_of: impl FnMut(&str) -> Option<ArrayD<f64>>,
    ) {
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let grad = grad_of(&name);
            let mu = self.momentum;
            let wd = self.weight_decay;
            self.velocity.update(&name, |v| {
                v.mapv_inplace(|x| x * mu);
                if let Some(g) = &grad {
                    *v += g;
                }
            });
            let v = self.velocity.get(&name).clone();
            params.update(&name, |p| {
                ndarray::Zip::from(&mut *p).and(&v).for_each(|pv, &vv| {
                    *pv -= lr * vv + lr * wd * *pv;
                });
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn scalar_store(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", ArrayD::from_elem(IxDyn(&[]), value));
        s
    }

    #[test]
    fn three_step_trace_matches_hand_recurrence() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut params = scalar_store(1.0);
        let mut opt = SgdOptimizer::new(&cfg, &params);
        let g = 0.5f64;
        for _ in 0..3 {
            opt.step(&mut params, cfg.learning_rate, |_| {
                Some(ArrayD::from_elem(IxDyn(&[]), g))
            });
        }
        // Identical f64 recurrence by hand.
        let (mut p, mut v) = (1.0f64, 0.0f64);
        for _ in 0..3 {
            v = 0.9 * v + g;
            p -= 0.1 * v + 0.1 * 0.0 * p;
        }
        assert_eq!(params.get("p")[[]], p);
        assert_eq!(opt.velocity().get("p")[[]], v);
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let cfg = OptimizerConfig {
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 0.01,
            ..OptimizerConfig::default()
        };
        let mut params = scalar_store(2.0);
        let mut opt = SgdOptimizer::new(&cfg, &params);
        let factor = 1.0 - cfg.learning_rate * cfg.weight_decay;
        for k in 1..=5usize {
            opt.step(&mut params, cfg.learning_rate, |_| {
                Some(ArrayD::zeros(IxDyn(&[])))
            });
            let expected = 2.0 * factor.powi(k as i32);
            let got = params.get("p")[[]];
            assert!(
                ((got - expected) / expected).abs() < 1e-12,
                "step {k}: {got} vs {expected}"
            );
        }
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(learning_rate(Schedule::Poly, 0.01, 0, 100), 0.01);
        assert_eq!(learning_rate(Schedule::Poly, 0.01, 100, 100), 0.0);
        assert!(learning_rate(Schedule::Poly, 0.01, 50, 100) < 0.01);
        assert_eq!(learning_rate(Schedule::Constant, 0.01, 77, 100), 0.01);
    }
}
