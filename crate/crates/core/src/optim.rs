//! Adaptive-moment gradient descent.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{Grads, ParamSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            learning_rate: 1.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 1000,
        }
    }
}

impl OptimizerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("moment decays must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    spec: OptimizerSpec,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(spec: OptimizerSpec, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Adam {
            spec,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) {
        self.t += 1;
        let OptimizerSpec {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
            ..
        } = self.spec;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.params.iter_mut().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.data.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                p.data[i] -= update;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::default();
        ps.push("x", vec![2], vec![1.0, -1.0]);
        let mut opt = Adam::new(OptimizerSpec { learning_rate: 0.1, ..Default::default() }, &ps);
        opt.step(&mut ps, &Grads(vec![vec![3.0, -0.5]]));
        assert!((ps.params[0].data[0] - 0.9).abs() < 1e-6);
        assert!((ps.params[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamSet::default();
        ps.push("x", vec![1], vec![5.0]);
        let mut opt = Adam::new(OptimizerSpec { learning_rate: 0.1, ..Default::default() }, &ps);
        for _ in 0..500 {
            let g = 2.0 * (ps.params[0].data[0] - 2.0);
            opt.step(&mut ps, &Grads(vec![vec![g]]));
        }
        assert!((ps.params[0].data[0] - 2.0).abs() < 1e-2);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut ps = ParamSet::default();
        ps.push("x", vec![3], vec![1e30, -1e-30, 0.25]);
        let before = ps.clone();
        let mut opt = Adam::new(OptimizerSpec { learning_rate: 0.0, ..Default::default() }, &ps);
        opt.step(&mut ps, &Grads(vec![vec![1.0, 2.0, -3.0]]));
        assert_eq!(ps, before);
    }
}
