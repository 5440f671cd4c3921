//! Two fully connected layers (rectifier between them) followed by L2
//! normalization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::embedding::{l2_norm, EmbeddingVector};
use super::layers::gemm;
use super::params::{glorot_uniform, seeded_rng, Grads, ParamSet};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub fc1_units: usize,
    pub fc2_units: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            input_dim: 1024,
            fc1_units: 1024,
            fc2_units: 512,
        }
    }
}

impl HeadConfig {
    pub fn param_count(&self) -> usize {
        self.input_dim * self.fc1_units + self.fc1_units + self.fc1_units * self.fc2_units + self.fc2_units
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    pub config: HeadConfig,
    pub params: ParamSet,
}

const W1: usize = 0;
const B1: usize = 1;
const W2: usize = 2;
const B2: usize = 3;

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadTape {
    input: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
    pre_norm: f64,
}

impl Head {
    pub fn new(config: HeadConfig, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "head");
        let (i, h, o) = (config.input_dim, config.fc1_units, config.fc2_units);
        let mut params = ParamSet::default();
        params.push("head/fc1/weight", vec![i, h], glorot_uniform(&mut rng, i, h, i * h));
        params.push("head/fc1/bias", vec![h], vec![0.0; h]);
        params.push("head/fc2/weight", vec![h, o], glorot_uniform(&mut rng, h, o, h * o));
        params.push("head/fc2/bias", vec![o], vec![0.0; o]);
        Head { config, params }
    }

    /// Head with explicit weights (`w1: input x fc1`, `w2: fc1 x fc2`).
    pub fn from_weights(config: HeadConfig, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        let (i, h, o) = (config.input_dim, config.fc1_units, config.fc2_units);
        if w1.len() != i * h || b1.len() != h || w2.len() != h * o || b2.len() != o {
            return Err(Error::shape((i * h, h, h * o, o), (w1.len(), b1.len(), w2.len(), b2.len())));
        }
        let mut params = ParamSet::default();
        params.push("head/fc1/weight", vec![i, h], w1);
        params.push("head/fc1/bias", vec![h], b1);
        params.push("head/fc2/weight", vec![h, o], w2);
        params.push("head/fc2/bias", vec![o], b2);
        Ok(Head { config, params })
    }

    /// Output of the second layer before normalization.
    pub fn pre_normalized(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.layers(input)?.1)
    }

    fn layers(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let (i, h, o) = (self.config.input_dim, self.config.fc1_units, self.config.fc2_units);
        if input.len() != i {
            return Err(Error::shape(i, input.len()));
        }
        let p = &self.params.params;
        let mut hidden = p[B1].data.clone();
        gemm(1, i, h, input, false, &p[W1].data, false, 1.0, &mut hidden);
        hidden.iter_mut().for_each(|v| if *v < 0.0 { *v = 0.0 });
        let mut out = p[B2].data.clone();
        gemm(1, h, o, &hidden, false, &p[W2].data, false, 1.0, &mut out);
        Ok((hidden, out))
    }

    pub fn forward(&self, e: &EmbeddingVector) -> Result<EmbeddingVector> {
        Ok(self.forward_train(&e.values)?.0)
    }

    pub fn forward_train(&self, input: &[f64]) -> Result<(EmbeddingVector, HeadTape)> {
        let (hidden, out) = self.layers(input)?;
        let n = l2_norm(&out);
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        if !n.is_finite() {
            return Err(Error::NonFinite("head output".into()));
        }
        let output: Vec<f64> = out.iter().map(|v| v / n).collect();
        Ok((
            EmbeddingVector {
                values: output.clone(),
                normalized: true,
            },
            HeadTape {
                input: input.to_vec(),
                hidden,
                output,
                pre_norm: n,
            },
        ))
    }

    /// Accumulate parameter gradients into `grads`; returns the input gradient.
    pub fn backward(&self, tape: &HeadTape, d_out: &[f64], grads: &mut Grads) -> Vec<f64> {
        let (i, h, o) = (self.config.input_dim, self.config.fc1_units, self.config.fc2_units);
        let p = &self.params.params;
        // d(z / |z|) = (I - u u^T) / |z|
        let proj: f64 = tape.output.iter().zip(d_out).map(|(u, g)| u * g).sum();
        let dz2: Vec<f64> = tape
            .output
            .iter()
            .zip(d_out)
            .map(|(u, g)| (g - u * proj) / tape.pre_norm)
            .collect();
        gemm(h, 1, o, &tape.hidden, true, &dz2, false, 1.0, &mut grads.0[W2]);
        grads.0[B2].iter_mut().zip(&dz2).for_each(|(b, d)| *b += d);
        let mut dh = vec![0.0; h];
        gemm(1, o, h, &dz2, false, &p[W2].data, true, 0.0, &mut dh);
        for (d, a) in dh.iter_mut().zip(&tape.hidden) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        gemm(i, 1, h, &tape.input, true, &dh, false, 1.0, &mut grads.0[W1]);
        grads.0[B1].iter_mut().zip(&dh).for_each(|(b, d)| *b += d);
        let mut dx = vec![0.0; i];
        gemm(1, h, i, &dh, false, &p[W1].data, true, 0.0, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::embedding::UNIT_NORM_TOL;

    fn small() -> HeadConfig {
        HeadConfig {
            input_dim: 4,
            fc1_units: 4,
            fc2_units: 4,
        }
    }

    #[test]
    fn output_is_unit_norm() {
        let head = Head::new(HeadConfig::default(), 4);
        let x: Vec<f64> = (0..1024).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let y = head.forward(&EmbeddingVector::raw(x)).unwrap();
        assert_eq!(y.len(), 512);
        assert!((y.norm() - 1.0).abs() <= UNIT_NORM_TOL);
        assert!(y.normalized);
    }

    #[test]
    fn hand_multiplied_reduced_head() {
        // w1 = 2 I, b1 = (0, -1, 0, 0), w2 = permutation (0 1 2 3) -> (1 0 3 2) scaled by 3, b2 = 0.5.
        let mut w1 = vec![0.0; 16];
        for k in 0..4 {
            w1[k * 4 + k] = 2.0;
        }
        let b1 = vec![0.0, -1.0, 0.0, 0.0];
        let mut w2 = vec![0.0; 16];
        for (r, c) in [(0, 1), (1, 0), (2, 3), (3, 2)] {
            w2[r * 4 + c] = 3.0;
        }
        let b2 = vec![0.5; 4];
        let head = Head::from_weights(small(), w1, b1, w2, b2).unwrap();
        // e1: hidden = relu(2 e1 + b1) = (2, 0, 0, 0); out = 3 * (0, 2, 0, 0) + 0.5.
        let z = head.pre_normalized(&[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.5, 6.5, 0.5, 0.5]);
        // e2: hidden = relu((0, 2, 0, 0) + b1) = (0, 1, 0, 0); out = (3, 0, 0, 0) + 0.5.
        let z = head.pre_normalized(&[0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(z, vec![3.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn zero_output_is_degenerate() {
        let cfg = small();
        let head = Head::from_weights(cfg, vec![0.0; 16], vec![0.0; 4], vec![0.0; 16], vec![0.0; 4]).unwrap();
        assert!(matches!(head.forward(&EmbeddingVector::raw(vec![0.0; 4])), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn wrong_input_length() {
        let head = Head::new(small(), 1);
        assert!(matches!(head.forward(&EmbeddingVector::raw(vec![1.0; 5])), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = HeadConfig { input_dim: 6, fc1_units: 5, fc2_units: 4 };
        let head = Head::new(cfg, 21);
        let x = vec![0.3, -0.2, 0.9, 0.1, -0.7, 0.4];
        let r = vec![0.5, -1.0, 0.25, 2.0];
        let f = |h: &Head, x: &[f64]| -> f64 {
            let (y, _) = h.forward_train(x).unwrap();
            y.values.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (_, tape) = head.forward_train(&x).unwrap();
        let mut grads = head.params.zeros_like();
        let dx = head.backward(&tape, &r, &mut grads);
        let eps = 1e-6;
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += eps;
            let mut xm = x.clone();
            xm[k] -= eps;
            let fd = (f(&head, &xp) - f(&head, &xm)) / (2.0 * eps);
            assert!((fd - dx[k]).abs() < 1e-7, "{fd} vs {}", dx[k]);
        }
        for pi in 0..4 {
            for j in 0..head.params.params[pi].data.len() {
                let mut hp = head.clone();
                hp.params.params[pi].data[j] += eps;
                let mut hm = head.clone();
                hm.params.params[pi].data[j] -= eps;
                let fd = (f(&hp, &x) - f(&hm, &x)) / (2.0 * eps);
                assert!((fd - grads.0[pi][j]).abs() < 1e-7);
            }
        }
    }
}
