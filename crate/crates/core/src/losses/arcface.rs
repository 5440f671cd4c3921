//! Additive angular margin classifier: the target logit becomes
//! `s * cos(theta_t + m)` while the others stay `s * cos(theta_j)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::embedding::{dot, l2_norm, UNIT_NORM_TOL};
use crate::model::params::{glorot_uniform, seeded_rng, Grads, ParamSet};

use super::softmax::softmax_cross_entropy_grad;

const COS_CLAMP: f64 = 1.0 - 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArcConfig {
    /// Angular margin in radians.
    pub margin: f64,
    pub scale: f64,
    pub num_classes: usize,
}

impl Default for ArcConfig {
    fn default() -> Self {
        ArcConfig {
            margin: 0.5,
            scale: 30.0,
            num_classes: 2,
        }
    }
}

impl ArcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::InvalidConfig(format!("arc margin {} outside [0, pi/2)", self.margin)));
        }
        if self.scale <= 0.0 {
            return Err(Error::InvalidConfig("arc scale must be > 0".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("arc num_classes must be >= 1".into()));
        }
        Ok(())
    }

    /// `cos(pi - m)`: below it `theta + m` would pass pi.
    fn threshold(&self) -> f64 {
        (std::f64::consts::PI - self.margin).cos()
    }

    /// Target logit from its raw cosine, and `d logit / d cos`.
    fn target_logit(&self, cos: f64) -> (f64, f64) {
        let c = cos.clamp(-COS_CLAMP, COS_CLAMP);
        if c > self.threshold() {
            let theta = c.acos();
            let value = self.scale * (theta + self.margin).cos();
            let slope = if c == cos {
                self.scale * (theta + self.margin).sin() / (1.0 - c * c).sqrt()
            } else {
                0.0
            };
            (value, slope)
        } else {
            // Past the monotone range: linear penalty keeps the logit decreasing.
            let penalty = self.margin * self.margin.sin();
            (self.scale * (cos - penalty), self.scale)
        }
    }
}

/// Logits for a unit embedding against unit class columns.
///
/// `weights` is `dim x num_classes` row-major with unit-norm columns.
pub fn arcface_logits(embedding: &[f64], weights: &[f64], target: usize, cfg: &ArcConfig) -> Result<Vec<f64>> {
    let dim = embedding.len();
    let c = cfg.num_classes;
    if weights.len() != dim * c {
        return Err(Error::shape(dim * c, weights.len()));
    }
    if target >= c {
        return Err(Error::InvalidTarget { target, num_classes: c });
    }
    if (l2_norm(embedding) - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidConfig("arcface embedding must be unit norm".into()));
    }
    for j in 0..c {
        let n: f64 = (0..dim).map(|k| weights[k * c + j].powi(2)).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidConfig(format!("arcface weight column {j} is not unit norm")));
        }
    }
    let cosines = column_cosines(embedding, weights, c);
    Ok(logits_from_cosines(&cosines, target, cfg).0)
}

fn column_cosines(e: &[f64], w: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (k, ek) in e.iter().enumerate() {
        for (o, wk) in out.iter_mut().zip(&w[k * c..(k + 1) * c]) {
            *o += ek * wk;
        }
    }
    out
}

fn logits_from_cosines(cosines: &[f64], target: usize, cfg: &ArcConfig) -> (Vec<f64>, f64) {
    let mut logits: Vec<f64> = cosines.iter().map(|c| cfg.scale * c).collect();
    let (t, slope) = cfg.target_logit(cosines[target]);
    logits[target] = t;
    (logits, slope)
}

/// The trainable classifier: a `dim x num_classes` weight matrix whose
/// columns (and the incoming embedding) are normalized on every pass.
#[derive(Debug, Clone)]
pub struct ArcFaceLayer {
    pub config: ArcConfig,
    pub params: ParamSet,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct ArcStep {
    pub loss: f64,
    pub logits: Vec<f64>,
    /// Gradient with respect to the (unnormalized) input embedding.
    pub d_input: Vec<f64>,
}

impl ArcFaceLayer {
    pub fn new(dim: usize, config: ArcConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed, "arcface");
        let c = config.num_classes;
        let mut params = ParamSet::default();
        params.push("arcface/weight", vec![dim, c], glorot_uniform(&mut rng, dim, c, dim * c));
        Ok(ArcFaceLayer { config, params, dim })
    }

    fn unit_columns(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.config.num_classes;
        let w = &self.params.params[0].data;
        let mut norms = vec![0.0; c];
        for row in w.chunks_exact(c) {
            for (n, x) in norms.iter_mut().zip(row) {
                *n += x * x;
            }
        }
        norms.iter_mut().for_each(|n| *n = n.sqrt());
        if norms.iter().any(|&n| n == 0.0) {
            return Err(Error::DegenerateEmbedding);
        }
        let unit = w
            .chunks_exact(c)
            .flat_map(|row| row.iter().zip(&norms).map(|(x, n)| x / n))
            .collect();
        Ok((unit, norms))
    }

    /// Plain scaled cosines (no margin), used for prediction.
    pub fn cosines(&self, embedding: &[f64]) -> Result<Vec<f64>> {
        let n = l2_norm(embedding);
        if n == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        let e: Vec<f64> = embedding.iter().map(|x| x / n).collect();
        let (w, _) = self.unit_columns()?;
        Ok(column_cosines(&e, &w, self.config.num_classes))
    }

    pub fn predict(&self, embedding: &[f64]) -> Result<usize> {
        let cos = self.cosines(embedding)?;
        Ok(cos
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
            .0)
    }

    /// Margin logits and cross-entropy for one sample; accumulates the
    /// weight gradient into `grads` and returns the input gradient.
    pub fn step(&self, embedding: &[f64], target: usize, grads: &mut Grads) -> Result<ArcStep> {
        let c = self.config.num_classes;
        if embedding.len() != self.dim {
            return Err(Error::shape(self.dim, embedding.len()));
        }
        if target >= c {
            return Err(Error::InvalidTarget { target, num_classes: c });
        }
        let en = l2_norm(embedding);
        if en == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        let e: Vec<f64> = embedding.iter().map(|x| x / en).collect();
        let (w, norms) = self.unit_columns()?;
        let cosines = column_cosines(&e, &w, c);
        let (logits, slope) = logits_from_cosines(&cosines, target, &self.config);
        let (loss, dlogits) = softmax_cross_entropy_grad(&logits, target);
        let dcos: Vec<f64> = dlogits
            .iter()
            .enumerate()
            .map(|(j, g)| if j == target { g * slope } else { g * self.config.scale })
            .collect();

        // Through cos_j = e . w_j with both sides normalized.
        let mut de = vec![0.0; self.dim];
        for (k, d) in de.iter_mut().enumerate() {
            *d = dot(&w[k * c..(k + 1) * c], &dcos);
        }
        let proj = dot(&e, &de);
        let d_input = e.iter().zip(&de).map(|(u, g)| (g - u * proj) / en).collect();

        let gw = &mut grads.0[0];
        for j in 0..c {
            if dcos[j] == 0.0 {
                continue;
            }
            // d unit_w / d w = (I - u u^T) / |w|
            let mut proj = 0.0;
            for k in 0..self.dim {
                proj += w[k * c + j] * e[k];
            }
            for k in 0..self.dim {
                gw[k * c + j] += dcos[j] * (e[k] - w[k * c + j] * proj) / norms[j];
            }
        }
        Ok(ArcStep { loss, logits, d_input })
    }
}
