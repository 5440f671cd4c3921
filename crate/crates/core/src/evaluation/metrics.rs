use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::protocol::ScoreSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// Error trade-off points in increasing threshold order, from -inf to +inf.
/// A pair is accepted iff its score is >= the threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

fn sorted(scores: &[f64], what: &'static str) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::EmptyScores(what));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("{what} score")));
    }
    let mut v = scores.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn det_curve(scores: &ScoreSet) -> Result<DetCurve> {
    let gen = sorted(&scores.genuine, "genuine")?;
    let imp = sorted(&scores.impostor, "impostor")?;
    let (ng, ni) = (gen.len() as f64, imp.len() as f64);
    let mut thresholds: Vec<f64> = Vec::with_capacity(gen.len() + imp.len() + 2);
    thresholds.push(f64::NEG_INFINITY);
    thresholds.extend(gen.iter().chain(imp.iter()).copied());
    thresholds.push(f64::INFINITY);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    // gi / ii count scores strictly below the current threshold.
    let (mut gi, mut ii) = (0usize, 0usize);
    let points = thresholds
        .into_iter()
        .map(|t| {
            while gi < gen.len() && gen[gi] < t {
                gi += 1;
            }
            while ii < imp.len() && imp[ii] < t {
                ii += 1;
            }
            DetPoint {
                threshold: t,
                fmr: (imp.len() - ii) as f64 / ni,
                fnmr: gi as f64 / ng,
            }
        })
        .collect();
    Ok(DetCurve { points })
}

/// Rate where FMR and FNMR meet, interpolated linearly between the two
/// points that bracket the first sign change of FMR - FNMR.
pub fn eer(curve: &DetCurve) -> f64 {
    let pts = &curve.points;
    for (i, p) in pts.iter().enumerate() {
        let d = p.fmr - p.fnmr;
        if d == 0.0 {
            return p.fmr;
        }
        if d < 0.0 {
            if i == 0 {
                return (p.fmr + p.fnmr) / 2.0;
            }
            let q = &pts[i - 1];
            let dq = q.fmr - q.fnmr;
            let a = dq / (dq - d);
            let fmr = q.fmr + a * (p.fmr - q.fmr);
            let fnmr = q.fnmr + a * (p.fnmr - q.fnmr);
            return (fmr + fnmr) / 2.0;
        }
    }
    let last = pts.last().expect("curve has sentinels");
    (last.fmr + last.fnmr) / 2.0
}

/// True-match rate at the smallest threshold whose FMR is at most `target`.
pub fn tmr_at_fmr(curve: &DetCurve, target: f64) -> Result<f64> {
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::InvalidConfig(format!("target FMR {target} outside (0, 1)")));
    }
    curve
        .points
        .iter()
        .find(|p| p.fmr <= target)
        .map(|p| 1.0 - p.fnmr)
        .ok_or(Error::UnreachableOperatingPoint { target })
}

pub fn write_det_csv(curve: &DetCurve, path: &Path) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(["threshold", "fmr", "fnmr"]).map_err(fmt)?;
    for p in &curve.points {
        w.write_record([p.threshold.to_string(), p.fmr.to_string(), p.fnmr.to_string()])
            .map_err(fmt)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Summary in the column layout of a verification results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub genuine_count: usize,
    pub impostor_count: usize,
    pub eer: f64,
    pub eer_percent: f64,
    pub tmr_at_fmr_0_1_percent: f64,
    pub tmr_at_fmr_0_01_percent: f64,
}

impl MetricsReport {
    pub fn from_scores(scores: &ScoreSet) -> Result<(Self, DetCurve)> {
        let curve = det_curve(scores)?;
        let e = eer(&curve);
        let report = MetricsReport {
            genuine_count: scores.genuine.len(),
            impostor_count: scores.impostor.len(),
            eer: e,
            eer_percent: 100.0 * e,
            tmr_at_fmr_0_1_percent: 100.0 * tmr_at_fmr(&curve, 1e-3)?,
            tmr_at_fmr_0_01_percent: 100.0 * tmr_at_fmr(&curve, 1e-4)?,
        };
        Ok((report, curve))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}
