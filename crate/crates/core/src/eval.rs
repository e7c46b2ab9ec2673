//! Prediction accuracy: RMSE per axis and in 3D, DTW-matched along-track,
//! cross-track and vertical errors, ETA error and percentile summaries.
//!
//! All distances are meters in the east-north-up frame of a reference
//! position (the destination airport in the pipeline). The "lon" and "lat"
//! RMSE components are the east and north axes of that frame.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::dtw_points;
use crate::error::{invalid, Result};
use crate::geo::{to_enu, GeoPosition, Trajectory};
use crate::preprocess::MinMaxScaler;

/// For every predicted point, the index of its matched actual point: the
/// first actual index paired with it on the DTW path over min-max scaled
/// positions (scaling fitted on both trajectories together).
pub fn match_points(pred: &Trajectory, actual: &Trajectory) -> Result<Vec<usize>> {
    if pred.is_empty() || actual.is_empty() {
        return Err(invalid("cannot match empty trajectories"));
    }
    let raw = |t: &Trajectory| -> Vec<Vec<f64>> {
        t.positions().map(|p| vec![p.lon, p.lat, p.alt]).collect()
    };
    let (a, b) = (raw(pred), raw(actual));
    let both: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
    let scaler = MinMaxScaler::fit_lenient(&both)?;
    let a: Vec<Vec<f64>> = a.iter().map(|p| scaler.apply(p)).collect();
    let b: Vec<Vec<f64>> = b.iter().map(|p| scaler.apply(p)).collect();
    let path = dtw_points(&a, &b)?.path;
    let mut matched = vec![usize::MAX; pred.len()];
    for (i, j) in path {
        if matched[i] == usize::MAX {
            matched[i] = j;
        }
    }
    Ok(matched)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisRmse {
    pub lon: f64,
    pub lat: f64,
    pub alt: f64,
    pub d3: f64,
}

fn check_matching(pred: &Trajectory, actual: &Trajectory, matching: &[usize]) -> Result<()> {
    if matching.len() != pred.len() || matching.iter().any(|&j| j >= actual.len()) {
        return Err(invalid("matching does not fit the trajectories"));
    }
    Ok(())
}

pub fn rmse(pred: &Trajectory, actual: &Trajectory, matching: &[usize], reference: &GeoPosition) -> Result<AxisRmse> {
    check_matching(pred, actual, matching)?;
    let mut s = [0.0; 4];
    for (i, &j) in matching.iter().enumerate() {
        let d = to_enu(reference, &actual.states[j].position).sub(&to_enu(reference, &pred.states[i].position));
        s[0] += d.east * d.east;
        s[1] += d.north * d.north;
        s[2] += d.up * d.up;
        s[3] += d.east * d.east + d.north * d.north + d.up * d.up;
    }
    let n = matching.len() as f64;
    Ok(AxisRmse {
        lon: (s[0] / n).sqrt(),
        lat: (s[1] / n).sqrt(),
        alt: (s[2] / n).sqrt(),
        d3: (s[3] / n).sqrt(),
    })
}

/// Error of one matched pair in the predicted-course frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairError {
    pub pred_index: usize,
    pub actual_index: usize,
    /// Along the predicted course; positive when the actual point is ahead.
    pub ate: f64,
    /// Perpendicular to the course; positive when the actual point is left.
    pub cte: f64,
    pub v: f64,
    /// Horizontal distance between the pair.
    pub horizontal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackErrors {
    pub ate: f64,
    pub cte: f64,
    pub v: f64,
    pub pairs: Vec<PairError>,
}

/// Unit horizontal course at every predicted point: the direction to the
/// next point, the previous course for the last point, and for stationary
/// stretches the last non-degenerate course (or the next one at the start).
fn courses(pred: &Trajectory, reference: &GeoPosition) -> Result<Vec<(f64, f64)>> {
    let enu: Vec<_> = pred.positions().map(|p| to_enu(reference, p)).collect();
    let raw: Vec<Option<(f64, f64)>> = enu
        .windows(2)
        .map(|w| {
            let (e, n) = (w[1].east - w[0].east, w[1].north - w[0].north);
            let len = e.hypot(n);
            (len > 0.0).then(|| (e / len, n / len))
        })
        .collect();
    let first = raw
        .iter()
        .flatten()
        .next()
        .copied()
        .ok_or_else(|| invalid(format!("predicted trajectory `{}` never moves horizontally", pred.id)))?;
    let mut out = Vec::with_capacity(pred.len());
    let mut last = first;
    for c in &raw {
        if let Some(c) = c {
            last = *c;
        }
        out.push(last);
    }
    out.push(last);
    Ok(out)
}

pub fn track_errors(
    pred: &Trajectory,
    actual: &Trajectory,
    matching: &[usize],
    reference: &GeoPosition,
) -> Result<TrackErrors> {
    if pred.len() < 2 {
        return Err(invalid("track errors need at least two predicted points"));
    }
    check_matching(pred, actual, matching)?;
    let course = courses(pred, reference)?;
    let mut pairs = Vec::with_capacity(pred.len());
    for (i, &j) in matching.iter().enumerate() {
        let d = to_enu(reference, &actual.states[j].position).sub(&to_enu(reference, &pred.states[i].position));
        let (ue, un) = course[i];
        pairs.push(PairError {
            pred_index: i,
            actual_index: j,
            ate: d.east * ue + d.north * un,
            cte: -d.east * un + d.north * ue,
            v: d.up,
            horizontal: d.horizontal_norm(),
        });
    }
    let n = pairs.len() as f64;
    Ok(TrackErrors {
        ate: pairs.iter().map(|p| p.ate).sum::<f64>() / n,
        cte: pairs.iter().map(|p| p.cte).sum::<f64>() / n,
        v: pairs.iter().map(|p| p.v).sum::<f64>() / n,
        pairs,
    })
}

/// `|dt * steps(pred) - duration(actual)|`, where a predicted trajectory of
/// `n` points spans `n - 1` steps.
pub fn eta_error(pred: &Trajectory, actual: &Trajectory, dt: i64) -> f64 {
    let predicted = crate::geo::eta(pred.len().saturating_sub(1), dt);
    (predicted - actual.duration()).abs() as f64
}

/// Metrics of one prediction against its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub rmse: AxisRmse,
    pub track: TrackErrors,
    pub eta_error: f64,
}

pub fn evaluate(pred: &Trajectory, actual: &Trajectory, reference: &GeoPosition, dt: i64) -> Result<Evaluation> {
    let matching = match_points(pred, actual)?;
    Ok(Evaluation {
        rmse: rmse(pred, actual, &matching, reference)?,
        track: track_errors(pred, actual, &matching, reference)?,
        eta_error: eta_error(pred, actual, dt),
    })
}

/// One row of the per-run metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub setting: String,
    pub m: f64,
    pub repetition: usize,
    pub test_id: String,
    pub seed: u64,
    pub cluster: i64,
    pub termination: String,
    pub pred_len: usize,
    pub rmse_lon: f64,
    pub rmse_lat: f64,
    pub rmse_alt: f64,
    pub rmse_3d: f64,
    pub ate: f64,
    pub cte: f64,
    pub v: f64,
    pub eta_error: f64,
}

impl MetricsRecord {
    pub const METRICS: [&'static str; 8] = ["rmse_lon", "rmse_lat", "rmse_alt", "rmse_3d", "ate", "cte", "v", "eta_error"];

    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "rmse_lon" => self.rmse_lon,
            "rmse_lat" => self.rmse_lat,
            "rmse_alt" => self.rmse_alt,
            "rmse_3d" => self.rmse_3d,
            "ate" => self.ate,
            "cte" => self.cte,
            "v" => self.v,
            "eta_error" => self.eta_error,
            _ => return None,
        })
    }
}

/// Nearest-rank percentile: the value at rank `ceil(p * n)` (1-based) of
/// the sorted sample, `p` in (0, 1].
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p100: f64,
}

impl Summary {
    pub fn median(&self) -> f64 {
        self.p50
    }
}

pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(invalid("cannot summarize zero values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(Summary {
        n: values.len(),
        mean: values.iter().sum::<f64>() / values.len() as f64,
        p25: percentile(&sorted, 0.25),
        p50: percentile(&sorted, 0.5),
        p75: percentile(&sorted, 0.75),
        p100: percentile(&sorted, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: String,
    pub m: f64,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub p100: f64,
}

/// Summary of every metric per (setting, M), in sorted key order.
pub fn summarize(records: &[MetricsRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(invalid("no metrics to summarize"));
    }
    let mut groups: BTreeMap<(String, u64), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.setting.clone(), r.m.to_bits())).or_default().push(r);
    }
    let mut rows = Vec::new();
    for ((setting, m_bits), recs) in groups {
        for metric in MetricsRecord::METRICS {
            let vals: Vec<f64> = recs.iter().map(|r| r.metric(metric).expect("known metric")).collect();
            let s = aggregate(&vals)?;
            rows.push(SummaryRow {
                setting: setting.clone(),
                m: f64::from_bits(m_bits),
                metric: metric.to_string(),
                n: s.n,
                mean: s.mean,
                p25: s.p25,
                p50: s.p50,
                p75: s.p75,
                p100: s.p100,
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
