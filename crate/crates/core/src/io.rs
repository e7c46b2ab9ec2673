//! Trajectory and label CSV files.
//!
//! Trajectories are stored one state per row as
//! `traj_id,t,lon,lat,alt,<feature>...`, rows of a flight contiguous and in
//! time order. Numbers keep at least six fractional digits and are written in
//! shortest round-trip form, so reading a file back is exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::geo::{EnrichedState, GeoPosition, Trajectory};

/// Shortest round-trip decimal with at least six fractional digits.
pub fn fmt_f64(x: f64) -> String {
    let mut s = format!("{x}");
    if !x.is_finite() {
        return s;
    }
    let frac = match s.find('.') {
        Some(dot) => s.len() - dot - 1,
        None => {
            s.push('.');
            0
        }
    };
    for _ in frac..6 {
        s.push('0');
    }
    s
}

pub fn write_trajectories(path: &Path, trajs: &[Trajectory], feature_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["traj_id", "t", "lon", "lat", "alt"].iter().map(|s| s.to_string()).collect();
    header.extend(feature_names.iter().cloned());
    w.write_record(&header)?;
    for t in trajs {
        if t.feature_arity() != feature_names.len() {
            return Err(invalid(format!(
                "trajectory `{}` has {} features, header names {}",
                t.id,
                t.feature_arity(),
                feature_names.len()
            )));
        }
        for s in &t.states {
            let mut rec = Vec::with_capacity(header.len());
            rec.push(t.id.clone());
            rec.push(s.timestamp.to_string());
            rec.extend([s.position.lon, s.position.lat, s.position.alt].map(fmt_f64));
            rec.extend(s.features.0.iter().copied().map(fmt_f64));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Trajectories of a file, in order of first appearance, and the feature
/// column names. Airport positions are not part of the format and are
/// supplied by the caller.
pub fn read_trajectories(path: &Path, origin: GeoPosition, destination: GeoPosition) -> Result<(Vec<Trajectory>, Vec<String>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let fixed = ["traj_id", "t", "lon", "lat", "alt"];
    if header.len() < fixed.len() || fixed.iter().zip(header.iter()).any(|(a, b)| *a != b.trim()) {
        return Err(invalid(format!("trajectory header must start with {}", fixed.join(","))));
    }
    let names: Vec<String> = header.iter().skip(fixed.len()).map(|s| s.trim().to_string()).collect();
    let num = |s: &str, what: &str, line: u64| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|e| invalid(format!("line {line}: bad {what} `{s}`: {e}")))
    };
    let mut order: Vec<String> = Vec::new();
    let mut states: BTreeMap<String, Vec<EnrichedState>> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(invalid(format!("line {line}: {} columns, header has {}", rec.len(), header.len())));
        }
        let id = rec[0].trim().to_string();
        let t: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|e| invalid(format!("line {line}: bad timestamp: {e}")))?;
        let p = GeoPosition::new(num(&rec[2], "lon", line)?, num(&rec[3], "lat", line)?, num(&rec[4], "alt", line)?)?;
        let features = (fixed.len()..rec.len())
            .map(|i| num(&rec[i], &header[i], line))
            .collect::<Result<Vec<f64>>>()?;
        if !states.contains_key(&id) {
            order.push(id.clone());
        }
        states.entry(id).or_default().push(EnrichedState::new(p, t, features));
    }
    let trajs = order
        .into_iter()
        .map(|id| {
            let s = states.remove(&id).expect("id recorded");
            Trajectory::new(id, s, origin, destination)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((trajs, names))
}

/// `traj_id,label` rows.
pub fn write_labels(path: &Path, labels: &[(String, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["traj_id", "label"])?;
    for (id, l) in labels {
        w.write_record([id.clone(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<(String, usize)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 2 {
            return Err(invalid(format!("label row has {} columns", rec.len())));
        }
        let l = rec[1].trim().parse().map_err(|e| invalid(format!("bad label `{}`: {e}", &rec[1])))?;
        out.push((rec[0].trim().to_string(), l));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_keeps_six_decimals_and_roundtrips() {
        assert_eq!(fmt_f64(2.5), "2.500000");
        assert_eq!(fmt_f64(-3.0), "-3.000000");
        let x = 0.1 + 0.2;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        assert_eq!(fmt_f64(1.23456789012), "1.23456789012");
    }

    #[test]
    fn trajectories_roundtrip_exactly() {
        let o = GeoPosition::new(1.0, 41.0, 100.0).unwrap();
        let d = GeoPosition::new(0.0, 40.5, 600.0).unwrap();
        let mk = |id: &str, shift: f64| {
            let states = (0..4)
                .map(|i| {
                    let p = GeoPosition::new(1.0 - 0.01 * i as f64 + shift, 41.0 - 0.003 * i as f64, 100.0 + 1.0 / 3.0 * i as f64)
                        .unwrap();
                    EnrichedState::new(p, 1000 + 5 * i, vec![0.1 * i as f64, -7.0])
                })
                .collect();
            Trajectory::new(id, states, o, d).unwrap()
        };
        let trajs = vec![mk("b", 0.0), mk("a", 1e-7)];
        let names = vec!["f1".to_string(), "f2".to_string()];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectories(&path, &trajs, &names).unwrap();
        let (back, n) = read_trajectories(&path, o, d).unwrap();
        assert_eq!(n, names);
        assert_eq!(back, trajs);
    }

    #[test]
    fn wrong_header_or_arity_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "id,t,lon,lat,alt\nx,0,1,2,3\n").unwrap();
        let o = GeoPosition::new(0.0, 0.0, 0.0).unwrap();
        assert!(read_trajectories(&path, o, o).is_err());
        std::fs::write(&path, "traj_id,t,lon,lat,alt,f\nx,0,1,2,3,4\nx,5,1,2,3\n").unwrap();
        assert!(read_trajectories(&path, o, o).is_err());
    }

    #[test]
    fn labels_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.csv");
        let labels = vec![("f1".to_string(), 0), ("f0".to_string(), 1)];
        write_labels(&path, &labels).unwrap();
        assert_eq!(read_labels(&path).unwrap(), labels);
    }
}
