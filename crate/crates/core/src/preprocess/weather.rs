//! Gridded en-route weather and per-airport arrival conditions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geo::FeatureVector;

/// Number of en-route weather features per lattice node.
pub const WEATHER_FEATURES: usize = 6;
/// Number of arrival-airport condition features.
pub const ARRIVAL_FEATURES: usize = 5;

pub const WEATHER_FEATURE_NAMES: [&str; WEATHER_FEATURES] = [
    "pressure_surface",
    "relative_humidity",
    "temperature",
    "wind_gust_surface",
    "wind_u",
    "wind_v",
];

pub const ARRIVAL_FEATURE_NAMES: [&str; ARRIVAL_FEATURES] = [
    "wind_direction",
    "wind_speed_kt",
    "altimeter_inhg",
    "visibility_mi",
    "wind_gust_kt",
];

/// One axis of a regular lattice: `count` nodes starting at `origin`,
/// `step` apart.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub origin: f64,
    pub step: f64,
    pub count: usize,
}

impl Axis {
    pub fn new(origin: f64, step: f64, count: usize) -> Result<Self> {
        if !(step > 0.0 && step.is_finite() && origin.is_finite()) || count == 0 {
            return Err(invalid(format!("bad lattice axis origin={origin} step={step} count={count}")));
        }
        Ok(Self { origin, step, count })
    }

    pub fn last(&self) -> f64 {
        self.origin + self.step * (self.count - 1) as f64
    }

    pub fn node(&self, i: usize) -> f64 {
        self.origin + self.step * i as f64
    }

    /// Nearest node index. Exact half-way points go to the lower index.
    /// Values more than half a step beyond either end are a miss.
    pub fn nearest(&self, x: f64) -> Option<usize> {
        let f = (x - self.origin) / self.step;
        if !f.is_finite() || f < -0.5 || f > (self.count - 1) as f64 + 0.5 {
            return None;
        }
        let lower = f.floor();
        let idx = if f - lower > 0.5 { lower + 1.0 } else { lower };
        Some((idx.max(0.0) as usize).min(self.count - 1))
    }
}

/// Regular 4D lattice (lon, lat, alt, time) of weather feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeatherGrid {
    pub lon: Axis,
    pub lat: Axis,
    pub alt: Axis,
    pub time: Axis,
    /// Flattened `[lon][lat][alt][t][feature]`.
    values: Vec<f64>,
}

impl WeatherGrid {
    pub fn new(lon: Axis, lat: Axis, alt: Axis, time: Axis, values: Vec<f64>) -> Result<Self> {
        let n = lon.count * lat.count * alt.count * time.count * WEATHER_FEATURES;
        if values.len() != n {
            return Err(Error::Shape {
                context: "weather grid values",
                expected: n,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("weather grid"));
        }
        Ok(Self { lon, lat, alt, time, values })
    }

    /// Fills every node with `f(lon, lat, alt, t)`.
    pub fn from_fn(
        lon: Axis,
        lat: Axis,
        alt: Axis,
        time: Axis,
        mut f: impl FnMut(f64, f64, f64, f64) -> [f64; WEATHER_FEATURES],
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(lon.count * lat.count * alt.count * time.count * WEATHER_FEATURES);
        for i in 0..lon.count {
            for j in 0..lat.count {
                for k in 0..alt.count {
                    for l in 0..time.count {
                        values.extend_from_slice(&f(lon.node(i), lat.node(j), alt.node(k), time.node(l)));
                    }
                }
            }
        }
        Self::new(lon, lat, alt, time, values)
    }

    fn offset(&self, idx: [usize; 4]) -> usize {
        (((idx[0] * self.lat.count + idx[1]) * self.alt.count + idx[2]) * self.time.count + idx[3]) * WEATHER_FEATURES
    }

    pub fn node_features(&self, idx: [usize; 4]) -> &[f64] {
        let o = self.offset(idx);
        &self.values[o..o + WEATHER_FEATURES]
    }

    /// Nearest lattice node for a 4D point, or `None` if outside the lattice.
    pub fn nearest_node(&self, lon: f64, lat: f64, alt: f64, t: f64) -> Option<[usize; 4]> {
        Some([
            self.lon.nearest(lon)?,
            self.lat.nearest(lat)?,
            self.alt.nearest(alt)?,
            self.time.nearest(t)?,
        ])
    }

    pub fn lookup(&self, lon: f64, lat: f64, alt: f64, t: f64) -> Option<FeatureVector> {
        self.nearest_node(lon, lat, alt, t)
            .map(|idx| FeatureVector(self.node_features(idx).to_vec()))
    }

    pub fn node_count(&self) -> usize {
        self.lon.count * self.lat.count * self.alt.count * self.time.count
    }

    /// Writes the node CSV and its geometry sidecar (`<csv>.meta`).
    pub fn write(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(csv_path)?;
        let mut header = vec!["lon_idx".to_string(), "lat_idx".into(), "alt_idx".into(), "t_idx".into()];
        header.extend((1..=WEATHER_FEATURES).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for i in 0..self.lon.count {
            for j in 0..self.lat.count {
                for k in 0..self.alt.count {
                    for l in 0..self.time.count {
                        let mut rec = vec![i.to_string(), j.to_string(), k.to_string(), l.to_string()];
                        rec.extend(self.node_features([i, j, k, l]).iter().map(|v| format!("{v:.6}")));
                        w.write_record(&rec)?;
                    }
                }
            }
        }
        w.flush()?;
        fs::write(meta_path(csv_path), self.meta_text())?;
        Ok(())
    }

    fn meta_text(&self) -> String {
        let mut s = String::from("# weather lattice geometry\nversion = 1\n");
        for (name, a) in [("lon", &self.lon), ("lat", &self.lat), ("alt", &self.alt), ("t", &self.time)] {
            let _ = writeln!(s, "{name}_origin = {}", a.origin);
            let _ = writeln!(s, "{name}_step = {}", a.step);
            let _ = writeln!(s, "{name}_count = {}", a.count);
        }
        let _ = writeln!(s, "features = {}", WEATHER_FEATURE_NAMES.join(","));
        s
    }

    pub fn read(csv_path: &Path) -> Result<Self> {
        let meta = crate::config::KeyValues::parse(&fs::read_to_string(meta_path(csv_path))?)?;
        let axis = |name: &str| -> Result<Axis> {
            Axis::new(
                meta.get_parsed(&format!("{name}_origin"))?,
                meta.get_parsed(&format!("{name}_step"))?,
                meta.get_parsed(&format!("{name}_count"))?,
            )
        };
        let (lon, lat, alt, time) = (axis("lon")?, axis("lat")?, axis("alt")?, axis("t")?);
        let n = lon.count * lat.count * alt.count * time.count;
        let mut values = vec![f64::NAN; n * WEATHER_FEATURES];
        let mut seen = vec![false; n];
        let mut r = csv::Reader::from_path(csv_path)?;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 4 + WEATHER_FEATURES {
                return Err(invalid(format!("weather row has {} columns", rec.len())));
            }
            let idx: Vec<usize> = (0..4)
                .map(|c| rec[c].trim().parse::<usize>().map_err(|e| invalid(format!("bad index: {e}"))))
                .collect::<Result<_>>()?;
            if idx[0] >= lon.count || idx[1] >= lat.count || idx[2] >= alt.count || idx[3] >= time.count {
                return Err(invalid(format!("weather node index {idx:?} outside lattice")));
            }
            let node = ((idx[0] * lat.count + idx[1]) * alt.count + idx[2]) * time.count + idx[3];
            seen[node] = true;
            for f in 0..WEATHER_FEATURES {
                values[node * WEATHER_FEATURES + f] = rec[4 + f]
                    .trim()
                    .parse()
                    .map_err(|e| invalid(format!("bad weather value: {e}")))?;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(invalid(format!("weather lattice node {missing} missing from file")));
        }
        Self::new(lon, lat, alt, time, values)
    }
}

fn meta_path(csv_path: &Path) -> std::path::PathBuf {
    let mut s = csv_path.as_os_str().to_owned();
    s.push(".meta");
    s.into()
}

/// Arrival-airport conditions keyed by airport and time bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrivalConditionsTable {
    pub bucket_seconds: i64,
    entries: BTreeMap<(String, i64), [f64; ARRIVAL_FEATURES]>,
}

impl ArrivalConditionsTable {
    pub fn new(bucket_seconds: i64) -> Result<Self> {
        if bucket_seconds <= 0 {
            return Err(invalid("arrival bucket size must be positive"));
        }
        Ok(Self {
            bucket_seconds,
            entries: BTreeMap::new(),
        })
    }

    pub fn bucket_of(&self, t: i64) -> i64 {
        t.div_euclid(self.bucket_seconds)
    }

    pub fn insert(&mut self, airport: &str, bucket: i64, values: [f64; ARRIVAL_FEATURES]) -> Result<()> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("arrival conditions"));
        }
        self.entries.insert((airport.to_string(), bucket), values);
        Ok(())
    }

    pub fn lookup(&self, airport: &str, t: i64) -> Option<FeatureVector> {
        self.entries
            .get(&(airport.to_string(), self.bucket_of(t)))
            .map(|v| FeatureVector(v.to_vec()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["airport".to_string(), "t_bucket".into()];
        header.extend((1..=ARRIVAL_FEATURES).map(|i| format!("m{i}")));
        w.write_record(&header)?;
        for ((ap, b), v) in &self.entries {
            let mut rec = vec![ap.clone(), b.to_string()];
            rec.extend(v.iter().map(|x| format!("{x:.6}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path, bucket_seconds: i64) -> Result<Self> {
        let mut table = Self::new(bucket_seconds)?;
        let mut r = csv::Reader::from_path(path)?;
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 2 + ARRIVAL_FEATURES {
                return Err(invalid(format!("arrival row has {} columns", rec.len())));
            }
            let bucket: i64 = rec[1].trim().parse().map_err(|e| invalid(format!("bad bucket: {e}")))?;
            let mut v = [0.0; ARRIVAL_FEATURES];
            for (i, x) in v.iter_mut().enumerate() {
                *x = rec[2 + i].trim().parse().map_err(|e| invalid(format!("bad arrival value: {e}")))?;
            }
            table.insert(rec[0].trim(), bucket, v)?;
        }
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> WeatherGrid {
        WeatherGrid::from_fn(
            Axis::new(0.0, 1.0, 3).unwrap(),
            Axis::new(40.0, 0.5, 2).unwrap(),
            Axis::new(0.0, 1000.0, 2).unwrap(),
            Axis::new(0.0, 3600.0, 2).unwrap(),
            |lon, lat, alt, t| [lon, lat, alt, t, lon + lat, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn exact_node_lookup() {
        let g = grid();
        let f = g.lookup(1.0, 40.5, 1000.0, 3600.0).unwrap();
        assert_eq!(f.0, vec![1.0, 40.5, 1000.0, 3600.0, 41.5, 1.0]);
    }

    #[test]
    fn halfway_goes_to_lower_index() {
        let g = grid();
        let f = g.lookup(0.5, 40.25, 500.0, 1800.0).unwrap();
        assert_eq!(&f.0[..4], &[0.0, 40.0, 0.0, 0.0]);
        let f = g.lookup(0.5000001, 40.0, 0.0, 0.0).unwrap();
        assert_eq!(f.0[0], 1.0);
    }

    #[test]
    fn outside_lattice_is_a_miss() {
        let g = grid();
        assert!(g.lookup(2.6, 40.0, 0.0, 0.0).is_none());
        assert!(g.lookup(-0.6, 40.0, 0.0, 0.0).is_none());
        assert!(g.lookup(2.4, 40.0, 0.0, 0.0).is_some());
    }

    #[test]
    fn grid_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("grid.csv");
        let g = grid();
        g.write(&p).unwrap();
        assert_eq!(WeatherGrid::read(&p).unwrap(), g);
    }

    #[test]
    fn arrival_table_buckets() {
        let mut t = ArrivalConditionsTable::new(3600).unwrap();
        t.insert("DST", 2, [1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!(t.lookup("DST", 7200).is_some());
        assert!(t.lookup("DST", 10_799).is_some());
        assert!(t.lookup("DST", 10_800).is_none());
        assert!(t.lookup("XXX", 7200).is_none());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("arr.csv");
        t.write(&p).unwrap();
        assert_eq!(ArrivalConditionsTable::read(&p, 3600).unwrap(), t);
    }
}
