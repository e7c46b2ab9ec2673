//! Resampling, cleaning, weather enrichment and action extraction.

mod normalize;
mod weather;

pub use normalize::{MinMaxScaler, Standardizer};
pub use weather::{
    ArrivalConditionsTable, Axis, WeatherGrid, ARRIVAL_FEATURES, ARRIVAL_FEATURE_NAMES, WEATHER_FEATURES,
    WEATHER_FEATURE_NAMES,
};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geo::{horizontal_distance, DeltaAction, EnrichedState, FeatureVector, GeoPosition, Trajectory};

/// Default resampling period in seconds.
pub const DEFAULT_DT: i64 = 5;

/// Thresholds for [`clean`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanConfig {
    /// Maximum ground distance (m) between an endpoint and its airport.
    pub r_near: f64,
    /// Maximum plausible ground speed (m/s).
    pub v_max: f64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self {
            r_near: 10_000.0,
            v_max: 350.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    IncompleteStart,
    IncompleteEnd,
    SpeedViolation,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::IncompleteStart => "incomplete_start",
            RejectReason::IncompleteEnd => "incomplete_end",
            RejectReason::SpeedViolation => "speed_violation",
        }
    }
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone, Default)]
pub struct CleanReport {
    pub kept: Vec<Trajectory>,
    pub rejected: Vec<(String, RejectReason)>,
}

/// Resamples to states exactly `dt` seconds apart, starting at the first
/// timestamp, assuming constant velocity (and linearly varying features)
/// between consecutive raw points.
pub fn resample(raw: &Trajectory, dt: i64) -> Result<Trajectory> {
    if dt <= 0 {
        return Err(invalid(format!("resampling period must be positive, got {dt}")));
    }
    raw.validate()?;
    let states = &raw.states;
    let t0 = states[0].timestamp;
    let t_end = states[states.len() - 1].timestamp;
    let mut out = Vec::with_capacity(((t_end - t0) / dt + 1) as usize);
    let mut seg = 0;
    let mut t = t0;
    while t <= t_end {
        while seg + 1 < states.len() && states[seg + 1].timestamp <= t {
            seg += 1;
        }
        let a = &states[seg];
        if a.timestamp == t || seg + 1 == states.len() {
            out.push(EnrichedState::new(a.position, t, a.features.clone()));
        } else {
            let b = &states[seg + 1];
            let frac = (t - a.timestamp) as f64 / (b.timestamp - a.timestamp) as f64;
            let lerp = |x: f64, y: f64| x + frac * (y - x);
            let position = GeoPosition {
                lon: lerp(a.position.lon, b.position.lon),
                lat: lerp(a.position.lat, b.position.lat),
                alt: lerp(a.position.alt, b.position.alt),
            };
            let features: Vec<f64> = a.features.0.iter().zip(&b.features.0).map(|(x, y)| lerp(*x, *y)).collect();
            out.push(EnrichedState::new(position, t, features));
        }
        t += dt;
    }
    if out.len() < 2 {
        return Err(invalid(format!(
            "trajectory `{}` spans {}s, shorter than one {dt}s step",
            raw.id,
            t_end - t0
        )));
    }
    Ok(Trajectory {
        id: raw.id.clone(),
        states: out,
        origin: raw.origin,
        destination: raw.destination,
        arrival: raw.arrival.clone(),
    })
}

/// Why `traj` would be rejected, if at all. Checks are applied in the order
/// start, end, speed.
pub fn rejection_reason(traj: &Trajectory, origin: &GeoPosition, dest: &GeoPosition, cfg: &CleanConfig) -> Option<RejectReason> {
    let (first, last) = (traj.states.first()?, traj.states.last()?);
    if horizontal_distance(origin, &first.position) > cfg.r_near {
        return Some(RejectReason::IncompleteStart);
    }
    if horizontal_distance(dest, &last.position) > cfg.r_near {
        return Some(RejectReason::IncompleteEnd);
    }
    let too_fast = traj.states.windows(2).any(|w| {
        let secs = (w[1].timestamp - w[0].timestamp) as f64;
        horizontal_distance(&w[0].position, &w[1].position) > cfg.v_max * secs
    });
    too_fast.then_some(RejectReason::SpeedViolation)
}

/// Splits `set` into kept flights and rejections. Each decision depends only
/// on the flight itself; kept flights stay in input order.
pub fn clean(set: &[Trajectory], origin: &GeoPosition, dest: &GeoPosition, cfg: &CleanConfig) -> CleanReport {
    let mut report = CleanReport::default();
    for t in set {
        match rejection_reason(t, origin, dest, cfg) {
            None => report.kept.push(t.clone()),
            Some(r) => report.rejected.push((t.id.clone(), r)),
        }
    }
    report
}

/// Replaces each state's features with the nearest-node weather vector and
/// attaches the arrival conditions at `airport` at the actual arrival time.
pub fn enrich(
    traj: &Trajectory,
    grid: &WeatherGrid,
    arrivals: &ArrivalConditionsTable,
    airport: &str,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(traj.states.len());
    for (index, s) in traj.states.iter().enumerate() {
        let p = &s.position;
        let features = grid
            .lookup(p.lon, p.lat, p.alt, s.timestamp as f64)
            .ok_or(Error::OutOfGrid { index })?;
        states.push(EnrichedState::new(s.position, s.timestamp, features));
    }
    let arrival_t = traj.states.last().map_or(0, |s| s.timestamp);
    let arrival = arrivals.lookup(airport, arrival_t).ok_or_else(|| {
        invalid(format!(
            "no arrival conditions for `{airport}` at t={arrival_t} (trajectory `{}`)",
            traj.id
        ))
    })?;
    Ok(Trajectory {
        id: traj.id.clone(),
        states,
        origin: traj.origin,
        destination: traj.destination,
        arrival: Some(arrival),
    })
}

/// Demonstrated (state, action) pairs: action `i` moves state `i` onto
/// state `i + 1`.
pub fn derive_actions(traj: &Trajectory) -> Vec<(EnrichedState, DeltaAction)> {
    traj.states
        .windows(2)
        .map(|w| (w[0].clone(), w[0].position.delta_to(&w[1].position)))
        .collect()
}

/// Arrival features of a trajectory, or an error naming it.
pub fn arrival_features(traj: &Trajectory) -> Result<&FeatureVector> {
    traj.arrival
        .as_ref()
        .ok_or_else(|| invalid(format!("trajectory `{}` has no arrival conditions", traj.id)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{apply_action, to_enu};
    use proptest::prelude::*;

    fn p(lon: f64, lat: f64, alt: f64) -> GeoPosition {
        GeoPosition::new(lon, lat, alt).unwrap()
    }

    fn traj(points: &[(i64, f64, f64, f64)]) -> Trajectory {
        let states = points
            .iter()
            .map(|&(t, lon, lat, alt)| EnrichedState::new(p(lon, lat, alt), t, vec![alt / 10.0]))
            .collect();
        let o = p(points[0].1, points[0].2, 0.0);
        let last = points[points.len() - 1];
        Trajectory::new("t", states, o, p(last.1, last.2, 0.0)).unwrap()
    }

    #[test]
    fn resample_midpoint() {
        let t = traj(&[(0, 0.0, 40.0, 0.0), (10, 0.02, 40.01, 1000.0)]);
        let r = resample(&t, 5).unwrap();
        assert_eq!(r.len(), 3);
        let m = &r.states[1];
        assert_eq!(m.timestamp, 5);
        assert!((m.position.lon - 0.01).abs() < 1e-15);
        assert!((m.position.lat - 40.005).abs() < 1e-12);
        assert_eq!(m.position.alt, 500.0);
        assert_eq!(m.features.0, vec![50.0]);
        assert_eq!(r.states[2], t.states[1]);
    }

    #[test]
    fn resample_is_identity_on_exact_spacing() {
        let t = traj(&[(100, 0.0, 40.0, 0.0), (105, 0.01, 40.0, 10.0), (110, 0.02, 40.0, 30.0)]);
        assert_eq!(resample(&t, 5).unwrap(), t);
    }

    #[test]
    fn resample_rejects_bad_input() {
        let mut t = traj(&[(0, 0.0, 40.0, 0.0), (10, 0.0, 40.0, 0.0)]);
        assert!(resample(&t, 0).is_err());
        t.states[1].timestamp = 0;
        assert!(resample(&t, 5).is_err());
        t.states.truncate(1);
        assert!(resample(&t, 5).is_err());
    }

    proptest! {
        #[test]
        fn resample_spacing_is_exact(
            gaps in prop::collection::vec(1i64..40, 1..30),
            dt in 1i64..12,
        ) {
            let mut t = 1_000;
            let mut pts = vec![(t, 0.0, 40.0, 0.0)];
            for (i, g) in gaps.iter().enumerate() {
                t += g;
                pts.push((t, 0.001 * i as f64, 40.0 + 0.0005 * i as f64, 10.0 * i as f64));
            }
            if let Ok(r) = resample(&traj(&pts), dt) {
                for w in r.states.windows(2) {
                    prop_assert_eq!(w[1].timestamp - w[0].timestamp, dt);
                }
                prop_assert_eq!(r.states[0].timestamp, 1_000);
            } else {
                prop_assert!(t - 1_000 < dt);
            }
        }
    }

    /// Straight eastbound flight at 200 m/s between two airports.
    fn compliant(id: &str, origin: GeoPosition, dest: GeoPosition) -> Trajectory {
        let n = 60;
        let states = (0..=n)
            .map(|i| {
                let f = i as f64 / n as f64;
                EnrichedState::new(p(origin.lon + f * (dest.lon - origin.lon), origin.lat, 1000.0), 5 * i, vec![])
            })
            .collect();
        Trajectory::new(id, states, origin, dest).unwrap()
    }

    #[test]
    fn clean_reasons() {
        let origin = p(0.0, 40.0, 0.0);
        let dest = p(0.7, 40.0, 0.0);
        // 0.7 deg at 40N is ~59.6 km over 300 s: ~199 m/s
        let ok = compliant("ok", origin, dest);
        assert_eq!(rejection_reason(&ok, &origin, &dest, &CleanConfig::default()), None);

        let mut short = ok.clone();
        short.id = "short".into();
        let fifty_km_deg = 50_000.0 / (crate::geo::EARTH_RADIUS_M.to_radians() * 40f64.to_radians().cos());
        short.states.retain(|s| s.position.lon <= dest.lon - fifty_km_deg + 1e-9);
        let end_gap = crate::geo::horizontal_distance(&dest, &short.states.last().unwrap().position);
        assert!(end_gap > 49_000.0 && end_gap < 51_000.0, "{end_gap}");

        let mut jump = ok.clone();
        jump.id = "jump".into();
        // 20 km in one 5 s step
        let twenty_km = 20_000.0 / (crate::geo::EARTH_RADIUS_M.to_radians());
        for s in jump.states.iter_mut().skip(30) {
            s.position.lat += twenty_km;
        }
        for s in jump.states.iter_mut().skip(31) {
            s.position.lat -= twenty_km;
        }
        let mut late = ok.clone();
        late.id = "late".into();
        for s in late.states.iter_mut() {
            s.position.lat += 0.2;
        }

        let set = vec![ok.clone(), short, jump, late];
        let report = clean(&set, &origin, &dest, &CleanConfig::default());
        assert_eq!(report.kept.len(), 1);
        assert_eq!(report.kept[0].id, "ok");
        assert_eq!(
            report.rejected,
            vec![
                ("short".to_string(), RejectReason::IncompleteEnd),
                ("jump".to_string(), RejectReason::SpeedViolation),
                ("late".to_string(), RejectReason::IncompleteStart),
            ]
        );

        // decisions do not depend on the order of the set
        let mut rev = set.clone();
        rev.reverse();
        let r2 = clean(&rev, &origin, &dest, &CleanConfig::default());
        let mut a: Vec<_> = report.rejected.clone();
        let mut b: Vec<_> = r2.rejected.clone();
        a.sort_by(|x, y| x.0.cmp(&y.0));
        b.sort_by(|x, y| x.0.cmp(&y.0));
        assert_eq!(a, b);
        assert_eq!(RejectReason::SpeedViolation.to_string(), "speed_violation");
    }

    fn small_grid() -> WeatherGrid {
        WeatherGrid::from_fn(
            Axis::new(0.0, 0.5, 3).unwrap(),
            Axis::new(40.0, 0.5, 3).unwrap(),
            Axis::new(0.0, 1000.0, 3).unwrap(),
            Axis::new(0.0, 600.0, 3).unwrap(),
            |lon, lat, alt, t| [lon, lat, alt, t, 0.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn enrich_attaches_eleven_features() {
        let g = small_grid();
        let mut arr = ArrivalConditionsTable::new(3600).unwrap();
        arr.insert("DST", 0, [1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let t = traj(&[(0, 0.5, 40.5, 1000.0), (10, 0.25, 40.5, 1000.0)]);
        let e = enrich(&t, &g, &arr, "DST").unwrap();
        assert_eq!(e.states[0].features.0, vec![0.5, 40.5, 1000.0, 0.0, 0.0, 1.0]);
        // halfway between lon nodes 0.0 and 0.5 -> lower node
        assert_eq!(e.states[1].features.0[0], 0.0);
        let total = e.feature_arity() + e.arrival.as_ref().unwrap().len();
        assert_eq!(total, 11);

        let far = traj(&[(0, 0.5, 40.5, 1000.0), (10, 3.0, 40.5, 1000.0)]);
        assert!(matches!(enrich(&far, &g, &arr, "DST"), Err(Error::OutOfGrid { index: 1 })));
        assert!(enrich(&t, &g, &arr, "NOPE").is_err());
    }

    #[test]
    fn actions_reconstruct_positions() {
        let stationary = traj(&[(0, 1.0, 40.0, 100.0), (5, 1.0, 40.0, 100.0)]);
        assert_eq!(derive_actions(&stationary)[0].1, DeltaAction::default());

        let line = traj(&[(0, 0.0, 40.0, 0.0), (5, 0.25, 40.0, 500.0), (10, 0.5, 40.0, 1000.0)]);
        let acts = derive_actions(&line);
        assert_eq!(acts.len(), 2);
        assert_eq!(acts[0].1, acts[1].1);
    }

    proptest! {
        #[test]
        fn action_fold_reconstructs_exactly(
            steps in prop::collection::vec((-0.01f64..0.01, -0.01f64..0.01, -50.0f64..50.0), 1..40)
        ) {
            let mut pts = vec![(0i64, 0.5, 40.5, 3000.0)];
            for (i, (a, b, c)) in steps.iter().enumerate() {
                let last = pts[pts.len() - 1];
                pts.push((5 * (i as i64 + 1), last.1 + a, last.2 + b, last.3 + c));
            }
            let t = traj(&pts);
            let acts = derive_actions(&t);
            prop_assert_eq!(acts.len(), t.len() - 1);
            let mut s = t.states[0].clone();
            for (i, (_, a)) in acts.iter().enumerate() {
                let next = apply_action(&s, a);
                let d = to_enu(&t.states[i + 1].position, &next);
                prop_assert!(d.norm() < 1e-6);
                s = EnrichedState::new(next, s.timestamp + 5, vec![]);
            }
        }
    }
}
