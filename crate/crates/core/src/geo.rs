//! Trajectory domain types, the positional action space and local metric frames.
//!
//! Positions are geodetic (degrees, degrees, meters). Errors and distances are
//! measured in a local east-north-up tangent plane on a spherical Earth, which
//! is accurate to well under a percent over a few hundred kilometers.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

pub const MIN_ALT_M: f64 = -500.0;
pub const MAX_ALT_M: f64 = 20_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub lon: f64,
    pub lat: f64,
    pub alt: f64,
}

impl GeoPosition {
    /// Builds a validated position.
    pub fn new(lon: f64, lat: f64, alt: f64) -> Result<Self> {
        let p = Self { lon, lat, alt };
        if p.is_valid() {
            Ok(p)
        } else {
            Err(invalid(format!("position ({lon}, {lat}, {alt}) out of range")))
        }
    }

    pub fn is_valid(&self) -> bool {
        (-180.0..=180.0).contains(&self.lon)
            && (-90.0..=90.0).contains(&self.lat)
            && (MIN_ALT_M..=MAX_ALT_M).contains(&self.alt)
    }

    /// The action that moves `self` onto `to`.
    pub fn delta_to(&self, to: &GeoPosition) -> DeltaAction {
        DeltaAction {
            dlon: to.lon - self.lon,
            dlat: to.lat - self.lat,
            dalt: to.alt - self.alt,
        }
    }

    pub fn offset(&self, a: &DeltaAction) -> GeoPosition {
        GeoPosition {
            lon: self.lon + a.dlon,
            lat: self.lat + a.dlat,
            alt: self.alt + a.dalt,
        }
    }
}

/// Numeric features attached to a state, in dataset schema order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A surveillance point: position and integer epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawState {
    pub position: GeoPosition,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedState {
    pub position: GeoPosition,
    pub timestamp: i64,
    pub features: FeatureVector,
}

impl EnrichedState {
    pub fn new(position: GeoPosition, timestamp: i64, features: impl Into<FeatureVector>) -> Self {
        Self {
            position,
            timestamp,
            features: features.into(),
        }
    }
}

impl From<RawState> for EnrichedState {
    fn from(s: RawState) -> Self {
        Self::new(s.position, s.timestamp, Vec::new())
    }
}

/// One flight: an ordered list of enriched states plus its airport pair.
///
/// `arrival` carries the trajectory-level arrival-airport conditions used by
/// the mode classifier; it is filled by enrichment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub states: Vec<EnrichedState>,
    pub origin: GeoPosition,
    pub destination: GeoPosition,
    #[serde(default)]
    pub arrival: Option<FeatureVector>,
}

impl Trajectory {
    /// Builds a trajectory and checks its structural invariants.
    pub fn new(
        id: impl Into<String>,
        states: Vec<EnrichedState>,
        origin: GeoPosition,
        destination: GeoPosition,
    ) -> Result<Self> {
        let t = Self {
            id: id.into(),
            states,
            origin,
            destination,
            arrival: None,
        };
        t.validate()?;
        Ok(t)
    }

    /// Checks: at least two states, strictly increasing timestamps and a
    /// single feature arity.
    pub fn validate(&self) -> Result<()> {
        if self.states.len() < 2 {
            return Err(invalid(format!(
                "trajectory `{}` has {} states, need at least 2",
                self.id,
                self.states.len()
            )));
        }
        let arity = self.states[0].features.len();
        for (i, w) in self.states.windows(2).enumerate() {
            if w[1].timestamp <= w[0].timestamp {
                return Err(invalid(format!(
                    "trajectory `{}`: timestamps not strictly increasing at state {}",
                    self.id,
                    i + 1
                )));
            }
        }
        if let Some(i) = self.states.iter().position(|s| s.features.len() != arity) {
            return Err(invalid(format!(
                "trajectory `{}`: state {i} has {} features, expected {arity}",
                self.id,
                self.states[i].features.len()
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn feature_arity(&self) -> usize {
        self.states.first().map_or(0, |s| s.features.len())
    }

    /// Seconds between the first and last state.
    pub fn duration(&self) -> i64 {
        match (self.states.first(), self.states.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0,
        }
    }

    pub fn positions(&self) -> impl Iterator<Item = &GeoPosition> + '_ {
        self.states.iter().map(|s| &s.position)
    }
}

/// Position increment applied over one fixed time step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DeltaAction {
    pub dlon: f64,
    pub dlat: f64,
    /// meters
    pub dalt: f64,
}

impl DeltaAction {
    pub fn new(dlon: f64, dlat: f64, dalt: f64) -> Self {
        Self { dlon, dlat, dalt }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.dlon, self.dlat, self.dalt]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn inverse(self) -> Self {
        Self::new(-self.dlon, -self.dlat, -self.dalt)
    }

    pub fn is_finite(&self) -> bool {
        self.dlon.is_finite() && self.dlat.is_finite() && self.dalt.is_finite()
    }
}

/// Per-axis limits on a single step, derived from a maximum speed.
///
/// Horizontal limits are converted to degrees at a reference latitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub max_dlon: f64,
    pub max_dlat: f64,
    pub max_dalt: f64,
}

impl ActionBounds {
    pub fn from_speed(v_max: f64, dt: i64, ref_lat: f64) -> Self {
        let reach = v_max * dt as f64;
        let m_per_deg = EARTH_RADIUS_M.to_radians();
        Self {
            max_dlon: reach / (m_per_deg * ref_lat.to_radians().cos()),
            max_dlat: reach / m_per_deg,
            max_dalt: reach,
        }
    }

    pub fn contains(&self, a: &DeltaAction) -> bool {
        a.dlon.abs() <= self.max_dlon && a.dlat.abs() <= self.max_dlat && a.dalt.abs() <= self.max_dalt
    }

    pub fn clamp(&self, a: &DeltaAction) -> DeltaAction {
        DeltaAction::new(
            a.dlon.clamp(-self.max_dlon, self.max_dlon),
            a.dlat.clamp(-self.max_dlat, self.max_dlat),
            a.dalt.clamp(-self.max_dalt, self.max_dalt),
        )
    }
}

/// Local tangent-plane vector in meters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnuVector {
    pub east: f64,
    pub north: f64,
    pub up: f64,
}

impl EnuVector {
    pub fn new(east: f64, north: f64, up: f64) -> Self {
        Self { east, north, up }
    }

    pub fn norm(&self) -> f64 {
        (self.east * self.east + self.north * self.north + self.up * self.up).sqrt()
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.east.hypot(self.north)
    }

    pub fn sub(&self, o: &EnuVector) -> EnuVector {
        EnuVector::new(self.east - o.east, self.north - o.north, self.up - o.up)
    }
}

/// Deterministic transition: componentwise addition, no clamping.
pub fn apply_action(s: &EnrichedState, a: &DeltaAction) -> GeoPosition {
    s.position.offset(a)
}

/// Flight time of a predicted trajectory spanning `steps` time steps.
pub fn eta(steps: usize, dt: i64) -> i64 {
    dt * steps as i64
}

/// Equirectangular east-north-up offset of `p` relative to `reference`.
pub fn to_enu(reference: &GeoPosition, p: &GeoPosition) -> EnuVector {
    let m_per_deg = EARTH_RADIUS_M.to_radians();
    EnuVector {
        east: (p.lon - reference.lon) * reference.lat.to_radians().cos() * m_per_deg,
        north: (p.lat - reference.lat) * m_per_deg,
        up: p.alt - reference.alt,
    }
}

/// Inverse of [`to_enu`].
pub fn from_enu(reference: &GeoPosition, v: &EnuVector) -> GeoPosition {
    let m_per_deg = EARTH_RADIUS_M.to_radians();
    GeoPosition {
        lon: reference.lon + v.east / (reference.lat.to_radians().cos() * m_per_deg),
        lat: reference.lat + v.north / m_per_deg,
        alt: reference.alt + v.up,
    }
}

/// Euclidean distance between `a` and `b` in the tangent plane at `reference`.
pub fn distance_3d(reference: &GeoPosition, a: &GeoPosition, b: &GeoPosition) -> f64 {
    to_enu(reference, a).sub(&to_enu(reference, b)).norm()
}

/// Ground distance between two positions, measured in the frame of `a`.
pub fn horizontal_distance(a: &GeoPosition, b: &GeoPosition) -> f64 {
    to_enu(a, b).horizontal_norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pos(lon: f64, lat: f64, alt: f64) -> GeoPosition {
        GeoPosition::new(lon, lat, alt).unwrap()
    }

    fn haversine(a: &GeoPosition, b: &GeoPosition) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dp = p2 - p1;
        let dl = (b.lon - a.lon).to_radians();
        let h = (dp / 2.0).sin().powi(2) + p1.cos() * p2.cos() * (dl / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_M * h.sqrt().asin()
    }

    #[test]
    fn position_ranges() {
        assert!(GeoPosition::new(181.0, 0.0, 0.0).is_err());
        assert!(GeoPosition::new(0.0, -91.0, 0.0).is_err());
        assert!(GeoPosition::new(0.0, 0.0, 20_001.0).is_err());
        assert!(GeoPosition::new(-180.0, 90.0, -500.0).is_ok());
    }

    #[test]
    fn identity_and_componentwise_actions() {
        let s = EnrichedState::new(pos(2.0, 41.0, 1000.0), 0, vec![]);
        assert_eq!(apply_action(&s, &DeltaAction::default()), s.position);
        let p = apply_action(&s, &DeltaAction::new(-0.01, 0.005, 50.0));
        assert!((p.lon - 1.99).abs() < 1e-12);
        assert!((p.lat - 41.005).abs() < 1e-12);
        assert_eq!(p.alt, 1050.0);
    }

    #[test]
    fn eta_values() {
        assert_eq!(eta(0, 5), 0);
        assert_eq!(eta(1000, 5), 5000);
        assert_eq!(eta(360, 5), 1800);
    }

    #[test]
    fn enu_reference_points() {
        let x = pos(2.3, 40.1, 900.0);
        assert_eq!(to_enu(&x, &x), EnuVector::default());

        let north = to_enu(&pos(0.0, 0.0, 0.0), &pos(0.0, 1.0, 0.0)).north;
        assert!((north - 111_194.9).abs() < 1.0, "{north}");

        let eq = to_enu(&pos(0.0, 0.0, 0.0), &pos(1.0, 0.0, 0.0)).east;
        let at60 = to_enu(&pos(0.0, 60.0, 0.0), &pos(1.0, 60.0, 0.0)).east;
        assert!((at60 / eq - 0.5).abs() < 0.5 * 1e-3);
    }

    #[test]
    fn action_bounds_clamp() {
        let b = ActionBounds::from_speed(350.0, 5, 0.0);
        assert!((b.max_dalt - 1750.0).abs() < 1e-12);
        let a = DeltaAction::new(1.0, -1.0, 5000.0);
        assert!(!b.contains(&a));
        let c = b.clamp(&a);
        assert!(b.contains(&c));
        assert_eq!(c.dalt, 1750.0);
    }

    #[test]
    fn trajectory_validation() {
        let o = pos(0.0, 0.0, 0.0);
        let s = |t| EnrichedState::new(o, t, vec![1.0]);
        assert!(Trajectory::new("a", vec![s(0)], o, o).is_err());
        assert!(Trajectory::new("a", vec![s(0), s(0)], o, o).is_err());
        assert!(Trajectory::new("a", vec![s(0), s(5)], o, o).is_ok());
        let mut bad = vec![s(0), s(5)];
        bad[1].features = FeatureVector(vec![]);
        assert!(Trajectory::new("a", bad, o, o).is_err());
    }

    fn near_pos() -> impl Strategy<Value = GeoPosition> {
        // within roughly 250 km of (0.5, 40.5)
        (-1.5f64..2.5, 38.5f64..42.5, 0.0f64..12_000.0).prop_map(|(lon, lat, alt)| pos(lon, lat, alt))
    }

    proptest! {
        #[test]
        fn inverse_action_restores_position(p in near_pos(), dlon in -0.05f64..0.05, dlat in -0.05f64..0.05, dalt in -300.0f64..300.0) {
            let a = DeltaAction::new(dlon, dlat, dalt);
            let s = EnrichedState::new(p, 0, vec![]);
            let moved = EnrichedState::new(apply_action(&s, &a), 5, vec![]);
            let back = apply_action(&moved, &a.inverse());
            prop_assert!((back.lon - p.lon).abs() < 1e-12);
            prop_assert!((back.lat - p.lat).abs() < 1e-12);
            prop_assert!((back.alt - p.alt).abs() < 1e-9);
            // subtracting positions recovers the action as computed by the addition
            let d = p.delta_to(&moved.position);
            prop_assert_eq!(p.offset(&d), moved.position);
        }

        #[test]
        fn distance_is_a_metric(r in near_pos(), a in near_pos(), b in near_pos(), c in near_pos()) {
            let dab = distance_3d(&r, &a, &b);
            prop_assert!(dab >= 0.0);
            prop_assert_eq!(dab, distance_3d(&r, &b, &a));
            prop_assert_eq!(distance_3d(&r, &a, &a), 0.0);
            let tri = distance_3d(&r, &a, &c) + distance_3d(&r, &c, &b);
            prop_assert!(dab <= tri * (1.0 + 1e-12) + 1e-9);
        }

        #[test]
        fn enu_self_reference_is_zero(r in near_pos()) {
            prop_assert_eq!(to_enu(&r, &r), EnuVector::default());
        }

        #[test]
        fn distance_matches_haversine(a in near_pos(), brg in 0.0f64..360.0, km in 1.0f64..100.0) {
            let d = km * 1000.0;
            let b = pos(
                a.lon + d * brg.to_radians().sin() / (EARTH_RADIUS_M.to_radians() * a.lat.to_radians().cos()),
                a.lat + d * brg.to_radians().cos() / EARTH_RADIUS_M.to_radians(),
                a.alt,
            );
            let mid = pos((a.lon + b.lon) / 2.0, (a.lat + b.lat) / 2.0, a.alt);
            let ours = distance_3d(&mid, &a, &b);
            let hv = haversine(&a, &b);
            prop_assert!((ours - hv).abs() / hv < 0.01, "ours {} haversine {}", ours, hv);
        }
    }
}
