//! Seeded synthetic scenarios: multi-mode flight corpora between two
//! airports, a smooth weather field and arrival conditions that depend on
//! the mode.
//!
//! Each mode is a lateral arc (offset to the left of the direct course,
//! blended in and out with a cubic) combined with a climb-cruise-descent
//! profile. Flights jitter the offset, cruise altitude and speed and add
//! per-point position noise, then are resampled to `dt`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::env::BoundingBox;
use crate::error::{invalid, Error, Result};
use crate::geo::{from_enu, to_enu, EnrichedState, EnuVector, GeoPosition, Trajectory, MAX_ALT_M, MIN_ALT_M};
use crate::io;
use crate::preprocess::{resample, ArrivalConditionsTable, Axis, WeatherGrid, ARRIVAL_FEATURES, WEATHER_FEATURES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeSpec {
    /// Peak lateral displacement in meters, positive to the left of the
    /// origin-to-destination course.
    pub lateral_offset: f64,
    pub cruise_alt: f64,
    pub prior: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    /// Per-flight standard deviation of the arc offset (m).
    pub lateral: f64,
    /// Per-flight standard deviation of the cruise altitude (m).
    pub altitude: f64,
    /// Per-flight standard deviation of the ground speed (m/s).
    pub speed: f64,
    /// Per-point position noise (m), applied before resampling.
    pub position: f64,
}

impl NoiseScales {
    pub fn zero() -> Self {
        Self {
            lateral: 0.0,
            altitude: 0.0,
            speed: 0.0,
            position: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub n_trajectories: usize,
    pub origin: GeoPosition,
    pub dest: GeoPosition,
    pub dest_airport: String,
    pub modes: Vec<ModeSpec>,
    /// Where along the route (0..1) the arc peaks.
    pub apex_fraction: f64,
    /// Fraction of the route spent climbing, and again descending.
    pub climb_fraction: f64,
    /// Nominal ground speed (m/s).
    pub speed: f64,
    pub noise: NoiseScales,
    pub dt: i64,
    /// Spacing of the raw points before resampling.
    pub raw_dt: i64,
    pub bbox: BoundingBox,
    /// Start of the first departure bucket (epoch seconds).
    pub t0: i64,
    /// Flight `i` departs at `t0 + i * bucket_seconds + U(0, departure_window)`.
    pub departure_window: i64,
    pub bucket_seconds: i64,
    /// Distance between neighbouring modes' arrival-condition means, in
    /// standard deviations of each feature. 0 makes the conditions
    /// uninformative.
    pub arrival_separation: f64,
    pub grid_step_deg: f64,
    pub grid_alt_step: f64,
    pub grid_time_step: f64,
    /// Time covered by the weather grid after the last departure.
    pub grid_time_margin: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            n_trajectories: 100,
            origin: GeoPosition {
                lon: 1.2,
                lat: 41.1,
                alt: 100.0,
            },
            dest: GeoPosition {
                lon: 0.0,
                lat: 40.5,
                alt: 600.0,
            },
            dest_airport: "DEST".into(),
            modes: vec![
                ModeSpec {
                    lateral_offset: 15_000.0,
                    cruise_alt: 7_000.0,
                    prior: 0.5,
                },
                ModeSpec {
                    lateral_offset: -15_000.0,
                    cruise_alt: 5_000.0,
                    prior: 0.5,
                },
            ],
            apex_fraction: 0.5,
            climb_fraction: 0.3,
            speed: 200.0,
            noise: NoiseScales {
                lateral: 1_500.0,
                altitude: 150.0,
                speed: 5.0,
                position: 20.0,
            },
            dt: 5,
            raw_dt: 4,
            bbox: BoundingBox {
                lon_min: -0.5,
                lat_min: 40.0,
                lon_max: 1.7,
                lat_max: 41.6,
            },
            t0: 1_609_459_200,
            departure_window: 1_800,
            bucket_seconds: 3_600,
            arrival_separation: 2.5,
            grid_step_deg: 0.5,
            grid_alt_step: 1_000.0,
            grid_time_step: 3_600.0,
            grid_time_margin: 10_800.0,
        }
    }
}

fn parse_triple(kv: &KeyValues, key: &str) -> Result<Option<[f64; 3]>> {
    match kv.get_list::<f64>(key)? {
        None => Ok(None),
        Some(v) if v.len() == 3 => Ok(Some([v[0], v[1], v[2]])),
        Some(_) => Err(Error::Config(format!("key `{key}`: expected lon,lat,alt"))),
    }
}

fn parse_modes(raw: &str) -> Result<Vec<ModeSpec>> {
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|m| {
            let f: Vec<f64> = m
                .split(':')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("mode `{m}`: {e}")))?;
            match f[..] {
                [lateral_offset, cruise_alt, prior] => Ok(ModeSpec {
                    lateral_offset,
                    cruise_alt,
                    prior,
                }),
                _ => Err(Error::Config(format!("mode `{m}`: expected offset:cruise_alt:prior"))),
            }
        })
        .collect()
}

impl ScenarioSpec {
    /// Reads keys `<prefix><name>`; absent keys keep their defaults.
    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let d = Self::default();
        let k = |name: &str| format!("{prefix}{name}");
        let pos = |name: &str, def: GeoPosition| -> Result<GeoPosition> {
            Ok(match parse_triple(kv, &k(name))? {
                Some([lon, lat, alt]) => GeoPosition::new(lon, lat, alt).map_err(|e| Error::Config(e.to_string()))?,
                None => def,
            })
        };
        let bbox = match kv.get_list::<f64>(&k("bbox"))? {
            None => d.bbox,
            Some(v) if v.len() == 4 => {
                BoundingBox::from_corners((v[0], v[1]), (v[2], v[3])).map_err(|e| Error::Config(e.to_string()))?
            }
            Some(_) => return Err(Error::Config("key `bbox`: expected lon_min,lat_min,lon_max,lat_max".into())),
        };
        let modes = match kv.get(&k("modes")) {
            Some(raw) => parse_modes(raw)?,
            None => d.modes.clone(),
        };
        let spec = Self {
            seed: kv.get_or(&k("seed"), d.seed)?,
            n_trajectories: kv.get_or(&k("n_trajectories"), d.n_trajectories)?,
            origin: pos("origin", d.origin)?,
            dest: pos("dest", d.dest)?,
            dest_airport: kv.get_or(&k("dest_airport"), d.dest_airport.clone())?,
            modes,
            apex_fraction: kv.get_or(&k("apex_fraction"), d.apex_fraction)?,
            climb_fraction: kv.get_or(&k("climb_fraction"), d.climb_fraction)?,
            speed: kv.get_or(&k("speed"), d.speed)?,
            noise: NoiseScales {
                lateral: kv.get_or(&k("noise_lateral"), d.noise.lateral)?,
                altitude: kv.get_or(&k("noise_altitude"), d.noise.altitude)?,
                speed: kv.get_or(&k("noise_speed"), d.noise.speed)?,
                position: kv.get_or(&k("noise_position"), d.noise.position)?,
            },
            dt: kv.get_or(&k("dt"), d.dt)?,
            raw_dt: kv.get_or(&k("raw_dt"), d.raw_dt)?,
            bbox,
            t0: kv.get_or(&k("t0"), d.t0)?,
            departure_window: kv.get_or(&k("departure_window"), d.departure_window)?,
            bucket_seconds: kv.get_or(&k("bucket_seconds"), d.bucket_seconds)?,
            arrival_separation: kv.get_or(&k("arrival_separation"), d.arrival_separation)?,
            grid_step_deg: kv.get_or(&k("grid_step_deg"), d.grid_step_deg)?,
            grid_alt_step: kv.get_or(&k("grid_alt_step"), d.grid_alt_step)?,
            grid_time_step: kv.get_or(&k("grid_time_step"), d.grid_time_step)?,
            grid_time_margin: kv.get_or(&k("grid_time_margin"), d.grid_time_margin)?,
        };
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }

    /// Every field as `<prefix><name>` keys.
    pub fn write_kv(&self, kv: &mut KeyValues, prefix: &str) {
        let p = |g: &GeoPosition| format!("{},{},{}", g.lon, g.lat, g.alt);
        let modes: Vec<String> = self
            .modes
            .iter()
            .map(|m| format!("{}:{}:{}", m.lateral_offset, m.cruise_alt, m.prior))
            .collect();
        let b = &self.bbox;
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("n_trajectories", self.n_trajectories.to_string()),
            ("origin", p(&self.origin)),
            ("dest", p(&self.dest)),
            ("dest_airport", self.dest_airport.clone()),
            ("modes", modes.join(",")),
            ("apex_fraction", self.apex_fraction.to_string()),
            ("climb_fraction", self.climb_fraction.to_string()),
            ("speed", self.speed.to_string()),
            ("noise_lateral", self.noise.lateral.to_string()),
            ("noise_altitude", self.noise.altitude.to_string()),
            ("noise_speed", self.noise.speed.to_string()),
            ("noise_position", self.noise.position.to_string()),
            ("dt", self.dt.to_string()),
            ("raw_dt", self.raw_dt.to_string()),
            ("bbox", format!("{},{},{},{}", b.lon_min, b.lat_min, b.lon_max, b.lat_max)),
            ("t0", self.t0.to_string()),
            ("departure_window", self.departure_window.to_string()),
            ("bucket_seconds", self.bucket_seconds.to_string()),
            ("arrival_separation", self.arrival_separation.to_string()),
            ("grid_step_deg", self.grid_step_deg.to_string()),
            ("grid_alt_step", self.grid_alt_step.to_string()),
            ("grid_time_step", self.grid_time_step.to_string()),
            ("grid_time_margin", self.grid_time_margin.to_string()),
        ];
        for (k, v) in entries {
            kv.set(&format!("{prefix}{k}"), v);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(invalid("scenario needs at least one mode"));
        }
        let total: f64 = self.modes.iter().map(|m| m.prior).sum();
        if self.modes.iter().any(|m| !(m.prior > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("mode priors must be positive and sum to 1, got {total}")));
        }
        if let Some(c) = self.mode_counts().iter().position(|&c| c < 2) {
            return Err(invalid(format!(
                "mode {c} gets fewer than 2 of {} trajectories",
                self.n_trajectories
            )));
        }
        if !(0.0 < self.apex_fraction && self.apex_fraction < 1.0) {
            return Err(invalid("apex_fraction must lie in (0, 1)"));
        }
        if !(0.0 < self.climb_fraction && self.climb_fraction <= 0.5) {
            return Err(invalid("climb_fraction must lie in (0, 0.5]"));
        }
        if !(self.speed > 0.0) || self.dt <= 0 || self.raw_dt <= 0 || self.bucket_seconds <= 0 || self.departure_window < 0 {
            return Err(invalid("speed, dt, raw_dt and bucket_seconds must be positive"));
        }
        let n = &self.noise;
        if [n.lateral, n.altitude, n.speed, n.position].iter().any(|v| !(*v >= 0.0)) || !(self.arrival_separation >= 0.0) {
            return Err(invalid("noise scales and arrival separation must be non-negative"));
        }
        if !(self.grid_step_deg > 0.0 && self.grid_alt_step > 0.0 && self.grid_time_step > 0.0 && self.grid_time_margin >= 0.0) {
            return Err(invalid("weather grid steps must be positive"));
        }
        for m in &self.modes {
            if !(MIN_ALT_M..=MAX_ALT_M).contains(&m.cruise_alt) {
                return Err(invalid(format!("cruise altitude {} out of range", m.cruise_alt)));
            }
        }
        for (i, m) in self.modes.iter().enumerate() {
            let path = Path3::new(self, m.lateral_offset, m.cruise_alt);
            for k in 0..=200 {
                let p = path.at(k as f64 / 200.0);
                if !self.bbox.contains(p.lon, p.lat) {
                    return Err(invalid(format!(
                        "infeasible geometry: mode {i} leaves the bounding box at ({:.4}, {:.4})",
                        p.lon, p.lat
                    )));
                }
            }
        }
        Ok(())
    }

    /// Trajectories per mode: priors times n, largest remainders rounded up.
    pub fn mode_counts(&self) -> Vec<usize> {
        let n = self.n_trajectories;
        let exact: Vec<f64> = self.modes.iter().map(|m| m.prior * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
        let mut rest: Vec<usize> = (0..counts.len()).collect();
        rest.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
        let assigned: usize = counts.iter().sum();
        for &i in rest.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        counts
    }

    pub fn trajectory_id(i: usize) -> String {
        format!("f{i:04}")
    }
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Nominal path of one flight, parametrized by route fraction.
struct Path3 {
    origin: GeoPosition,
    dest: GeoPosition,
    course: EnuVector,
    left: (f64, f64),
    offset: f64,
    cruise: f64,
    apex: f64,
    climb: f64,
}

impl Path3 {
    fn new(spec: &ScenarioSpec, offset: f64, cruise: f64) -> Self {
        let course = to_enu(&spec.origin, &spec.dest);
        let h = course.horizontal_norm().max(1e-9);
        Self {
            origin: spec.origin,
            dest: spec.dest,
            course,
            left: (-course.north / h, course.east / h),
            offset,
            cruise,
            apex: spec.apex_fraction,
            climb: spec.climb_fraction,
        }
    }

    fn lateral(&self, s: f64) -> f64 {
        if s <= self.apex {
            self.offset * smoothstep(s / self.apex)
        } else {
            self.offset * smoothstep((1.0 - s) / (1.0 - self.apex))
        }
    }

    fn altitude(&self, s: f64) -> f64 {
        let base = self.origin.alt + s * (self.dest.alt - self.origin.alt);
        let ramp = smoothstep(s / self.climb) * smoothstep((1.0 - s) / self.climb);
        base + (self.cruise - base) * ramp
    }

    fn enu(&self, s: f64) -> EnuVector {
        let l = self.lateral(s);
        EnuVector::new(
            s * self.course.east + l * self.left.0,
            s * self.course.north + l * self.left.1,
            self.altitude(s) - self.origin.alt,
        )
    }

    fn at(&self, s: f64) -> GeoPosition {
        from_enu(&self.origin, &self.enu(s))
    }

    fn ground_length(&self) -> f64 {
        let n = 400;
        (0..n)
            .map(|k| {
                let (a, b) = (self.enu(k as f64 / n as f64), self.enu((k + 1) as f64 / n as f64));
                b.sub(&a).horizontal_norm()
            })
            .sum()
    }
}

/// A generated corpus. `labels[i]` is the mode of `trajectories[i]`.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub trajectories: Vec<Trajectory>,
    pub labels: Vec<usize>,
    pub grid: WeatherGrid,
    pub arrivals: ArrivalConditionsTable,
}

impl Scenario {
    pub fn labeled_ids(&self) -> Vec<(String, usize)> {
        self.trajectories.iter().map(|t| t.id.clone()).zip(self.labels.iter().copied()).collect()
    }
}

const ARRIVAL_BASE: [(f64, f64); ARRIVAL_FEATURES] = [
    // wind direction (deg), wind speed (kt), altimeter (inHg), visibility (mi), gust (kt)
    (220.0, 25.0),
    (10.0, 3.0),
    (29.92, 0.1),
    (8.0, 1.5),
    (15.0, 4.0),
];

fn arrival_draw(spec: &ScenarioSpec, mode: usize, rng: &mut impl Rng) -> [f64; ARRIVAL_FEATURES] {
    let centre = (spec.modes.len() as f64 - 1.0) / 2.0;
    let mut v = [0.0; ARRIVAL_FEATURES];
    for (f, x) in v.iter_mut().enumerate() {
        let (mu, sigma) = ARRIVAL_BASE[f];
        let z: f64 = StandardNormal.sample(rng);
        *x = mu + sigma * (spec.arrival_separation * (mode as f64 - centre) + z);
    }
    v
}

/// Sum of a few long-wavelength waves per feature plus altitude and slow
/// time dependence.
struct WeatherField {
    waves: Vec<[(f64, f64, f64); 3]>,
    periods: Vec<(f64, f64)>,
}

const WEATHER_BASE: [(f64, f64, f64); WEATHER_FEATURES] = [
    // (base, spatial amplitude, change per km of altitude)
    (101_000.0, 800.0, -11_000.0),
    (55.0, 20.0, -3.0),
    (288.0, 4.0, -6.5),
    (10.0, 4.0, 1.0),
    (8.0, 6.0, 2.0),
    (0.0, 6.0, 0.5),
];

impl WeatherField {
    fn new(rng: &mut impl Rng) -> Self {
        let waves = (0..WEATHER_FEATURES)
            .map(|_| {
                [0; 3].map(|_| {
                    let kx = rng.random_range(0.3..1.2) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    let ky = rng.random_range(0.3..1.2) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                    (kx, ky, rng.random_range(0.0..std::f64::consts::TAU))
                })
            })
            .collect();
        let periods = (0..WEATHER_FEATURES)
            .map(|_| (rng.random_range(43_200.0..172_800.0), rng.random_range(0.0..std::f64::consts::TAU)))
            .collect();
        Self { waves, periods }
    }

    fn eval(&self, lon: f64, lat: f64, alt: f64, t: f64) -> [f64; WEATHER_FEATURES] {
        let mut out = [0.0; WEATHER_FEATURES];
        for (f, o) in out.iter_mut().enumerate() {
            let (base, amp, per_km) = WEATHER_BASE[f];
            let spatial: f64 = self.waves[f].iter().map(|(kx, ky, ph)| (kx * lon + ky * lat + ph).sin()).sum::<f64>() / 3.0;
            let (period, ph) = self.periods[f];
            let temporal = 0.1 * (std::f64::consts::TAU * t / period + ph).sin();
            *o = base + amp * (spatial + temporal) + per_km * alt / 1000.0;
        }
        out
    }
}

fn covering_axis(lo: f64, hi: f64, step: f64) -> Result<Axis> {
    let start = (lo / step).floor() * step - step;
    let count = ((hi + step - start) / step).ceil() as usize + 1;
    Axis::new(start, step, count)
}

/// Generates the scenario. Flights use independent streams derived from the
/// seed, so each one depends only on the seed and its index.
pub fn generate(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels: Vec<usize> = spec
        .mode_counts()
        .iter()
        .enumerate()
        .flat_map(|(m, &c)| std::iter::repeat_n(m, c))
        .collect();
    labels.shuffle(&mut master);

    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    for (i, &mode) in labels.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1 + i as u64);
        trajectories.push(flight(spec, i, mode, &mut rng)?);
    }

    let mut arrivals = ArrivalConditionsTable::new(spec.bucket_seconds)?;
    let mut owner: std::collections::BTreeMap<i64, usize> = Default::default();
    for (i, t) in trajectories.iter().enumerate() {
        let b = arrivals.bucket_of(t.states.last().expect("resampled").timestamp);
        if let Some(j) = owner.insert(b, i) {
            return Err(invalid(format!(
                "flights {j} and {i} arrive in the same {}s bucket; increase bucket_seconds",
                spec.bucket_seconds
            )));
        }
    }
    let last_departure = trajectories.iter().map(|t| t.states[0].timestamp).max().unwrap_or(spec.t0);
    let t_end = last_departure as f64 + spec.grid_time_margin;
    let mut arrival_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    arrival_rng.set_stream(u64::MAX);
    let priors: Vec<f64> = spec.modes.iter().map(|m| m.prior).collect();
    for b in arrivals.bucket_of(spec.t0)..=arrivals.bucket_of(t_end.ceil() as i64) {
        let mode = match owner.get(&b) {
            Some(&i) => labels[i],
            None => {
                let u: f64 = arrival_rng.random();
                let mut acc = 0.0;
                priors.iter().position(|p| {
                    acc += p;
                    u < acc
                })
                .unwrap_or(priors.len() - 1)
            }
        };
        let v = arrival_draw(spec, mode, &mut arrival_rng);
        arrivals.insert(&spec.dest_airport, b, v)?;
    }

    let field = WeatherField::new(&mut master);
    let b = &spec.bbox;
    let grid = WeatherGrid::from_fn(
        covering_axis(b.lon_min, b.lon_max, spec.grid_step_deg)?,
        covering_axis(b.lat_min, b.lat_max, spec.grid_step_deg)?,
        covering_axis(MIN_ALT_M, MAX_ALT_M, spec.grid_alt_step)?,
        covering_axis(spec.t0 as f64, t_end, spec.grid_time_step)?,
        |lon, lat, alt, t| field.eval(lon, lat, alt, t),
    )?;
    Ok(Scenario {
        trajectories,
        labels,
        grid,
        arrivals,
    })
}

fn normal(sigma: f64, rng: &mut impl Rng) -> f64 {
    if sigma > 0.0 {
        Normal::new(0.0, sigma).expect("positive sigma").sample(rng)
    } else {
        0.0
    }
}

fn flight(spec: &ScenarioSpec, index: usize, mode: usize, rng: &mut impl Rng) -> Result<Trajectory> {
    let m = &spec.modes[mode];
    let departure = spec.t0 + index as i64 * spec.bucket_seconds + rng.random_range(0..=spec.departure_window);
    let offset = m.lateral_offset + normal(spec.noise.lateral, rng);
    let cruise = (m.cruise_alt + normal(spec.noise.altitude, rng)).clamp(MIN_ALT_M, MAX_ALT_M);
    let speed = (spec.speed + normal(spec.noise.speed, rng)).max(0.25 * spec.speed);
    let path = Path3::new(spec, offset, cruise);
    let duration = (path.ground_length() / speed).round().max(1.0) as i64;

    let mut times: Vec<i64> = (0..duration).step_by(spec.raw_dt as usize).collect();
    times.push(duration);
    let mut states = Vec::with_capacity(times.len());
    for &t in &times {
        let mut v = path.enu(t as f64 / duration as f64);
        v.east += normal(spec.noise.position, rng);
        v.north += normal(spec.noise.position, rng);
        v.up += normal(spec.noise.position, rng);
        let mut p = from_enu(&spec.origin, &v);
        p.alt = p.alt.clamp(MIN_ALT_M, MAX_ALT_M);
        states.push(EnrichedState::new(p, departure + t, Vec::new()));
    }
    let raw = Trajectory::new(ScenarioSpec::trajectory_id(index), states, spec.origin, spec.dest)?;
    resample(&raw, spec.dt)
}

/// Seeded split of indices `0..labels.len()` into (train, test), stratified
/// by label. The test side gets `round(test_fraction * n)` items, shared
/// among labels by largest remainder; both sides keep corpus order.
pub fn split(labels: &[usize], test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0 < test_fraction && test_fraction < 1.0) {
        return Err(invalid(format!("test fraction must lie in (0, 1), got {test_fraction}")));
    }
    let n = labels.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(invalid(format!("test fraction {test_fraction} of {n} items leaves one side empty")));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let exact: Vec<f64> = members.iter().map(|m| m.len() as f64 * n_test as f64 / n as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())).then(a.cmp(&b)));
    let missing = n_test - quota.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        quota[c] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_test = vec![false; n];
    for (c, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng);
        for &i in m.iter().take(quota[c]) {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| is_test[i]);
    Ok((train, test))
}

pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const WEATHER_FILE: &str = "weather.csv";
pub const ARRIVALS_FILE: &str = "arrivals.csv";
pub const SCENARIO_FILE: &str = "scenario.conf";

/// Writes the scenario files into `dir`.
pub fn write_scenario(dir: &Path, spec: &ScenarioSpec, s: &Scenario) -> Result<()> {
    fs::create_dir_all(dir)?;
    io::write_trajectories(&dir.join(TRAJECTORIES_FILE), &s.trajectories, &[])?;
    io::write_labels(&dir.join(LABELS_FILE), &s.labeled_ids())?;
    s.grid.write(&dir.join(WEATHER_FILE))?;
    s.arrivals.write(&dir.join(ARRIVALS_FILE))?;
    let mut kv = KeyValues::default();
    spec.write_kv(&mut kv, "");
    fs::write(dir.join(SCENARIO_FILE), kv.to_text())?;
    Ok(())
}

/// Reads back a directory written by [`write_scenario`].
pub fn read_scenario(dir: &Path) -> Result<(ScenarioSpec, Scenario)> {
    let kv = KeyValues::parse(&fs::read_to_string(dir.join(SCENARIO_FILE))?)?;
    let spec = ScenarioSpec::from_kv(&kv, "")?;
    let (trajectories, _) = io::read_trajectories(&dir.join(TRAJECTORIES_FILE), spec.origin, spec.dest)?;
    let by_id: std::collections::BTreeMap<String, usize> = io::read_labels(&dir.join(LABELS_FILE))?.into_iter().collect();
    let labels = trajectories
        .iter()
        .map(|t| by_id.get(&t.id).copied().ok_or_else(|| invalid(format!("no label for `{}`", t.id))))
        .collect::<Result<Vec<_>>>()?;
    let grid = WeatherGrid::read(&dir.join(WEATHER_FILE))?;
    let arrivals = ArrivalConditionsTable::read(&dir.join(ARRIVALS_FILE), spec.bucket_seconds)?;
    Ok((
        spec,
        Scenario {
            trajectories,
            labels,
            grid,
            arrivals,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{adjusted_rand_index, select_k, DistanceMatrix, DtwDim, DtwSpace};
    use crate::preprocess::{clean, enrich, CleanConfig};

    fn small(n: usize) -> ScenarioSpec {
        ScenarioSpec {
            n_trajectories: n,
            ..Default::default()
        }
    }

    fn enriched(s: &Scenario, spec: &ScenarioSpec) -> Vec<Trajectory> {
        s.trajectories
            .iter()
            .map(|t| enrich(t, &s.grid, &s.arrivals, &spec.dest_airport).unwrap())
            .collect()
    }

    #[test]
    fn default_flights_have_about_120_states_and_pass_cleaning() {
        let spec = ScenarioSpec::default();
        let s = generate(&spec).unwrap();
        assert_eq!(s.trajectories.len(), 100);
        assert_eq!(spec.mode_counts(), vec![50, 50]);
        for t in &s.trajectories {
            assert!((100..=150).contains(&t.len()), "{}", t.len());
            assert!(t.states.windows(2).all(|w| w[1].timestamp - w[0].timestamp == spec.dt));
        }
        let report = clean(&s.trajectories, &spec.origin, &spec.dest, &CleanConfig::default());
        assert!(report.rejected.is_empty(), "{:?}", report.rejected);
        enriched(&s, &spec);
    }

    #[test]
    fn zero_noise_makes_mode_members_identical() {
        let spec = ScenarioSpec {
            noise: NoiseScales::zero(),
            ..small(12)
        };
        let s = generate(&spec).unwrap();
        for m in 0..2 {
            let members: Vec<&Trajectory> = s.trajectories.iter().zip(&s.labels).filter(|p| *p.1 == m).map(|p| p.0).collect();
            for t in &members[1..] {
                let a: Vec<_> = t.positions().collect();
                let b: Vec<_> = members[0].positions().collect();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn cross_mode_distances_exceed_intra_mode_distances() {
        let spec = small(20);
        let s = generate(&spec).unwrap();
        let corpus = enriched(&s, &spec);
        let space = DtwSpace::fit(&corpus, DtwDim::position_and_features(WEATHER_FEATURES)).unwrap();
        let d = DistanceMatrix::ndtw(&corpus, &space).unwrap();
        let (mut max_intra, mut min_cross) = (0.0f64, f64::INFINITY);
        for i in 0..20 {
            for j in i + 1..20 {
                assert!((0.0..=1.0).contains(&d.get(i, j)));
                if s.labels[i] == s.labels[j] {
                    max_intra = max_intra.max(d.get(i, j));
                } else {
                    min_cross = min_cross.min(d.get(i, j));
                }
            }
        }
        assert!(min_cross > max_intra, "cross {min_cross} intra {max_intra}");
    }

    #[test]
    fn default_corpus_clusters_into_the_true_modes() {
        let spec = ScenarioSpec::default();
        let s = generate(&spec).unwrap();
        let corpus = enriched(&s, &spec);
        let space = DtwSpace::fit(&corpus, DtwDim::position_and_features(WEATHER_FEATURES)).unwrap();
        let d = DistanceMatrix::ndtw(&corpus, &space).unwrap();
        let model = select_k(&d, 2..=6).unwrap();
        assert_eq!(model.k, 2);
        assert_eq!(adjusted_rand_index(&model.assignments, &s.labels), 1.0);
    }

    #[test]
    fn trimodal_corpus_selects_three_clusters() {
        let spec = ScenarioSpec {
            n_trajectories: 60,
            modes: vec![
                ModeSpec {
                    lateral_offset: 18_000.0,
                    cruise_alt: 7_000.0,
                    prior: 0.4,
                },
                ModeSpec {
                    lateral_offset: 0.0,
                    cruise_alt: 9_000.0,
                    prior: 0.3,
                },
                ModeSpec {
                    lateral_offset: -18_000.0,
                    cruise_alt: 5_000.0,
                    prior: 0.3,
                },
            ],
            ..Default::default()
        };
        let s = generate(&spec).unwrap();
        let corpus = enriched(&s, &spec);
        let space = DtwSpace::fit(&corpus, DtwDim::position_and_features(WEATHER_FEATURES)).unwrap();
        let model = select_k(&DistanceMatrix::ndtw(&corpus, &space).unwrap(), 2..=6).unwrap();
        assert_eq!(model.k, 3);
        assert_eq!(adjusted_rand_index(&model.assignments, &s.labels), 1.0);
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let spec = small(6);
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        for d in &dirs {
            write_scenario(d.path(), &spec, &generate(&spec).unwrap()).unwrap();
        }
        for f in [TRAJECTORIES_FILE, LABELS_FILE, WEATHER_FILE, ARRIVALS_FILE, SCENARIO_FILE] {
            assert_eq!(
                fs::read(dirs[0].path().join(f)).unwrap(),
                fs::read(dirs[1].path().join(f)).unwrap(),
                "{f}"
            );
        }
        let other = generate(&ScenarioSpec { seed: 8, ..spec.clone() }).unwrap();
        assert_ne!(other.trajectories, generate(&spec).unwrap().trajectories);
    }

    #[test]
    fn scenario_roundtrips_through_files() {
        let spec = small(6);
        let s = generate(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scenario(dir.path(), &spec, &s).unwrap();
        let (spec2, s2) = read_scenario(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(s2.trajectories, s.trajectories);
        assert_eq!(s2.labels, s.labels);
        assert_eq!(s2.arrivals.len(), s.arrivals.len());
    }

    #[test]
    fn arrival_conditions_follow_the_mode() {
        let spec = ScenarioSpec::default();
        let s = generate(&spec).unwrap();
        let mut sums = [0.0; 2];
        let mut counts = [0.0; 2];
        for (t, &l) in s.trajectories.iter().zip(&s.labels) {
            let a = s.arrivals.lookup(&spec.dest_airport, t.states.last().unwrap().timestamp).unwrap();
            sums[l] += a.0[1];
            counts[l] += 1.0;
        }
        let gap = sums[1] / counts[1] - sums[0] / counts[0];
        // separation 2.5 sigma, sigma = 3 kt
        assert!((gap - 7.5).abs() < 2.0, "{gap}");
    }

    #[test]
    fn infeasible_geometry_is_rejected() {
        let mut spec = ScenarioSpec::default();
        spec.modes[0].lateral_offset = 200_000.0;
        assert!(generate(&spec).is_err());
        let spec = ScenarioSpec {
            n_trajectories: 3,
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn spec_roundtrips_through_key_values() {
        let mut spec = ScenarioSpec::default();
        spec.noise.position = 3.5;
        spec.modes.push(ModeSpec {
            lateral_offset: 0.0,
            cruise_alt: 9_000.0,
            prior: 0.2,
        });
        spec.modes[0].prior = 0.4;
        spec.modes[1].prior = 0.4;
        let mut kv = KeyValues::default();
        spec.write_kv(&mut kv, "synth.");
        assert_eq!(ScenarioSpec::from_kv(&kv, "synth.").unwrap(), spec);
        let bad = KeyValues::parse("modes = 1:2\n").unwrap();
        assert!(matches!(ScenarioSpec::from_kv(&bad, ""), Err(Error::Config(_))));
    }

    #[test]
    fn split_examples() {
        let labels: Vec<usize> = (0..528).map(|i| i % 2).collect();
        let (train, test) = split(&labels, 50.0 / 528.0, 3).unwrap();
        assert_eq!((train.len(), test.len()), (478, 50));
        let (a, b) = split(&[0; 10], 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (5, 5));
        assert_eq!(split(&labels, 0.3, 9).unwrap(), split(&labels, 0.3, 9).unwrap());
        assert!(split(&[0, 1, 0], 0.01, 0).is_err());
        assert!(split(&[0, 1], 0.0, 0).is_err());
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let labels: Vec<usize> = (0..40).map(|i| usize::from(i % 4 == 0)).collect();
        let (train, test) = split(&labels, 0.25, 5).unwrap();
        assert_eq!(test.len(), 10);
        assert!((2..=3).contains(&test.iter().filter(|&&i| labels[i] == 1).count()));
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }
}
