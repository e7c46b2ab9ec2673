//! Episodic flight environment: start states drawn from demonstrations, the
//! kinematic transition, weather enrichment and termination.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geo::{
    apply_action, horizontal_distance, ActionBounds, DeltaAction, EnrichedState, GeoPosition, Trajectory, MAX_ALT_M,
    MIN_ALT_M,
};
use crate::neural::GaussianPolicy;
use crate::preprocess::{WeatherGrid, ARRIVAL_FEATURES};

/// Axis-aligned lon/lat box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lon_min: f64,
    pub lat_min: f64,
    pub lon_max: f64,
    pub lat_max: f64,
}

impl BoundingBox {
    /// Any two opposite corners, each `(lon, lat)`.
    pub fn from_corners(a: (f64, f64), b: (f64, f64)) -> Result<Self> {
        let bb = Self {
            lon_min: a.0.min(b.0),
            lat_min: a.1.min(b.1),
            lon_max: a.0.max(b.0),
            lat_max: a.1.max(b.1),
        };
        if !(bb.lon_max > bb.lon_min && bb.lat_max > bb.lat_min) {
            return Err(invalid(format!("degenerate bounding box {a:?} {b:?}")));
        }
        Ok(bb)
    }

    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        (self.lon_min..=self.lon_max).contains(&lon) && (self.lat_min..=self.lat_max).contains(&lat)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    ReachedDest,
    MaxLen,
    OutOfBounds,
}

impl Termination {
    pub fn code(&self) -> &'static str {
        match self {
            Termination::ReachedDest => "reached_dest",
            Termination::MaxLen => "max_len",
            Termination::OutOfBounds => "out_of_bounds",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub dt: i64,
    pub dest: GeoPosition,
    /// meters, horizontal
    pub dest_radius: f64,
    /// Maximum number of points in an episode, start state included.
    pub max_len: usize,
    pub bbox: BoundingBox,
    pub grid: Arc<WeatherGrid>,
    /// Executed actions are clamped to these limits when set.
    pub action_bounds: Option<ActionBounds>,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0 || !(self.dest_radius > 0.0) || self.max_len < 1 {
            return Err(invalid(format!(
                "invalid environment: dt={} dest_radius={} max_len={}",
                self.dt, self.dest_radius, self.max_len
            )));
        }
        Ok(())
    }

    fn outside(&self, p: &GeoPosition) -> bool {
        !self.bbox.contains(p.lon, p.lat) || !(MIN_ALT_M..=MAX_ALT_M).contains(&p.alt)
    }
}

/// One transition. `len` is the number of points in the episode once the
/// new state is appended. Termination checks run in the order destination,
/// length cap, bounds.
pub fn step(s: &EnrichedState, a: &DeltaAction, cfg: &EnvConfig, len: usize) -> Result<(EnrichedState, Option<Termination>)> {
    if !a.is_finite() {
        return Err(Error::NonFinite("action"));
    }
    let position = apply_action(s, a);
    let timestamp = s.timestamp + cfg.dt;
    let outside = cfg.outside(&position);
    let features = if outside {
        // nothing to look up outside the airspace; the episode ends here
        s.features.clone()
    } else {
        cfg.grid
            .lookup(position.lon, position.lat, position.alt, timestamp as f64)
            .ok_or(Error::OutOfGrid { index: len - 1 })?
    };
    let done = if horizontal_distance(&cfg.dest, &position) <= cfg.dest_radius {
        Some(Termination::ReachedDest)
    } else if len >= cfg.max_len {
        Some(Termination::MaxLen)
    } else if outside {
        Some(Termination::OutOfBounds)
    } else {
        None
    };
    Ok((EnrichedState::new(position, timestamp, features), done))
}

/// Flight-level inputs that stay fixed over an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeContext {
    pub t_departure: i64,
    pub arrival: Option<Vec<f64>>,
}

impl EpisodeContext {
    pub fn of(traj: &Trajectory) -> Self {
        Self {
            t_departure: traj.states.first().map_or(0, |s| s.timestamp),
            arrival: traj.arrival.as_ref().map(|a| a.0.clone()),
        }
    }
}

/// What the policy sees: position, seconds since departure, the state's
/// weather features and, optionally, the flight's arrival conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsLayout {
    pub n_weather: usize,
    pub with_arrival: bool,
}

impl ObsLayout {
    pub fn dim(&self) -> usize {
        4 + self.n_weather + if self.with_arrival { ARRIVAL_FEATURES } else { 0 }
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["lon", "lat", "alt", "elapsed"].iter().map(|s| s.to_string()).collect();
        v.extend((0..self.n_weather).map(|i| format!("weather_{i}")));
        if self.with_arrival {
            v.extend((0..ARRIVAL_FEATURES).map(|i| format!("arrival_{i}")));
        }
        v
    }

    pub fn observe(&self, s: &EnrichedState, ctx: &EpisodeContext) -> Result<Vec<f64>> {
        if s.features.len() != self.n_weather {
            return Err(Error::Shape {
                context: "state features",
                expected: self.n_weather,
                got: s.features.len(),
            });
        }
        let mut o = Vec::with_capacity(self.dim());
        o.extend([
            s.position.lon,
            s.position.lat,
            s.position.alt,
            (s.timestamp - ctx.t_departure) as f64,
        ]);
        o.extend_from_slice(s.features.as_slice());
        if self.with_arrival {
            let a = ctx
                .arrival
                .as_ref()
                .ok_or_else(|| invalid("observation needs arrival conditions"))?;
            if a.len() != ARRIVAL_FEATURES {
                return Err(Error::Shape {
                    context: "arrival conditions",
                    expected: ARRIVAL_FEATURES,
                    got: a.len(),
                });
            }
            o.extend_from_slice(a);
        }
        Ok(o)
    }
}

/// Demonstrated (observation, action) pairs of a set of trajectories.
pub fn demonstrations(trajs: &[Trajectory], layout: &ObsLayout) -> Result<Vec<(Vec<f64>, DeltaAction)>> {
    let mut out = Vec::new();
    for t in trajs {
        let ctx = EpisodeContext::of(t);
        for w in t.states.windows(2) {
            out.push((layout.observe(&w[0], &ctx)?, w[0].position.delta_to(&w[1].position)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub traj_index: usize,
    pub state_index: usize,
    pub state: EnrichedState,
    pub context: EpisodeContext,
}

/// Uniform draw over all (trajectory, state) pairs.
pub fn sample_initial(train: &[Trajectory], rng: &mut impl Rng) -> Result<InitialState> {
    let total: usize = train.iter().map(Trajectory::len).sum();
    if total == 0 {
        return Err(invalid("cannot sample a start state from an empty set"));
    }
    let mut k = rng.random_range(0..total);
    for (traj_index, t) in train.iter().enumerate() {
        if k < t.len() {
            return Ok(InitialState {
                traj_index,
                state_index: k,
                state: t.states[k].clone(),
                context: EpisodeContext::of(t),
            });
        }
        k -= t.len();
    }
    unreachable!("k < total")
}

/// Start index `floor(m * (|T| - 1))` of a test trajectory.
pub fn evaluation_start_index(len: usize, m: f64) -> Result<usize> {
    if len == 0 || !(0.0..=1.0).contains(&m) {
        return Err(invalid(format!("bad evaluation start: len={len}, M={m}")));
    }
    Ok((m * (len - 1) as f64).floor() as usize)
}

pub fn evaluation_start(traj: &Trajectory, m: f64) -> Result<InitialState> {
    let i = evaluation_start_index(traj.len(), m)?;
    Ok(InitialState {
        traj_index: 0,
        state_index: i,
        state: traj.states[i].clone(),
        context: EpisodeContext::of(traj),
    })
}

/// An action as executed by the environment plus the draw it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyAct {
    pub action: DeltaAction,
    /// Sample in the policy's own (standardized) action space.
    pub normalized: Vec<f64>,
}

pub trait RolloutPolicy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<PolicyAct>;
}

impl RolloutPolicy for GaussianPolicy {
    fn act(&self, obs: &[f64], rng: &mut ChaCha8Rng) -> Result<PolicyAct> {
        let s = self.sample(obs, rng)?;
        Ok(PolicyAct {
            action: DeltaAction::from_slice(&s.action),
            normalized: s.normalized,
        })
    }
}

/// Acts with the policy mean, no sampling.
pub struct MeanPolicy<'a>(pub &'a GaussianPolicy);

impl RolloutPolicy for MeanPolicy<'_> {
    fn act(&self, obs: &[f64], _rng: &mut ChaCha8Rng) -> Result<PolicyAct> {
        let normalized = self.0.mean_normalized(obs)?;
        Ok(PolicyAct {
            action: DeltaAction::from_slice(&self.0.act_norm.invert(&normalized)),
            normalized,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub start: (usize, usize),
    pub context: EpisodeContext,
    /// `actions.len() + 1` states.
    pub states: Vec<EnrichedState>,
    pub observations: Vec<Vec<f64>>,
    /// Executed (possibly clamped) actions.
    pub actions: Vec<DeltaAction>,
    pub samples: Vec<Vec<f64>>,
    pub termination: Termination,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// The rolled-out states as a trajectory.
    pub fn to_trajectory(&self, id: &str, origin: GeoPosition, destination: GeoPosition) -> Trajectory {
        Trajectory {
            id: id.to_string(),
            states: self.states.clone(),
            origin,
            destination,
            arrival: self.context.arrival.clone().map(Into::into),
        }
    }
}

/// Runs one episode from `init` until a termination rule fires. Executed
/// actions are clamped to the action bounds, if any, and never take the
/// aircraft below the floor or above the ceiling of the airspace.
pub fn run_episode<P: RolloutPolicy + ?Sized>(
    policy: &P,
    cfg: &EnvConfig,
    layout: &ObsLayout,
    init: &InitialState,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    cfg.validate()?;
    let mut states = vec![init.state.clone()];
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut samples = Vec::new();
    let termination = loop {
        let s = states.last().expect("non-empty");
        let obs = layout.observe(s, &init.context)?;
        let act = policy.act(&obs, rng)?;
        let mut action = match &cfg.action_bounds {
            Some(b) => b.clamp(&act.action),
            None => act.action,
        };
        // the airspace has a floor and a ceiling
        let alt = s.position.alt;
        if !(MIN_ALT_M..=MAX_ALT_M).contains(&(alt + action.dalt)) {
            action.dalt = (alt + action.dalt).clamp(MIN_ALT_M, MAX_ALT_M) - alt;
        }
        let (next, done) = step(s, &action, cfg, states.len() + 1)?;
        observations.push(obs);
        actions.push(action);
        samples.push(act.normalized);
        states.push(next);
        if let Some(t) = done {
            break t;
        }
    };
    observations.push(layout.observe(states.last().expect("non-empty"), &init.context)?);
    Ok(Episode {
        start: (init.traj_index, init.state_index),
        context: init.context.clone(),
        states,
        observations,
        actions,
        samples,
        termination,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub episodes: Vec<Episode>,
    pub n_samples: usize,
}

impl RolloutBatch {
    pub fn fraction_reached(&self) -> f64 {
        let n = self.episodes.len().max(1) as f64;
        self.episodes
            .iter()
            .filter(|e| e.termination == Termination::ReachedDest)
            .count() as f64
            / n
    }

    pub fn mean_length(&self) -> f64 {
        self.n_samples as f64 / self.episodes.len().max(1) as f64
    }
}

/// Collects whole episodes until at least `n_samples` actions were taken.
/// Each episode draws its own seed from `rng`, then its start state and
/// actions from that seed.
pub fn collect<P: RolloutPolicy + ?Sized>(
    policy: &P,
    cfg: &EnvConfig,
    layout: &ObsLayout,
    train: &[Trajectory],
    n_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBatch> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let mut episodes = Vec::new();
    let mut total = 0;
    while total < n_samples {
        let mut ep_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let init = sample_initial(train, &mut ep_rng)?;
        let ep = run_episode(policy, cfg, layout, &init, &mut ep_rng)?;
        total += ep.len();
        episodes.push(ep);
    }
    Ok(RolloutBatch {
        episodes,
        n_samples: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::{Axis, WEATHER_FEATURES};

    fn grid() -> Arc<WeatherGrid> {
        Arc::new(
            WeatherGrid::from_fn(
                Axis::new(-4.0, 0.5, 17).unwrap(),
                Axis::new(39.5, 0.5, 6).unwrap(),
                Axis::new(-500.0, 2000.0, 12).unwrap(),
                Axis::new(0.0, 3600.0, 10).unwrap(),
                |lon, lat, alt, t| [lon, lat, alt, t, 0.0, 1.0],
            )
            .unwrap(),
        )
    }

    fn cfg() -> EnvConfig {
        EnvConfig {
            dt: 5,
            dest: GeoPosition::new(0.0, 40.5, 0.0).unwrap(),
            dest_radius: 5000.0,
            max_len: 1000,
            bbox: BoundingBox::from_corners((-3.7038, 41.4), (2.9504, 39.9864)).unwrap(),
            grid: grid(),
            action_bounds: None,
        }
    }

    fn state(lon: f64, lat: f64, alt: f64) -> EnrichedState {
        EnrichedState::new(GeoPosition::new(lon, lat, alt).unwrap(), 100, vec![0.0; WEATHER_FEATURES])
    }

    #[test]
    fn termination_rules() {
        let c = cfg();
        // 4 km east of the destination
        let near = 4000.0 / (crate::geo::EARTH_RADIUS_M.to_radians() * 40.5f64.to_radians().cos());
        let (next, done) = step(&state(0.5, 40.5, 3000.0), &DeltaAction::new(near - 0.5, 0.0, 0.0), &c, 2).unwrap();
        assert_eq!(done, Some(Termination::ReachedDest));
        assert_eq!(next.timestamp, 105);
        assert_eq!(next.features.0[..3], [0.0, 40.5, 3500.0]);

        let (_, done) = step(&state(1.0, 40.5, 3000.0), &DeltaAction::new(0.01, 0.0, 0.0), &c, 1000).unwrap();
        assert_eq!(done, Some(Termination::MaxLen));
        let (_, done) = step(&state(1.0, 40.5, 3000.0), &DeltaAction::new(0.01, 0.0, 0.0), &c, 999).unwrap();
        assert_eq!(done, None);

        let (next, done) = step(&state(-3.6, 40.5, 3000.0), &DeltaAction::new(-0.2, 0.0, 0.0), &c, 5).unwrap();
        assert_eq!(done, Some(Termination::OutOfBounds));
        assert_eq!(next.features, state(-3.6, 40.5, 3000.0).features);

        let (_, done) = step(&state(1.0, 40.5, 19_999.0), &DeltaAction::new(0.0, 0.0, 10.0), &c, 5).unwrap();
        assert_eq!(done, Some(Termination::OutOfBounds));
    }

    #[test]
    fn grid_miss_inside_box_is_error() {
        let mut c = cfg();
        c.grid = Arc::new(
            WeatherGrid::from_fn(
                Axis::new(0.0, 0.5, 3).unwrap(),
                Axis::new(40.0, 0.5, 3).unwrap(),
                Axis::new(0.0, 1000.0, 3).unwrap(),
                Axis::new(0.0, 3600.0, 2).unwrap(),
                |_, _, _, _| [0.0; 6],
            )
            .unwrap(),
        );
        let r = step(&state(-3.0, 40.5, 100.0), &DeltaAction::default(), &c, 2);
        assert!(matches!(r, Err(Error::OutOfGrid { .. })));
    }

    #[test]
    fn evaluation_start_indices() {
        assert_eq!(evaluation_start_index(101, 0.0).unwrap(), 0);
        assert_eq!(evaluation_start_index(101, 0.5).unwrap(), 50);
        assert_eq!(evaluation_start_index(10, 0.7).unwrap(), 6);
        assert!(evaluation_start_index(10, 1.5).is_err());
    }

    /// Flies a fixed increment; with the start 10 steps out this reaches
    /// the destination in exactly 10 actions.
    struct Straight(DeltaAction);

    impl RolloutPolicy for Straight {
        fn act(&self, _obs: &[f64], _rng: &mut ChaCha8Rng) -> Result<PolicyAct> {
            Ok(PolicyAct {
                action: self.0,
                normalized: self.0.to_array().to_vec(),
            })
        }
    }

    #[test]
    fn collect_runs_whole_episodes() {
        let c = cfg();
        let start = GeoPosition::new(1.0, 40.5, 5000.0).unwrap();
        let states = vec![EnrichedState::new(start, 0, vec![0.0; 6]), EnrichedState::new(start, 5, vec![0.0; 6])];
        let train = vec![Trajectory::new("a", states, start, c.dest).unwrap()];
        let policy = Straight(DeltaAction::new(-0.1, 0.0, -500.0));
        let layout = ObsLayout {
            n_weather: 6,
            with_arrival: false,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = collect(&policy, &c, &layout, &train, 25, &mut rng).unwrap();
        assert_eq!(batch.episodes.len(), 3);
        assert_eq!(batch.n_samples, 30);
        for e in &batch.episodes {
            assert_eq!(e.termination, Termination::ReachedDest);
            assert_eq!(e.states.len(), e.actions.len() + 1);
            assert_eq!(e.observations.len(), e.states.len());
            // replaying the actions reproduces the states
            let mut s = e.states[0].clone();
            for (i, a) in e.actions.iter().enumerate() {
                s = step(&s, a, &c, i + 2).unwrap().0;
                assert_eq!(s, e.states[i + 1]);
            }
        }
        let again = collect(&policy, &c, &layout, &train, 25, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(again, batch);
    }

    #[test]
    fn initial_states_are_uniform_over_pairs() {
        let dest = GeoPosition::new(0.0, 40.5, 0.0).unwrap();
        let mk = |id: &str, n: usize| {
            let states = (0..n)
                .map(|i| EnrichedState::new(dest, i as i64, vec![0.0; 6]))
                .collect();
            Trajectory::new(id, states, dest, dest).unwrap()
        };
        let train = vec![mk("a", 2), mk("b", 5), mk("c", 3)];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let mut hist = vec![0usize; 10];
        for _ in 0..n {
            let s = sample_initial(&train, &mut rng).unwrap();
            let offset = [0, 2, 7][s.traj_index];
            hist[offset + s.state_index] += 1;
        }
        let p = 0.1;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for h in hist {
            assert!((h as f64 - n as f64 * p).abs() < 3.0 * sd + 1.0);
        }
        assert!(sample_initial(&[], &mut rng).is_err());
    }
}
