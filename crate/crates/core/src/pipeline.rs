//! Experiment orchestration over a run directory.
//!
//! Every stage reads its inputs from and writes its outputs to the run
//! directory, so stages can run one at a time (as the command line tool
//! does) or back to back. Layout:
//!
//! ```text
//! config.conf                      resolved configuration
//! data/                            scenario files (unless data_dir is set)
//! preprocessed/{train,test}.csv    enriched, resampled flights
//! preprocessed/rejected.csv
//! clusters/cluster_model.json
//! models/<setting>/forest.json     mode classifier (MultPolicies)
//! models/<setting>/bc/policy_<c>.json
//! models/<setting>/policy_<c>.json
//! models/<setting>/gail_<c>.csv    training diagnostics
//! models/<setting>/meta.json
//! metrics.csv, summary.csv
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{select_k, ClusterModel, DistanceMatrix, DtwDim, DtwSpace};
use crate::config::KeyValues;
use crate::env::{evaluation_start, run_episode, EnvConfig, Episode, MeanPolicy, ObsLayout, Termination};
use crate::error::{invalid, Error, Result};
use crate::eval::{evaluate, summarize, write_csv, MetricsRecord};
use crate::forest::{classifier_row, feature_names, train_forest, ForestModel, ForestParams};
use crate::geo::{ActionBounds, GeoPosition, Trajectory};
use crate::imitation::{train_bc, train_gail, BcConfig, DiagnosticsWriter, GailConfig, GailHooks};
use crate::io;
use crate::neural::{load_json, save_json, GaussianPolicy};
use crate::preprocess::{
    clean, enrich, resample, ArrivalConditionsTable, CleanConfig, WeatherGrid, WEATHER_FEATURES, WEATHER_FEATURE_NAMES,
};
use crate::synthgen::{self, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    /// One policy over all flights, arrival conditions appended to its input.
    OnePolicy,
    /// One policy per cluster, chosen by the mode classifier.
    MultPolicies,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::OnePolicy => "OnePolicy",
            Setting::MultPolicies => "MultPolicies",
        }
    }

    fn dir(self) -> &'static str {
        match self {
            Setting::OnePolicy => "one_policy",
            Setting::MultPolicies => "mult_policies",
        }
    }

    fn index(self) -> u64 {
        match self {
            Setting::OnePolicy => 0,
            Setting::MultPolicies => 1,
        }
    }

    pub fn layout(self) -> ObsLayout {
        ObsLayout {
            n_weather: WEATHER_FEATURES,
            with_arrival: self == Setting::OnePolicy,
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "OnePolicy" => Ok(Setting::OnePolicy),
            "MultPolicies" => Ok(Setting::MultPolicies),
            _ => Err(format!("unknown setting `{s}` (OnePolicy, MultPolicies)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RolloutMode {
    /// Actions sampled from the Gaussian policy.
    Stochastic,
    /// The policy mean, σ forced to 0.
    Mean,
}

impl fmt::Display for RolloutMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RolloutMode::Stochastic => "stochastic",
            RolloutMode::Mean => "mean",
        })
    }
}

impl FromStr for RolloutMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stochastic" => Ok(RolloutMode::Stochastic),
            "mean" => Ok(RolloutMode::Mean),
            _ => Err(format!("unknown rollout mode `{s}` (stochastic, mean)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub run_dir: PathBuf,
    /// Existing scenario directory; when unset the scenario is synthesized
    /// into `run_dir/data` from `scenario`.
    pub data_dir: Option<PathBuf>,
    pub scenario: ScenarioSpec,
    pub settings: Vec<Setting>,
    pub dt: i64,
    pub test_fraction: f64,
    pub clean: CleanConfig,
    /// Clamp executed actions to what `clean.v_max` allows in one step.
    pub action_clamp: bool,
    pub dest_radius: f64,
    pub max_len: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub forest: ForestParams,
    pub bc: BcConfig,
    pub gail: GailConfig,
    pub m_values: Vec<f64>,
    pub repetitions: usize,
    /// Also evaluate the behavioral-cloning initializations, reported as
    /// setting `<setting>-BC`.
    pub eval_bc: bool,
    pub rollout: RolloutMode,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
            data_dir: None,
            scenario: ScenarioSpec::default(),
            settings: vec![Setting::MultPolicies, Setting::OnePolicy],
            dt: 5,
            test_fraction: 0.1,
            clean: CleanConfig::default(),
            action_clamp: true,
            dest_radius: 5_000.0,
            max_len: 1_000,
            k_min: 2,
            k_max: 10,
            forest: ForestParams::default(),
            bc: BcConfig::default(),
            gail: GailConfig::default(),
            m_values: vec![0.0, 0.2, 0.5, 0.7],
            repetitions: 20,
            eval_bc: false,
            rollout: RolloutMode::Stochastic,
            seed: 1,
        }
    }
}

const SCENARIO_PREFIX: &str = "synth.";

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl PipelineConfig {
    /// Reads a configuration; every key must be known, absent keys keep
    /// their defaults.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known = Self::default().to_kv();
        if let Some(k) = kv
            .keys()
            .find(|k| !known.contains(k) && !k.starts_with(SCENARIO_PREFIX) && *k != "data_dir")
        {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
        let d = Self::default();
        let list = |key: &str| -> Result<Option<Vec<usize>>> { kv.get_list(key) };
        let mtry: usize = kv.get_or("forest.mtry", 0)?;
        let cfg = Self {
            run_dir: kv.get_or("run_dir", d.run_dir.display().to_string())?.into(),
            data_dir: kv.get("data_dir").filter(|s| !s.is_empty()).map(PathBuf::from),
            scenario: ScenarioSpec::from_kv(kv, SCENARIO_PREFIX)?,
            settings: kv.get_list("settings")?.unwrap_or(d.settings),
            dt: kv.get_or("dt", d.dt)?,
            test_fraction: kv.get_or("test_fraction", d.test_fraction)?,
            clean: CleanConfig {
                r_near: kv.get_or("r_near", d.clean.r_near)?,
                v_max: kv.get_or("v_max", d.clean.v_max)?,
            },
            action_clamp: kv.get_or("action_clamp", d.action_clamp)?,
            dest_radius: kv.get_or("dest_radius", d.dest_radius)?,
            max_len: kv.get_or("max_len", d.max_len)?,
            k_min: kv.get_or("k_min", d.k_min)?,
            k_max: kv.get_or("k_max", d.k_max)?,
            forest: ForestParams {
                n_trees: kv.get_or("forest.n_trees", d.forest.n_trees)?,
                max_depth: kv.get_or("forest.max_depth", d.forest.max_depth)?,
                min_split: kv.get_or("forest.min_split", d.forest.min_split)?,
                min_leaf: kv.get_or("forest.min_leaf", d.forest.min_leaf)?,
                mtry: (mtry > 0).then_some(mtry),
            },
            bc: BcConfig {
                epochs: kv.get_or("bc.epochs", d.bc.epochs)?,
                folds: kv.get_or("bc.folds", d.bc.folds)?,
                batch_size: kv.get_or("bc.batch_size", d.bc.batch_size)?,
                lr: kv.get_or("bc.lr", d.bc.lr)?,
                hidden: list("bc.hidden")?.unwrap_or(d.bc.hidden),
                log_std: kv.get_or("bc.log_std", d.bc.log_std)?,
            },
            gail: GailConfig {
                iterations: kv.get_or("gail.iterations", d.gail.iterations)?,
                batch_samples: kv.get_or("gail.batch_samples", d.gail.batch_samples)?,
                disc_epochs: kv.get_or("gail.disc_epochs", d.gail.disc_epochs)?,
                disc_batch: kv.get_or("gail.disc_batch", d.gail.disc_batch)?,
                disc_lr: kv.get_or("gail.disc_lr", d.gail.disc_lr)?,
                gamma: kv.get_or("gail.gamma", d.gail.gamma)?,
                lambda: kv.get_or("gail.lambda", d.gail.lambda)?,
                reward: kv.get_or("gail.reward", d.gail.reward)?,
                trpo: crate::imitation::TrpoConfig {
                    max_kl: kv.get_or("gail.max_kl", d.gail.trpo.max_kl)?,
                    cg_iters: kv.get_or("gail.cg_iters", d.gail.trpo.cg_iters)?,
                    cg_damping: kv.get_or("gail.cg_damping", d.gail.trpo.cg_damping)?,
                    backtrack_ratio: kv.get_or("gail.backtrack_ratio", d.gail.trpo.backtrack_ratio)?,
                    backtrack_steps: kv.get_or("gail.backtrack_steps", d.gail.trpo.backtrack_steps)?,
                },
                value_epochs: kv.get_or("gail.value_epochs", d.gail.value_epochs)?,
                value_batch: kv.get_or("gail.value_batch", d.gail.value_batch)?,
                value_lr: kv.get_or("gail.value_lr", d.gail.value_lr)?,
                hidden: list("gail.hidden")?.unwrap_or(d.gail.hidden),
                checkpoint_every: kv.get_or("gail.checkpoint_every", d.gail.checkpoint_every)?,
            },
            m_values: kv.get_list("eval.m_values")?.unwrap_or(d.m_values),
            repetitions: kv.get_or("eval.repetitions", d.repetitions)?,
            eval_bc: kv.get_or("eval.bc_baseline", d.eval_bc)?,
            rollout: kv.get_or("eval.rollout", d.rollout)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a config file, then applies `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut kv = match path {
            Some(p) => KeyValues::parse(
                &fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            )?,
            None => KeyValues::default(),
        };
        for o in overrides {
            kv.apply_override(o)?;
        }
        Self::from_kv(&kv)
    }

    /// Every setting, defaults included.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        let mut set = |k: &str, v: String| kv.set(k, v);
        set("run_dir", self.run_dir.display().to_string());
        if let Some(d) = &self.data_dir {
            set("data_dir", d.display().to_string());
        }
        set("settings", join(&self.settings));
        set("dt", self.dt.to_string());
        set("test_fraction", self.test_fraction.to_string());
        set("r_near", self.clean.r_near.to_string());
        set("v_max", self.clean.v_max.to_string());
        set("action_clamp", self.action_clamp.to_string());
        set("dest_radius", self.dest_radius.to_string());
        set("max_len", self.max_len.to_string());
        set("k_min", self.k_min.to_string());
        set("k_max", self.k_max.to_string());
        set("forest.n_trees", self.forest.n_trees.to_string());
        set("forest.max_depth", self.forest.max_depth.to_string());
        set("forest.min_split", self.forest.min_split.to_string());
        set("forest.min_leaf", self.forest.min_leaf.to_string());
        set("forest.mtry", self.forest.mtry.unwrap_or(0).to_string());
        set("bc.epochs", self.bc.epochs.to_string());
        set("bc.folds", self.bc.folds.to_string());
        set("bc.batch_size", self.bc.batch_size.to_string());
        set("bc.lr", self.bc.lr.to_string());
        set("bc.hidden", join(&self.bc.hidden));
        set("bc.log_std", self.bc.log_std.to_string());
        let g = &self.gail;
        set("gail.iterations", g.iterations.to_string());
        set("gail.batch_samples", g.batch_samples.to_string());
        set("gail.disc_epochs", g.disc_epochs.to_string());
        set("gail.disc_batch", g.disc_batch.to_string());
        set("gail.disc_lr", g.disc_lr.to_string());
        set("gail.gamma", g.gamma.to_string());
        set("gail.lambda", g.lambda.to_string());
        set("gail.reward", g.reward.to_string());
        set("gail.max_kl", g.trpo.max_kl.to_string());
        set("gail.cg_iters", g.trpo.cg_iters.to_string());
        set("gail.cg_damping", g.trpo.cg_damping.to_string());
        set("gail.backtrack_ratio", g.trpo.backtrack_ratio.to_string());
        set("gail.backtrack_steps", g.trpo.backtrack_steps.to_string());
        set("gail.value_epochs", g.value_epochs.to_string());
        set("gail.value_batch", g.value_batch.to_string());
        set("gail.value_lr", g.value_lr.to_string());
        set("gail.hidden", join(&g.hidden));
        set("gail.checkpoint_every", g.checkpoint_every.to_string());
        set("eval.m_values", join(&self.m_values));
        set("eval.repetitions", self.repetitions.to_string());
        set("eval.bc_baseline", self.eval_bc.to_string());
        set("eval.rollout", self.rollout.to_string());
        set("seed", self.seed.to_string());
        self.scenario.write_kv(&mut kv, SCENARIO_PREFIX);
        kv
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.settings.is_empty() {
            return fail("at least one setting is required".into());
        }
        if self.m_values.is_empty() || self.m_values.iter().any(|m| !(0.0..1.0).contains(m)) {
            return fail(format!("M values must lie in [0, 1), got {:?}", self.m_values));
        }
        if self.dt <= 0 || self.repetitions == 0 || self.max_len < 2 || !(self.dest_radius > 0.0) {
            return fail("dt, eval.repetitions, max_len and dest_radius must be positive".into());
        }
        if !(0.0 < self.test_fraction && self.test_fraction < 1.0) {
            return fail(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.k_min < 2 || self.k_max < self.k_min {
            return fail(format!("invalid cluster range [{}, {}]", self.k_min, self.k_max));
        }
        if self.bc.hidden.is_empty() || self.gail.hidden.is_empty() || self.bc.epochs == 0 || self.bc.batch_size == 0 {
            return fail("network sizes and BC epochs must be non-empty".into());
        }
        self.forest.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gail.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn data_path(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.run_dir.join("data"))
    }

    fn preprocessed(&self, file: &str) -> PathBuf {
        self.run_dir.join("preprocessed").join(file)
    }

    pub fn model_dir(&self, setting: Setting) -> PathBuf {
        self.run_dir.join("models").join(setting.dir())
    }

    pub fn cluster_model_path(&self) -> PathBuf {
        self.run_dir.join("clusters").join("cluster_model.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.run_dir.join("metrics.csv")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.run_dir.join("summary.csv")
    }
}

/// Seed for a named sub-task, mixed from the run seed with splitmix64.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const SEED_SPLIT: u64 = 1;
const SEED_FOREST: u64 = 2;
const SEED_BC: u64 = 3;
const SEED_GAIL: u64 = 4;
const SEED_EVAL: u64 = 5;

fn stage<T>(name: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    log::info!("stage {name}");
    let started = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    });
    log::info!("stage {name} finished in {:.1}s", started.elapsed().as_secs_f64());
    out
}

/// Scenario inputs shared by all stages.
pub struct RunData {
    pub spec: ScenarioSpec,
    pub grid: Arc<WeatherGrid>,
    pub arrivals: ArrivalConditionsTable,
}

impl RunData {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let dir = cfg.data_path();
        let kv = KeyValues::parse(&fs::read_to_string(dir.join(synthgen::SCENARIO_FILE))?)?;
        let spec = ScenarioSpec::from_kv(&kv, "")?;
        let grid = Arc::new(WeatherGrid::read(&dir.join(synthgen::WEATHER_FILE))?);
        let arrivals = ArrivalConditionsTable::read(&dir.join(synthgen::ARRIVALS_FILE), spec.bucket_seconds)?;
        Ok(Self { spec, grid, arrivals })
    }

    pub fn env(&self, cfg: &PipelineConfig) -> EnvConfig {
        EnvConfig {
            dt: cfg.dt,
            dest: self.spec.dest,
            dest_radius: cfg.dest_radius,
            max_len: cfg.max_len,
            bbox: self.spec.bbox,
            grid: self.grid.clone(),
            action_bounds: cfg
                .action_clamp
                .then(|| ActionBounds::from_speed(cfg.clean.v_max, cfg.dt, self.spec.dest.lat)),
        }
    }

    /// Reads a preprocessed set and re-attaches each flight's arrival
    /// conditions.
    pub fn read_set(&self, path: &Path) -> Result<Vec<Trajectory>> {
        let (mut trajs, names) = io::read_trajectories(path, self.spec.origin, self.spec.dest)?;
        if names.len() != WEATHER_FEATURES {
            return Err(invalid(format!("{} has {} feature columns", path.display(), names.len())));
        }
        for t in &mut trajs {
            let arrival_t = t.states.last().expect("validated").timestamp;
            t.arrival = Some(self.arrivals.lookup(&self.spec.dest_airport, arrival_t).ok_or_else(|| {
                invalid(format!("no arrival conditions for `{}` at t={arrival_t}", t.id))
            })?);
        }
        Ok(trajs)
    }

    /// Forecast conditions at the estimated arrival time of a flight that
    /// departs at `departure`.
    pub fn forecast(&self, departure: i64, mean_duration: f64) -> Result<(i64, Vec<f64>)> {
        let t_f = departure + mean_duration.round() as i64;
        let a = self
            .arrivals
            .lookup(&self.spec.dest_airport, t_f)
            .ok_or_else(|| invalid(format!("no arrival forecast at t={t_f}")))?;
        Ok((t_f, a.0))
    }
}

pub fn read_train(cfg: &PipelineConfig, data: &RunData) -> Result<Vec<Trajectory>> {
    data.read_set(&cfg.preprocessed("train.csv"))
}

pub fn read_test(cfg: &PipelineConfig, data: &RunData) -> Result<Vec<Trajectory>> {
    data.read_set(&cfg.preprocessed("test.csv"))
}

/// Mean flight duration of a set in seconds.
pub fn mean_duration(trajs: &[Trajectory]) -> f64 {
    trajs.iter().map(|t| t.duration() as f64).sum::<f64>() / trajs.len().max(1) as f64
}

pub fn write_resolved_config(cfg: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(&cfg.run_dir)?;
    fs::write(cfg.run_dir.join("config.conf"), cfg.to_kv().to_text())?;
    Ok(())
}

pub fn stage_synth(cfg: &PipelineConfig) -> Result<()> {
    stage("synth", || {
        if cfg.data_dir.is_some() {
            log::info!("using existing data in {}", cfg.data_path().display());
            return Ok(());
        }
        let s = synthgen::generate(&cfg.scenario)?;
        synthgen::write_scenario(&cfg.data_path(), &cfg.scenario, &s)
    })
}

/// Resample, clean, enrich, then split into train and test sets,
/// stratified by the scenario's labels.
pub fn stage_preprocess(cfg: &PipelineConfig) -> Result<()> {
    stage("preprocess", || {
        let data = RunData::load(cfg)?;
        let dir = cfg.data_path();
        let (raw, _) = io::read_trajectories(&dir.join(synthgen::TRAJECTORIES_FILE), data.spec.origin, data.spec.dest)?;
        let labels: std::collections::BTreeMap<String, usize> =
            io::read_labels(&dir.join(synthgen::LABELS_FILE))?.into_iter().collect();
        let resampled = raw.iter().map(|t| resample(t, cfg.dt)).collect::<Result<Vec<_>>>()?;
        let report = clean(&resampled, &data.spec.origin, &data.spec.dest, &cfg.clean);
        let enriched = report
            .kept
            .iter()
            .map(|t| enrich(t, &data.grid, &data.arrivals, &data.spec.dest_airport))
            .collect::<Result<Vec<_>>>()?;
        let y = enriched
            .iter()
            .map(|t| labels.get(&t.id).copied().ok_or_else(|| invalid(format!("no label for `{}`", t.id))))
            .collect::<Result<Vec<_>>>()?;
        let (train, test) = synthgen::split(&y, cfg.test_fraction, derive_seed(cfg.seed, &[SEED_SPLIT]))?;
        let out = cfg.run_dir.join("preprocessed");
        fs::create_dir_all(&out)?;
        let names: Vec<String> = WEATHER_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
        let pick = |idx: &[usize]| idx.iter().map(|&i| enriched[i].clone()).collect::<Vec<_>>();
        io::write_trajectories(&out.join("train.csv"), &pick(&train), &names)?;
        io::write_trajectories(&out.join("test.csv"), &pick(&test), &names)?;
        let mut w = csv::Writer::from_path(out.join("rejected.csv"))?;
        w.write_record(["traj_id", "reason"])?;
        for (id, r) in &report.rejected {
            w.write_record([id.as_str(), r.code()])?;
        }
        w.flush()?;
        log::info!(
            "kept {} of {} flights ({} train, {} test)",
            enriched.len(),
            raw.len(),
            train.len(),
            test.len()
        );
        Ok(())
    })
}

pub fn stage_cluster(cfg: &PipelineConfig) -> Result<ClusterModel> {
    stage("cluster", || {
        let data = RunData::load(cfg)?;
        let train = read_train(cfg, &data)?;
        let space = DtwSpace::fit(&train, DtwDim::position_and_features(WEATHER_FEATURES))?;
        let d = DistanceMatrix::ndtw(&train, &space)?;
        let hi = cfg.k_max.min(train.len().saturating_sub(1));
        if hi < cfg.k_min {
            return Err(invalid(format!("{} training flights cannot form {} clusters", train.len(), cfg.k_min)));
        }
        let model = select_k(&d, cfg.k_min..=hi)?;
        log::info!("selected K={} with sizes {:?}", model.k, model.cluster_sizes());
        let path = cfg.cluster_model_path();
        fs::create_dir_all(path.parent().expect("nested path"))?;
        model.save(&path)?;
        Ok(model)
    })
}

fn classifier_rows(data: &RunData, trajs: &[Trajectory], mean_dur: f64) -> Result<Vec<Vec<f64>>> {
    trajs
        .iter()
        .map(|t| {
            let (t_f, a) = data.forecast(t.states[0].timestamp, mean_dur)?;
            classifier_row(&a, t_f)
        })
        .collect()
}

/// Trains the mode classifier on the clustered training flights.
pub fn stage_classifier(cfg: &PipelineConfig) -> Result<ForestModel> {
    stage("classifier", || {
        let data = RunData::load(cfg)?;
        let train = read_train(cfg, &data)?;
        let clusters = ClusterModel::load(&cfg.cluster_model_path())?;
        let y = cluster_labels(&clusters, &train)?;
        let x = classifier_rows(&data, &train, mean_duration(&train))?;
        let model = train_forest(&x, &y, feature_names(), cfg.forest, derive_seed(cfg.seed, &[SEED_FOREST]))?;
        log::info!("forest trained, out-of-bag accuracy {:?}", model.oob_accuracy);
        let dir = cfg.model_dir(Setting::MultPolicies);
        fs::create_dir_all(&dir)?;
        model.save(&dir.join("forest.json"))?;
        Ok(model)
    })
}

fn cluster_labels(clusters: &ClusterModel, trajs: &[Trajectory]) -> Result<Vec<usize>> {
    trajs
        .iter()
        .map(|t| {
            clusters
                .label_of(&t.id)
                .ok_or_else(|| invalid(format!("flight `{}` is not in the cluster model", t.id)))
        })
        .collect()
}

/// Training flights of each policy of a setting.
fn policy_groups(cfg: &PipelineConfig, setting: Setting, train: &[Trajectory]) -> Result<Vec<Vec<Trajectory>>> {
    match setting {
        Setting::OnePolicy => Ok(vec![train.to_vec()]),
        Setting::MultPolicies => {
            let clusters = ClusterModel::load(&cfg.cluster_model_path())?;
            let labels = cluster_labels(&clusters, train)?;
            let mut groups = vec![Vec::new(); clusters.k];
            for (t, l) in train.iter().zip(labels) {
                groups[l].push(t.clone());
            }
            Ok(groups)
        }
    }
}

fn policy_path(cfg: &PipelineConfig, setting: Setting, bc: bool, c: usize) -> PathBuf {
    let dir = cfg.model_dir(setting);
    let dir = if bc { dir.join("bc") } else { dir };
    dir.join(format!("policy_{c}.json"))
}

/// What a prediction needs besides the data: the setting's policies, its
/// observation layout and, for MultPolicies, the classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyMeta {
    pub setting: Setting,
    pub layout: ObsLayout,
    pub n_policies: usize,
    /// Mean training flight duration, used to date the arrival forecast.
    pub mean_duration: f64,
}

pub fn stage_bc(cfg: &PipelineConfig) -> Result<()> {
    stage("train-bc", || {
        let data = RunData::load(cfg)?;
        let train = read_train(cfg, &data)?;
        for &setting in &cfg.settings {
            let layout = setting.layout();
            let groups = policy_groups(cfg, setting, &train)?;
            fs::create_dir_all(cfg.model_dir(setting).join("bc"))?;
            for (c, group) in groups.iter().enumerate() {
                let demos = crate::env::demonstrations(group, &layout)?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_BC, setting.index(), c as u64]));
                let out = train_bc(&demos, &cfg.bc, &mut rng)?;
                log::info!(
                    "{setting} policy {c}: {} flights, BC validation MSE {:.4}",
                    group.len(),
                    out.fold_mse[out.selected_fold]
                );
                out.policy.save(&policy_path(cfg, setting, true, c))?;
            }
            let meta = PolicyMeta {
                setting,
                layout,
                n_policies: groups.len(),
                mean_duration: mean_duration(&train),
            };
            save_json(&cfg.model_dir(setting).join("meta.json"), "policy_meta", &meta)?;
        }
        Ok(())
    })
}

pub fn stage_gail(cfg: &PipelineConfig) -> Result<()> {
    stage("train-gail", || {
        let data = RunData::load(cfg)?;
        let train = read_train(cfg, &data)?;
        let env = data.env(cfg);
        for &setting in &cfg.settings {
            let meta: PolicyMeta = load_json(&cfg.model_dir(setting).join("meta.json"), "policy_meta")?;
            let groups = policy_groups(cfg, setting, &train)?;
            if groups.len() != meta.n_policies {
                return Err(invalid(format!(
                    "{setting}: {} behavioral-cloning policies for {} groups",
                    meta.n_policies,
                    groups.len()
                )));
            }
            for (c, group) in groups.iter().enumerate() {
                let init = GaussianPolicy::load(&policy_path(cfg, setting, true, c))?;
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[SEED_GAIL, setting.index(), c as u64]));
                let dir = cfg.model_dir(setting);
                let mut hooks = GailHooks {
                    diagnostics: Some(DiagnosticsWriter::create(&dir.join(format!("gail_{c}.csv")))?),
                    checkpoint_dir: (cfg.gail.checkpoint_every > 0).then(|| dir.join(format!("checkpoints_{c}"))),
                    on_update: None,
                };
                let out = train_gail(init, group, &env, &meta.layout, &cfg.gail, &mut rng, &mut hooks)?;
                if let Some(last) = out.diagnostics.last() {
                    log::info!(
                        "{setting} policy {c}: {} GAIL iterations, last batch reached {:.2}",
                        out.diagnostics.len(),
                        last.fraction_reached
                    );
                }
                out.policy.save(&policy_path(cfg, setting, false, c))?;
            }
        }
        Ok(())
    })
}

/// A setting's trained models, ready to predict.
pub struct Predictor {
    pub meta: PolicyMeta,
    pub policies: Vec<GaussianPolicy>,
    pub forest: Option<ForestModel>,
}

/// A predicted flight and how it was produced.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub trajectory: Trajectory,
    pub termination: Termination,
    /// Policy index used (the predicted cluster for MultPolicies).
    pub policy: usize,
    pub start_index: usize,
}

impl Predictor {
    /// Loads the GAIL policies, or the behavioral-cloning ones with `bc`.
    pub fn load(cfg: &PipelineConfig, setting: Setting, bc: bool) -> Result<Self> {
        let meta: PolicyMeta = load_json(&cfg.model_dir(setting).join("meta.json"), "policy_meta")?;
        let policies = (0..meta.n_policies)
            .map(|c| GaussianPolicy::load(&policy_path(cfg, setting, bc, c)))
            .collect::<Result<Vec<_>>>()?;
        if let Some(p) = policies.iter().find(|p| p.obs_dim() != meta.layout.dim()) {
            return Err(invalid(format!(
                "policy expects {} inputs, {setting} observations have {}",
                p.obs_dim(),
                meta.layout.dim()
            )));
        }
        let forest = match setting {
            Setting::MultPolicies => Some(ForestModel::load(&cfg.model_dir(setting).join("forest.json"))?),
            Setting::OnePolicy => None,
        };
        Ok(Self { meta, policies, forest })
    }

    /// Policy for a flight departing at `departure`, and the forecast
    /// arrival conditions it was chosen with.
    pub fn select(&self, data: &RunData, departure: i64) -> Result<(usize, Vec<f64>)> {
        let (t_f, arrival) = data.forecast(departure, self.meta.mean_duration)?;
        let c = match &self.forest {
            Some(f) => f.predict(&classifier_row(&arrival, t_f)?)?.class,
            None => 0,
        };
        if c >= self.policies.len() {
            return Err(invalid(format!("classifier chose mode {c} of {}", self.policies.len())));
        }
        Ok((c, arrival))
    }

    /// Rolls out the selected policy from the state at fraction `m` of
    /// `test` until an episode termination rule fires.
    pub fn predict(
        &self,
        data: &RunData,
        env: &EnvConfig,
        test: &Trajectory,
        m: f64,
        mode: RolloutMode,
        seed: u64,
    ) -> Result<Prediction> {
        let (c, arrival) = self.select(data, test.states[0].timestamp)?;
        let mut init = evaluation_start(test, m)?;
        init.context.arrival = Some(arrival);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let policy = &self.policies[c];
        let ep: Episode = match mode {
            RolloutMode::Stochastic => run_episode(policy, env, &self.meta.layout, &init, &mut rng)?,
            RolloutMode::Mean => run_episode(&MeanPolicy(policy), env, &self.meta.layout, &init, &mut rng)?,
        };
        Ok(Prediction {
            trajectory: ep.to_trajectory(&format!("{}_pred", test.id), test.origin, test.destination),
            termination: ep.termination,
            policy: c,
            start_index: init.state_index,
        })
    }
}

/// The part of `t` from state `start` on.
pub fn suffix(t: &Trajectory, start: usize) -> Trajectory {
    Trajectory {
        id: t.id.clone(),
        states: t.states[start..].to_vec(),
        origin: t.origin,
        destination: t.destination,
        arrival: t.arrival.clone(),
    }
}

/// Seed of one evaluation rollout.
pub fn eval_seed(cfg: &PipelineConfig, setting: Setting, m_index: usize, repetition: usize, test_index: usize) -> u64 {
    derive_seed(
        cfg.seed,
        &[SEED_EVAL, setting.index(), m_index as u64, repetition as u64, test_index as u64],
    )
}

/// Scores one prediction against the matching part of its test flight.
pub fn score(
    setting_name: &str,
    m: f64,
    repetition: usize,
    test: &Trajectory,
    seed: u64,
    p: &Prediction,
    reference: &GeoPosition,
    dt: i64,
) -> Result<MetricsRecord> {
    let actual = suffix(test, p.start_index);
    let e = evaluate(&p.trajectory, &actual, reference, dt)?;
    Ok(MetricsRecord {
        setting: setting_name.to_string(),
        m,
        repetition,
        test_id: test.id.clone(),
        seed,
        cluster: p.policy as i64,
        termination: p.termination.code().to_string(),
        pred_len: p.trajectory.len(),
        rmse_lon: e.rmse.lon,
        rmse_lat: e.rmse.lat,
        rmse_alt: e.rmse.alt,
        rmse_3d: e.rmse.d3,
        ate: e.track.ate,
        cte: e.track.cte,
        v: e.track.v,
        eta_error: e.eta_error,
    })
}

/// Every setting at every M, `repetitions` rollouts per test flight.
pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<Vec<MetricsRecord>> {
    stage("evaluate", || {
        let data = RunData::load(cfg)?;
        let test = read_test(cfg, &data)?;
        let env = data.env(cfg);
        let mut records = Vec::new();
        for &setting in &cfg.settings {
            let mut variants = vec![(setting.name().to_string(), Predictor::load(cfg, setting, false)?)];
            if cfg.eval_bc {
                variants.push((format!("{setting}-BC"), Predictor::load(cfg, setting, true)?));
            }
            for (name, predictor) in &variants {
                for (mi, &m) in cfg.m_values.iter().enumerate() {
                    for rep in 0..cfg.repetitions {
                        for (ti, t) in test.iter().enumerate() {
                            let seed = eval_seed(cfg, setting, mi, rep, ti);
                            let p = predictor.predict(&data, &env, t, m, cfg.rollout, seed)?;
                            records.push(score(name, m, rep, t, seed, &p, &data.spec.dest, cfg.dt)?);
                        }
                    }
                }
            }
        }
        write_csv(&cfg.metrics_path(), &records)?;
        write_csv(&cfg.summary_path(), &summarize(&records)?)?;
        Ok(records)
    })
}

/// Runs every stage in order. Artifacts of finished stages stay on disk
/// when a later stage fails.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    write_resolved_config(cfg)?;
    stage_synth(cfg)?;
    stage_preprocess(cfg)?;
    if cfg.settings.contains(&Setting::MultPolicies) {
        stage_cluster(cfg)?;
        stage_classifier(cfg)?;
    }
    stage_bc(cfg)?;
    stage_gail(cfg)?;
    stage_evaluate(cfg)
}
