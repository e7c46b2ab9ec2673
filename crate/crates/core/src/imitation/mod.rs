//! Behavioral cloning, advantage estimation, trust-region policy steps and
//! the adversarial imitation loop that ties them together.

mod bc;
mod cg;
mod gae;
mod trpo;

pub use bc::{train_bc, BcConfig, BcOutcome};
pub use cg::{conjugate_gradient, CgSolution};
pub use gae::{gae, AdvantageSeries};
pub use trpo::{trpo_step, TrpoConfig, TrpoReport};

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{collect, demonstrations, EnvConfig, ObsLayout, RolloutBatch};
use crate::error::{invalid, Result};
use crate::geo::Trajectory;
use crate::neural::{save_json, Adam, Discriminator, GaussianPolicy, RewardForm, ValueNet};
use crate::preprocess::Standardizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GailConfig {
    pub iterations: usize,
    pub batch_samples: usize,
    pub disc_epochs: usize,
    pub disc_batch: usize,
    pub disc_lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub reward: RewardForm,
    pub trpo: TrpoConfig,
    pub value_epochs: usize,
    pub value_batch: usize,
    pub value_lr: f64,
    /// Hidden layers of the discriminator and the critic.
    pub hidden: Vec<usize>,
    /// Save networks every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for GailConfig {
    fn default() -> Self {
        Self {
            iterations: 1500,
            batch_samples: 50_000,
            disc_epochs: 100,
            disc_batch: 256,
            disc_lr: 3e-4,
            gamma: 0.995,
            lambda: 0.97,
            reward: RewardForm::Logit,
            trpo: TrpoConfig::default(),
            value_epochs: 5,
            value_batch: 256,
            value_lr: 1e-3,
            hidden: vec![100, 100],
            checkpoint_every: 0,
        }
    }
}

impl GailConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.iterations,
            self.batch_samples,
            self.disc_epochs,
            self.disc_batch,
            self.trpo.cg_iters,
            self.trpo.backtrack_steps,
            self.value_batch,
        ];
        if counts.contains(&0) {
            return Err(invalid("GAIL counts must be positive"));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.gamma) || !unit(self.lambda) || !(self.trpo.max_kl > 0.0) || !unit(self.trpo.backtrack_ratio) {
            return Err(invalid("GAIL gamma, lambda, backtrack ratio must lie in [0, 1] and max_kl > 0"));
        }
        Ok(())
    }
}

/// One row of the training diagnostics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub episodes: usize,
    pub samples: usize,
    pub mean_episode_length: f64,
    pub fraction_reached: f64,
    pub mean_d_policy: f64,
    pub mean_d_expert: f64,
    pub disc_loss: f64,
    pub value_loss: f64,
    pub mean_reward: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    pub kl: f64,
    pub accepted: bool,
    pub step_fraction: f64,
}

/// CSV sink that flushes after every row, so a crash keeps the history.
pub struct DiagnosticsWriter {
    inner: csv::Writer<File>,
}

impl DiagnosticsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            inner: csv::Writer::from_path(path)?,
        })
    }

    pub fn write(&mut self, row: &IterationDiagnostics) -> Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

/// Everything a policy update saw, for callers that audit the steps.
pub struct PolicyUpdate<'a> {
    pub iteration: usize,
    pub before: &'a GaussianPolicy,
    pub after: &'a GaussianPolicy,
    pub obs_n: &'a Array2<f64>,
    pub actions_n: &'a Array2<f64>,
    /// Standardized advantages the step was taken on.
    pub advantages: &'a [f64],
    pub report: &'a TrpoReport,
}

#[derive(Default)]
pub struct GailHooks {
    pub diagnostics: Option<DiagnosticsWriter>,
    pub checkpoint_dir: Option<PathBuf>,
    pub on_update: Option<Box<dyn FnMut(&PolicyUpdate<'_>)>>,
}

#[derive(Debug, Clone)]
pub struct GailOutcome {
    pub policy: GaussianPolicy,
    pub value: ValueNet,
    pub discriminator: Discriminator,
    pub diagnostics: Vec<IterationDiagnostics>,
}

fn concat_rows(obs: &[f64], action: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(obs.len() + action.len());
    v.extend_from_slice(obs);
    v.extend_from_slice(action);
    v
}

fn batch_rows(batch: &RolloutBatch) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut disc = Vec::with_capacity(batch.n_samples);
    let mut obs = Vec::with_capacity(batch.n_samples);
    let mut draws = Vec::with_capacity(batch.n_samples);
    for e in &batch.episodes {
        for t in 0..e.len() {
            disc.push(concat_rows(&e.observations[t], &e.actions[t].to_array()));
            obs.push(e.observations[t].clone());
            draws.push(e.samples[t].clone());
        }
    }
    (disc, obs, draws)
}

fn mean(v: &Array1<f64>) -> f64 {
    v.mean().unwrap_or(0.0)
}

/// Adversarial imitation starting from `policy` (normally BC-initialized).
///
/// Each iteration collects `batch_samples` actions, updates the
/// discriminator, scores every step with a reward derived from `D`, fits the critic on
/// discounted returns, estimates GAE advantages (terminal value 0,
/// standardized over the batch) and takes one TRPO step.
pub fn train_gail(
    mut policy: GaussianPolicy,
    demos: &[Trajectory],
    env: &EnvConfig,
    layout: &ObsLayout,
    cfg: &GailConfig,
    rng: &mut ChaCha8Rng,
    hooks: &mut GailHooks,
) -> Result<GailOutcome> {
    cfg.validate()?;
    env.validate()?;
    if policy.obs_dim() != layout.dim() {
        return Err(invalid(format!(
            "policy expects {} inputs, observation layout has {}",
            policy.obs_dim(),
            layout.dim()
        )));
    }
    let expert_rows: Vec<Vec<f64>> = demonstrations(demos, layout)?
        .into_iter()
        .map(|(o, a)| concat_rows(&o, &a.to_array()))
        .collect();
    if expert_rows.is_empty() {
        return Err(invalid("GAIL needs demonstrations"));
    }
    let mut disc = Discriminator::new(&cfg.hidden, Standardizer::fit_lenient(&expert_rows)?, rng)?;
    let expert = disc.inputs(&expert_rows)?;
    let mut disc_adam = Adam::new(disc.net.n_params(), cfg.disc_lr);
    let mut value = ValueNet::new(&cfg.hidden, policy.obs_norm.clone(), rng)?;
    let mut value_adam = Adam::new(value.net.n_params(), cfg.value_lr);
    let mut history = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let batch = collect(&policy, env, layout, demos, cfg.batch_samples, rng)?;
        let (disc_rows, obs_rows, draws) = batch_rows(&batch);
        let policy_x = disc.inputs(&disc_rows)?;
        let disc_loss = disc.train(&mut disc_adam, &policy_x, &expert, cfg.disc_epochs, cfg.disc_batch, rng)?;
        let rewards = disc.rewards(&policy_x, cfg.reward)?;
        let mean_d_policy = mean(&disc.probs(&policy_x)?);
        let mean_d_expert = mean(&disc.probs(&expert)?);

        // critic values for every visited state, terminal states included
        let all_obs: Vec<Vec<f64>> = batch.episodes.iter().flat_map(|e| e.observations.iter().cloned()).collect();
        let values = value.predict(&value.inputs(&all_obs)?)?;
        let mut advantages = Vec::with_capacity(batch.n_samples);
        let mut returns = Vec::with_capacity(batch.n_samples);
        let (mut r_off, mut v_off) = (0, 0);
        for e in &batch.episodes {
            let n = e.len();
            let mut v: Vec<f64> = values.slice(ndarray::s![v_off..v_off + n + 1]).to_vec();
            v[n] = 0.0;
            let series = gae(&rewards.as_slice().expect("contiguous")[r_off..r_off + n], &v, cfg.gamma, cfg.lambda)?;
            advantages.extend(series.advantages);
            returns.extend(series.returns);
            r_off += n;
            v_off += n + 1;
        }
        let value_x = value.inputs(&obs_rows)?;
        let value_loss = value.fit(
            &mut value_adam,
            &value_x,
            &Array1::from(returns),
            cfg.value_epochs,
            cfg.value_batch,
            rng,
        )?;

        let n = advantages.len() as f64;
        let a_mean = advantages.iter().sum::<f64>() / n;
        let a_std = (advantages.iter().map(|a| (a - a_mean).powi(2)).sum::<f64>() / n).sqrt();
        let adv: Vec<f64> = advantages.iter().map(|a| (a - a_mean) / (a_std + 1e-8)).collect();
        let obs_n = policy.normalize_obs_batch(&obs_rows)?;
        let act_dim = policy.act_dim();
        let act_n = Array2::from_shape_vec((draws.len(), act_dim), draws.concat())
            .map_err(|_| invalid("policy draws have inconsistent width"))?;
        let before = hooks.on_update.is_some().then(|| policy.clone());
        let report = trpo_step(&mut policy, &obs_n, &act_n, &adv, &cfg.trpo)?;
        if let (Some(f), Some(before)) = (hooks.on_update.as_mut(), before.as_ref()) {
            f(&PolicyUpdate {
                iteration,
                before,
                after: &policy,
                obs_n: &obs_n,
                actions_n: &act_n,
                advantages: &adv,
                report: &report,
            });
        }

        let row = IterationDiagnostics {
            iteration,
            episodes: batch.episodes.len(),
            samples: batch.n_samples,
            mean_episode_length: batch.mean_length(),
            fraction_reached: batch.fraction_reached(),
            mean_d_policy,
            mean_d_expert,
            disc_loss,
            value_loss,
            mean_reward: mean(&rewards),
            surrogate_before: report.surrogate_before,
            surrogate_after: report.surrogate_after,
            kl: report.kl,
            accepted: report.accepted,
            step_fraction: report.step_fraction,
        };
        log::debug!(
            "gail iter {iteration}: reached {:.2} len {:.1} D(pi) {:.3} D(E) {:.3} kl {:.4}",
            row.fraction_reached,
            row.mean_episode_length,
            row.mean_d_policy,
            row.mean_d_expert,
            row.kl
        );
        if let Some(w) = hooks.diagnostics.as_mut() {
            w.write(&row)?;
        }
        history.push(row);
        if cfg.checkpoint_every > 0 && (iteration + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &hooks.checkpoint_dir {
                let d = dir.join(format!("iter_{:05}", iteration + 1));
                fs::create_dir_all(&d)?;
                policy.save(&d.join("policy.json"))?;
                disc.save(&d.join("discriminator.json"))?;
                value.save(&d.join("value.json"))?;
                save_json(&d.join("optimizers.json"), "optimizers", &(&disc_adam, &value_adam))?;
            }
        }
    }
    Ok(GailOutcome {
        policy,
        value,
        discriminator: disc,
        diagnostics: history,
    })
}
