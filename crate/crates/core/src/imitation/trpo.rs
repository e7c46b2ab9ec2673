use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::cg::conjugate_gradient;
use crate::error::{invalid, Error, Result};
use crate::neural::GaussianPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrpoConfig {
    pub max_kl: f64,
    pub cg_iters: usize,
    pub cg_damping: f64,
    pub backtrack_ratio: f64,
    pub backtrack_steps: usize,
}

impl Default for TrpoConfig {
    fn default() -> Self {
        Self {
            max_kl: 0.01,
            cg_iters: 10,
            cg_damping: 0.1,
            backtrack_ratio: 0.5,
            backtrack_steps: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrpoReport {
    pub accepted: bool,
    /// Mean KL(old || new) of the accepted candidate, 0 when rejected.
    pub kl: f64,
    pub surrogate_before: f64,
    pub surrogate_after: f64,
    /// Fraction of the full trust-region step that was taken.
    pub step_fraction: f64,
    /// Solution of the damped Fisher system, before trust-region scaling.
    pub direction: Vec<f64>,
    pub gradient_norm: f64,
}

fn surrogate(policy: &GaussianPolicy, means: &Array2<f64>, actions_n: &Array2<f64>, old_logp: &[f64], adv: &[f64]) -> f64 {
    let logp = policy.logprob_rows(means, actions_n);
    let n = adv.len().max(1) as f64;
    logp.iter()
        .zip(old_logp)
        .zip(adv)
        .map(|((lp, olp), a)| (lp - olp).exp() * a)
        .sum::<f64>()
        / n
}

/// One KL-constrained natural-gradient ascent step on the importance
/// sampled surrogate `mean(pi/pi_old * A)`.
///
/// `obs_n` are standardized observations and `actions_n` the standardized
/// draws that were executed. On rejection the policy is left untouched.
pub fn trpo_step(
    policy: &mut GaussianPolicy,
    obs_n: &Array2<f64>,
    actions_n: &Array2<f64>,
    advantages: &[f64],
    cfg: &TrpoConfig,
) -> Result<TrpoReport> {
    let n = obs_n.nrows();
    if n == 0 || actions_n.nrows() != n || advantages.len() != n {
        return Err(invalid("TRPO needs a non-empty batch with one advantage per sample"));
    }
    let cache = policy.mean_cached(obs_n.clone())?;
    let old_means = cache.output().clone();
    let old_logp = policy.logprob_rows(&old_means, actions_n).to_vec();
    let before = surrogate(policy, &old_means, actions_n, &old_logp, advantages);
    if !before.is_finite() {
        return Err(Error::NonFinite("surrogate"));
    }
    let weights: Vec<f64> = advantages.iter().map(|a| a / n as f64).collect();
    let g = policy.weighted_logprob_grad(&cache, actions_n, &weights)?;
    let gradient_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rejected = |direction: Vec<f64>| TrpoReport {
        accepted: false,
        kl: 0.0,
        surrogate_before: before,
        surrogate_after: before,
        step_fraction: 0.0,
        direction,
        gradient_norm,
    };
    if gradient_norm == 0.0 {
        return Ok(rejected(vec![0.0; g.len()]));
    }

    let damping = cfg.cg_damping;
    let fvp = |v: &[f64]| -> Result<Vec<f64>> {
        let mut f = policy.fisher_vector_product(&cache, v)?;
        f.iter_mut().zip(v).for_each(|(fi, vi)| *fi += damping * vi);
        Ok(f)
    };
    let x = conjugate_gradient(fvp, &g, cfg.cg_iters, 1e-10)?.x;
    let fx = fvp(&x)?;
    let xfx: f64 = x.iter().zip(&fx).map(|(a, b)| a * b).sum();
    if !(xfx > 0.0) || !xfx.is_finite() {
        return Ok(rejected(x));
    }
    let scale = (2.0 * cfg.max_kl / xfx).sqrt();
    let old_params = policy.net.params();
    let mut frac = 1.0;
    for _ in 0..cfg.backtrack_steps {
        let candidate: Vec<f64> = old_params.iter().zip(&x).map(|(p, d)| p + frac * scale * d).collect();
        policy.net.set_params(&candidate)?;
        let means = policy.net.forward_batch(obs_n.view())?;
        let after = surrogate(policy, &means, actions_n, &old_logp, advantages);
        if !after.is_finite() {
            policy.net.set_params(&old_params)?;
            return Err(Error::NonFinite("surrogate"));
        }
        let kl = policy.mean_kl(&old_means, &means);
        if after > before && kl <= cfg.max_kl {
            return Ok(TrpoReport {
                accepted: true,
                kl,
                surrogate_before: before,
                surrogate_after: after,
                step_fraction: frac,
                direction: x,
                gradient_norm,
            });
        }
        frac *= cfg.backtrack_ratio;
    }
    policy.net.set_params(&old_params)?;
    Ok(rejected(x))
}
