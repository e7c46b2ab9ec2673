use std::f64::consts::PI;

use ndarray::{Array1, Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Activation, ForwardCache, Mlp};
use crate::error::{Error, Result};
use crate::preprocess::Standardizer;

pub const DEFAULT_LOG_STD: f64 = 0.9;

/// Diagonal Gaussian log density.
pub fn gaussian_logprob(mean: &[f64], log_std: &[f64], x: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(x)
        .map(|((m, ls), v)| {
            let z = (v - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * (2.0 * PI).ln()
        })
        .sum()
}

/// Stochastic policy: an MLP gives the mean of a Gaussian with a fixed
/// per-dimension log standard deviation. Observations and actions are
/// standardized; the Gaussian lives in standardized action units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub net: Mlp,
    pub obs_norm: Standardizer,
    pub act_norm: Standardizer,
    pub log_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample {
    /// Action in raw units.
    pub action: Vec<f64>,
    /// The same draw in standardized units.
    pub normalized: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(
        hidden: &[usize],
        obs_norm: Standardizer,
        act_norm: Standardizer,
        log_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut sizes = vec![obs_norm.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(act_norm.dim());
        let act_dim = act_norm.dim();
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Tanh, rng)?,
            obs_norm,
            act_norm,
            log_std: vec![log_std; act_dim],
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.obs_dim() {
            return Err(Error::Shape {
                context: "policy observation",
                expected: self.obs_dim(),
                got: obs.len(),
            });
        }
        Ok(())
    }

    /// Standardized mean action for a raw observation.
    pub fn mean_normalized(&self, obs: &[f64]) -> Result<Vec<f64>> {
        self.check_obs(obs)?;
        self.net.forward(&self.obs_norm.apply(obs))
    }

    /// Mean action in raw units.
    pub fn mean_action(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.act_norm.invert(&self.mean_normalized(obs)?))
    }

    pub fn sample(&self, obs: &[f64], rng: &mut impl Rng) -> Result<PolicySample> {
        let mean = self.mean_normalized(obs)?;
        let normalized: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Ok(PolicySample {
            action: self.act_norm.invert(&normalized),
            normalized,
        })
    }

    /// Log density of a standardized action.
    pub fn logprob_normalized(&self, obs: &[f64], action_n: &[f64]) -> Result<f64> {
        Ok(gaussian_logprob(&self.mean_normalized(obs)?, &self.log_std, action_n))
    }

    /// Log density (in standardized action space) of a raw action.
    pub fn logprob(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        self.logprob_normalized(obs, &self.act_norm.apply(action))
    }

    pub fn normalize_obs_batch(&self, obs: &[Vec<f64>]) -> Result<Array2<f64>> {
        let mut x = Array2::zeros((obs.len(), self.obs_dim()));
        for (mut row, o) in x.rows_mut().into_iter().zip(obs) {
            self.check_obs(o)?;
            self.obs_norm.apply_into(o, row.as_slice_mut().expect("standard layout"));
        }
        Ok(x)
    }

    /// Forward pass over standardized observations.
    pub fn mean_cached(&self, obs_n: Array2<f64>) -> Result<ForwardCache> {
        self.net.forward_cached(obs_n)
    }

    /// Row-wise log densities given batch means.
    pub fn logprob_rows(&self, means: &Array2<f64>, actions_n: &Array2<f64>) -> Array1<f64> {
        let c: f64 = self.log_std.iter().map(|ls| -ls - 0.5 * (2.0 * PI).ln()).sum();
        let inv_var: Vec<f64> = self.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
        Array1::from_iter(means.rows().into_iter().zip(actions_n.rows()).map(|(m, a)| {
            c - 0.5
                * m.iter()
                    .zip(a.iter())
                    .zip(&inv_var)
                    .map(|((m, a), iv)| (a - m) * (a - m) * iv)
                    .sum::<f64>()
        }))
    }

    /// Gradient of `sum_i w_i log pi(a_i | s_i)` with respect to the mean
    /// network parameters.
    pub fn weighted_logprob_grad(&self, cache: &ForwardCache, actions_n: &Array2<f64>, w: &[f64]) -> Result<Vec<f64>> {
        let mut up = actions_n - cache.output();
        for (d, ls) in self.log_std.iter().enumerate() {
            let iv = (-2.0 * ls).exp();
            Zip::from(up.column_mut(d)).and(w).for_each(|u, &wi| *u *= iv * wi);
        }
        Ok(self.net.backward(cache, up.view())?.0)
    }

    /// Mean KL(old || new) between Gaussians with shared fixed std.
    pub fn mean_kl(&self, old_means: &Array2<f64>, new_means: &Array2<f64>) -> f64 {
        let inv_var: Vec<f64> = self.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
        let mut total = 0.0;
        for (o, n) in old_means.rows().into_iter().zip(new_means.rows()) {
            for ((a, b), iv) in o.iter().zip(n.iter()).zip(&inv_var) {
                total += 0.5 * (a - b) * (a - b) * iv;
            }
        }
        total / old_means.nrows().max(1) as f64
    }

    /// Product of the mean-KL Hessian (the Fisher matrix for a fixed-std
    /// Gaussian) with `v`: `J^T S^-1 J v / N`.
    pub fn fisher_vector_product(&self, cache: &ForwardCache, v: &[f64]) -> Result<Vec<f64>> {
        let mut jv = self.net.jvp(cache, v)?;
        let n = jv.nrows().max(1) as f64;
        for (d, ls) in self.log_std.iter().enumerate() {
            let iv = (-2.0 * ls).exp() / n;
            jv.column_mut(d).mapv_inplace(|x| x * iv);
        }
        Ok(self.net.backward(cache, jv.view())?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> GaussianPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianPolicy::new(
            &[8, 8],
            Standardizer {
                mean: vec![1.0, 2.0, 0.0, -1.0],
                std: vec![2.0, 0.5, 1.0, 3.0],
            },
            Standardizer {
                mean: vec![0.01, -0.02, 5.0],
                std: vec![0.001, 0.002, 10.0],
            },
            DEFAULT_LOG_STD,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn logprob_at_mean() {
        let p = policy(0);
        let obs = [0.3, 1.0, -2.0, 4.0];
        let mean = p.mean_action(&obs).unwrap();
        let lp = p.logprob(&obs, &mean).unwrap();
        let expected = -0.5 * 3.0 * (2.0 * PI).ln() - 3.0 * 0.9;
        assert!((lp - expected).abs() < 1e-9, "{lp} {expected}");
    }

    #[test]
    fn sample_mean_converges() {
        let p = policy(1);
        let obs = [0.0, 2.5, 1.0, 0.0];
        let mean = p.mean_normalized(&obs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let s = p.sample(&obs, &mut rng).unwrap();
            for d in 0..3 {
                acc[d] += s.normalized[d];
            }
        }
        let tol = 3.0 * 0.9f64.exp() / (n as f64).sqrt();
        for d in 0..3 {
            assert!((acc[d] / n as f64 - mean[d]).abs() < tol);
        }
    }

    #[test]
    fn batch_logprob_matches_single() {
        let p = policy(2);
        let obs = vec![vec![0.0, 1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.2, 9.0]];
        let acts = vec![vec![0.0, 0.1, -0.3], vec![1.2, -0.4, 0.0]];
        let cache = p.mean_cached(p.normalize_obs_batch(&obs).unwrap()).unwrap();
        let a = Array2::from_shape_fn((2, 3), |(i, j)| acts[i][j]);
        let rows = p.logprob_rows(cache.output(), &a);
        for i in 0..2 {
            let single = p.logprob_normalized(&obs[i], &acts[i]).unwrap();
            assert!((rows[i] - single).abs() < 1e-12);
        }
        assert_eq!(p.mean_kl(cache.output(), cache.output()), 0.0);
    }
}
