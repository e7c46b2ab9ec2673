use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Adam, Mlp};
use crate::error::{invalid, Error, Result};
use crate::preprocess::Standardizer;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Rows of `x` (already standardized) gathered into a batch.
pub(crate) fn gather(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

pub(crate) fn to_matrix(rows: &[Vec<f64>], norm: &Standardizer) -> Result<Array2<f64>> {
    let d = norm.dim();
    let mut x = Array2::zeros((rows.len(), d));
    for (mut out, r) in x.rows_mut().into_iter().zip(rows) {
        if r.len() != d {
            return Err(Error::Shape {
                context: "network rows",
                expected: d,
                got: r.len(),
            });
        }
        norm.apply_into(r, out.as_slice_mut().expect("standard layout"));
    }
    Ok(x)
}

/// Mean squared error over all output entries and its parameter gradient.
pub fn mse_loss_and_grad(net: &Mlp, x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Vec<f64>)> {
    let cache = net.forward_cached(x.clone())?;
    let diff = cache.output() - y;
    let n = diff.len().max(1) as f64;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let up = diff * (2.0 / n);
    Ok((loss, net.backward(&cache, up.view())?.0))
}

/// Minibatch Adam regression. Returns the mean training loss of the last
/// epoch.
pub fn fit_regression(
    net: &mut Mlp,
    adam: &mut Adam,
    x: &Array2<f64>,
    y: &Array2<f64>,
    epochs: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let n = x.nrows();
    if n == 0 || y.nrows() != n {
        return Err(invalid("regression needs matching, non-empty inputs and targets"));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut last = f64::NAN;
    for _ in 0..epochs {
        idx.shuffle(rng);
        let mut total = 0.0;
        for chunk in idx.chunks(batch_size.max(1)) {
            let (loss, g) = mse_loss_and_grad(net, &gather(x, chunk), &gather(y, chunk))?;
            let mut p = net.params();
            adam.step(&mut p, &g)?;
            net.set_params(&p)?;
            total += loss * chunk.len() as f64;
        }
        last = total / n as f64;
    }
    Ok(last)
}

/// Binary classifier over concatenated (observation, action) rows. Policy
/// samples carry label 1 and expert samples label 0, so `D` near 0 means
/// "looks like the expert".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub net: Mlp,
    pub input_norm: Standardizer,
}

/// How discriminator outputs become per-step rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardForm {
    /// `-log D`. Never negative, so every extra step pays and ending an
    /// episode early (e.g. at the destination) is penalized.
    NegLogD,
    /// `log(1 - D) - log D`: zero where the discriminator is undecided.
    Logit,
}

impl std::str::FromStr for RewardForm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "neg_log_d" => Ok(Self::NegLogD),
            "logit" => Ok(Self::Logit),
            _ => Err(format!("unknown reward form `{s}` (neg_log_d, logit)")),
        }
    }
}

impl std::fmt::Display for RewardForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NegLogD => "neg_log_d",
            Self::Logit => "logit",
        })
    }
}

impl Discriminator {
    pub fn new(hidden: &[usize], input_norm: Standardizer, rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![input_norm.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Tanh, rng)?,
            input_norm,
        })
    }

    /// Standardizes raw `[obs, action]` rows.
    pub fn inputs(&self, rows: &[Vec<f64>]) -> Result<Array2<f64>> {
        to_matrix(rows, &self.input_norm)
    }

    pub fn logits(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.net.forward_batch(x.view())?.column(0).to_owned())
    }

    pub fn probs(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        Ok(self.logits(x)?.mapv(sigmoid))
    }

    /// Per-row rewards, high where samples look like the expert.
    pub fn rewards(&self, x: &Array2<f64>, form: RewardForm) -> Result<Array1<f64>> {
        let z = self.logits(x)?;
        Ok(match form {
            RewardForm::NegLogD => z.mapv(|z| softplus(-z)),
            RewardForm::Logit => z.mapv(|z| -z),
        })
    }

    /// Binary cross-entropy averaged over both sets and its gradient.
    pub fn loss_and_grad(&self, policy: ArrayView2<f64>, expert: ArrayView2<f64>) -> Result<(f64, Vec<f64>)> {
        let (np, ne) = (policy.nrows(), expert.nrows());
        let x = ndarray::concatenate(Axis(0), &[policy, expert]).map_err(|_| invalid("discriminator inputs differ in width"))?;
        let n = (np + ne).max(1) as f64;
        let cache = self.net.forward_cached(x)?;
        let z = cache.output().column(0);
        let mut loss = 0.0;
        let mut up = Array2::zeros((np + ne, 1));
        for (i, &zi) in z.iter().enumerate() {
            let label = if i < np { 1.0 } else { 0.0 };
            loss += if i < np { softplus(-zi) } else { softplus(zi) };
            up[[i, 0]] = (sigmoid(zi) - label) / n;
        }
        Ok((loss / n, self.net.backward(&cache, up.view())?.0))
    }

    /// `epochs` passes over the larger set in minibatches; each minibatch
    /// pairs rows of the larger set with rows of the smaller one drawn with
    /// replacement.
    pub fn train(
        &mut self,
        adam: &mut Adam,
        policy: &Array2<f64>,
        expert: &Array2<f64>,
        epochs: usize,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        if policy.nrows() == 0 || expert.nrows() == 0 {
            return Err(invalid("discriminator needs policy and expert samples"));
        }
        let policy_larger = policy.nrows() >= expert.nrows();
        let (big, small) = if policy_larger { (policy, expert) } else { (expert, policy) };
        let mut idx: Vec<usize> = (0..big.nrows()).collect();
        let mut last = f64::NAN;
        for _ in 0..epochs {
            idx.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in idx.chunks(batch_size.max(1)) {
                let other: Vec<usize> = (0..chunk.len()).map(|_| rng.random_range(0..small.nrows())).collect();
                let b = gather(big, chunk);
                let s = gather(small, &other);
                let (p, e) = if policy_larger { (b, s) } else { (s, b) };
                let (loss, g) = self.loss_and_grad(p.view(), e.view())?;
                let mut params = self.net.params();
                adam.step(&mut params, &g)?;
                self.net.set_params(&params)?;
                total += loss;
                batches += 1;
            }
            last = total / batches as f64;
        }
        Ok(last)
    }
}

/// State-value critic. Targets are standardized per fit; predictions are
/// returned in return units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNet {
    pub net: Mlp,
    pub obs_norm: Standardizer,
    pub ret_mean: f64,
    pub ret_std: f64,
}

impl ValueNet {
    pub fn new(hidden: &[usize], obs_norm: Standardizer, rng: &mut impl Rng) -> Result<Self> {
        let mut sizes = vec![obs_norm.dim()];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Mlp::new(&sizes, Activation::Tanh, rng)?,
            obs_norm,
            ret_mean: 0.0,
            ret_std: 1.0,
        })
    }

    pub fn inputs(&self, obs: &[Vec<f64>]) -> Result<Array2<f64>> {
        to_matrix(obs, &self.obs_norm)
    }

    pub fn predict(&self, x: &Array2<f64>) -> Result<Array1<f64>> {
        let (m, s) = (self.ret_mean, self.ret_std);
        Ok(self.net.forward_batch(x.view())?.column(0).mapv(|v| v * s + m))
    }

    /// MSE on standardized targets and its gradient.
    pub fn loss_and_grad(&self, x: &Array2<f64>, targets_n: &Array1<f64>) -> Result<(f64, Vec<f64>)> {
        let y = targets_n.view().insert_axis(Axis(1)).to_owned();
        mse_loss_and_grad(&self.net, x, &y)
    }

    /// Refits the target scaling to `returns`, then regresses.
    pub fn fit(
        &mut self,
        adam: &mut Adam,
        x: &Array2<f64>,
        returns: &Array1<f64>,
        epochs: usize,
        batch_size: usize,
        rng: &mut impl Rng,
    ) -> Result<f64> {
        let n = returns.len().max(1) as f64;
        let mean = returns.sum() / n;
        let std = (returns.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt();
        self.ret_mean = mean;
        self.ret_std = if std > 1e-8 { std } else { 1.0 };
        let y = returns.mapv(|r| (r - self.ret_mean) / self.ret_std).insert_axis(Axis(1));
        fit_regression(&mut self.net, adam, x, &y, epochs, batch_size, rng)
    }
}
