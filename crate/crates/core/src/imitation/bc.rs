use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geo::DeltaAction;
use crate::neural::{fit_regression, mse_loss_and_grad, Adam, GaussianPolicy, DEFAULT_LOG_STD};
use crate::preprocess::Standardizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BcConfig {
    pub epochs: usize,
    /// Cross-validation folds; 1 trains a single model on everything.
    pub folds: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub log_std: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            folds: 10,
            batch_size: 64,
            lr: 1e-3,
            hidden: vec![100, 100],
            log_std: DEFAULT_LOG_STD,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BcOutcome {
    pub policy: GaussianPolicy,
    /// Validation MSE (standardized action units) of each fold model.
    pub fold_mse: Vec<f64>,
    pub selected_fold: usize,
}

/// Behavioral cloning: MSE regression of the policy mean onto the
/// standardized demonstrated actions. With `folds > 1`, one model is trained
/// per fold and the one with the lowest validation error is kept.
pub fn train_bc(demos: &[(Vec<f64>, DeltaAction)], cfg: &BcConfig, rng: &mut impl Rng) -> Result<BcOutcome> {
    if demos.is_empty() {
        return Err(invalid("behavioral cloning needs demonstrations"));
    }
    let folds = cfg.folds.max(1);
    if demos.len() < folds {
        return Err(invalid(format!("{} demonstrations cannot fill {folds} folds", demos.len())));
    }
    let obs: Vec<Vec<f64>> = demos.iter().map(|d| d.0.clone()).collect();
    let acts: Vec<Vec<f64>> = demos.iter().map(|d| d.1.to_array().to_vec()).collect();
    let obs_norm = Standardizer::fit_lenient(&obs)?;
    let act_norm = Standardizer::fit_lenient(&acts)?;
    let x = crate::neural::to_matrix(&obs, &obs_norm)?;
    let y = crate::neural::to_matrix(&acts, &act_norm)?;

    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.shuffle(rng);
    let mut best: Option<(f64, usize, GaussianPolicy)> = None;
    let mut fold_mse = Vec::with_capacity(folds);
    for k in 0..folds {
        let (train, val): (Vec<usize>, Vec<usize>) = if folds == 1 {
            (order.clone(), order.clone())
        } else {
            let (v, t): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
                order.iter().copied().enumerate().partition(|(pos, _)| pos % folds == k);
            (t.into_iter().map(|p| p.1).collect(), v.into_iter().map(|p| p.1).collect())
        };
        let mut policy = GaussianPolicy::new(&cfg.hidden, obs_norm.clone(), act_norm.clone(), cfg.log_std, rng)?;
        let mut adam = Adam::new(policy.net.n_params(), cfg.lr);
        let (tx, ty) = (rows(&x, &train), rows(&y, &train));
        fit_regression(&mut policy.net, &mut adam, &tx, &ty, cfg.epochs, cfg.batch_size, rng)?;
        let (mse, _) = mse_loss_and_grad(&policy.net, &rows(&x, &val), &rows(&y, &val))?;
        fold_mse.push(mse);
        if best.as_ref().is_none_or(|b| mse < b.0) {
            best = Some((mse, k, policy));
        }
    }
    let (_, selected_fold, policy) = best.expect("at least one fold");
    Ok(BcOutcome {
        policy,
        fold_mse,
        selected_fold,
    })
}

fn rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(ndarray::Axis(0), idx)
}
