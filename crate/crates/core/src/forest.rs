//! Random forest classifier that predicts a flight's behavioral mode from
//! forecast arrival conditions.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::preprocess::{ARRIVAL_FEATURES, ARRIVAL_FEATURE_NAMES};

pub const FOREST_MODEL_VERSION: u32 = 1;

/// Names of the classifier inputs: arrival conditions plus arrival hour.
pub fn feature_names() -> Vec<String> {
    let mut v: Vec<String> = ARRIVAL_FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    v.push("arrival_hour".into());
    v
}

/// Classifier row for a flight: the forecast arrival conditions followed by
/// the estimated arrival time of day in hours (UTC).
pub fn classifier_row(arrival: &[f64], eta_timestamp: i64) -> Result<Vec<f64>> {
    if arrival.len() != ARRIVAL_FEATURES {
        return Err(Error::Shape {
            context: "arrival conditions",
            expected: ARRIVAL_FEATURES,
            got: arrival.len(),
        });
    }
    let mut row = arrival.to_vec();
    row.push(eta_timestamp.rem_euclid(86_400) as f64 / 3600.0);
    Ok(row)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_split: usize,
    pub min_leaf: usize,
    /// Candidate features per split; `None` means `floor(sqrt(p))`.
    pub mtry: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            n_trees: 20,
            max_depth: 20,
            min_split: 2,
            min_leaf: 1,
            mtry: None,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_split < 2 || self.min_leaf == 0 {
            return Err(invalid(format!("invalid forest parameters {self:?}")));
        }
        if self.mtry == Some(0) {
            return Err(invalid("mtry must be positive"));
        }
        Ok(())
    }
}

/// Tree stored as parallel node arrays. `feature[i] < 0` marks a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub feature: Vec<i32>,
    pub threshold: Vec<f64>,
    pub left: Vec<u32>,
    pub right: Vec<u32>,
    /// Training class counts reaching each node.
    pub counts: Vec<Vec<u32>>,
    pub depth: Vec<u32>,
}

impl DecisionTree {
    pub fn node_count(&self) -> usize {
        self.feature.len()
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.feature[node] < 0
    }

    pub fn leaf_of(&self, x: &[f64]) -> usize {
        let mut n = 0;
        while !self.is_leaf(n) {
            n = if x[self.feature[n] as usize] <= self.threshold[n] {
                self.left[n] as usize
            } else {
                self.right[n] as usize
            };
        }
        n
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax_lowest(&self.counts[self.leaf_of(x)])
    }
}

fn argmax_lowest(counts: &[u32]) -> usize {
    let mut best = 0;
    for (c, &v) in counts.iter().enumerate() {
        if v > counts[best] {
            best = c;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub feature_names: Vec<String>,
    pub n_classes: usize,
    pub params: ForestParams,
    pub seed: u64,
    pub trees: Vec<DecisionTree>,
    /// Out-of-bag accuracy over rows left out by at least one tree.
    pub oob_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrediction {
    pub class: usize,
    pub vote_fractions: Vec<f64>,
}

impl ForestModel {
    pub fn predict(&self, x: &[f64]) -> Result<ClassPrediction> {
        if x.len() != self.feature_names.len() {
            return Err(Error::Shape {
                context: "classifier row",
                expected: self.feature_names.len(),
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("classifier row"));
        }
        let mut votes = vec![0u32; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x)] += 1;
        }
        let n = self.trees.len() as f64;
        Ok(ClassPrediction {
            class: argmax_lowest(&votes),
            vote_fractions: votes.iter().map(|&v| v as f64 / n).collect(),
        })
    }

    pub fn accuracy(&self, x: &[Vec<f64>], y: &[usize]) -> Result<f64> {
        let mut hits = 0;
        for (row, &label) in x.iter().zip(y) {
            if self.predict(row)?.class == label {
                hits += 1;
            }
        }
        Ok(hits as f64 / x.len().max(1) as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != FOREST_MODEL_VERSION {
            return Err(Error::Version {
                found: m.version,
                expected: FOREST_MODEL_VERSION,
            });
        }
        Ok(m)
    }
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Trains a forest. Rows are put in a canonical order first, so the result
/// does not depend on the order the caller supplies them in.
pub fn train_forest(
    x: &[Vec<f64>],
    y: &[usize],
    feature_names: Vec<String>,
    params: ForestParams,
    seed: u64,
) -> Result<ForestModel> {
    params.validate()?;
    if x.len() != y.len() {
        return Err(Error::Shape {
            context: "forest labels",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(invalid("forest needs at least two rows"));
    }
    let p = feature_names.len();
    for row in x {
        if row.len() != p {
            return Err(Error::Shape {
                context: "forest rows",
                expected: p,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forest rows"));
        }
    }
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    if y.iter().all(|&c| c == y[0]) {
        return Err(invalid("forest needs at least two classes"));
    }

    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| cmp_rows(&x[a], &x[b]).then(y[a].cmp(&y[b])));
    let xs: Vec<&[f64]> = order.iter().map(|&i| x[i].as_slice()).collect();
    let ys: Vec<usize> = order.iter().map(|&i| y[i]).collect();

    let mtry = params
        .mtry
        .unwrap_or_else(|| ((p as f64).sqrt().floor() as usize).max(1))
        .min(p);
    let n = xs.len();
    let mut trees = Vec::with_capacity(params.n_trees);
    let mut oob_votes = vec![vec![0u32; n_classes]; n];
    for t in 0..params.n_trees {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        let mut in_bag = vec![false; n];
        sample.iter().for_each(|&i| in_bag[i] = true);
        let tree = TreeBuilder {
            x: &xs,
            y: &ys,
            n_classes,
            params: &params,
            mtry,
            rng: &mut rng,
            tree: DecisionTree {
                feature: vec![],
                threshold: vec![],
                left: vec![],
                right: vec![],
                counts: vec![],
                depth: vec![],
            },
        }
        .build(sample);
        for i in (0..n).filter(|&i| !in_bag[i]) {
            oob_votes[i][tree.predict(xs[i])] += 1;
        }
        trees.push(tree);
    }
    let scored: Vec<bool> = oob_votes
        .iter()
        .zip(&ys)
        .filter(|(v, _)| v.iter().any(|&c| c > 0))
        .map(|(v, &label)| argmax_lowest(v) == label)
        .collect();
    let oob_accuracy = (!scored.is_empty()).then(|| scored.iter().filter(|&&b| b).count() as f64 / scored.len() as f64);

    Ok(ForestModel {
        version: FOREST_MODEL_VERSION,
        feature_names,
        n_classes,
        params,
        seed,
        trees,
        oob_accuracy,
    })
}

struct TreeBuilder<'a> {
    x: &'a [&'a [f64]],
    y: &'a [usize],
    n_classes: usize,
    params: &'a ForestParams,
    mtry: usize,
    rng: &'a mut ChaCha8Rng,
    tree: DecisionTree,
}

fn gini(counts: &[u32], n: u32) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

impl TreeBuilder<'_> {
    fn build(mut self, sample: Vec<usize>) -> DecisionTree {
        // explicit stack keeps node ids in pre-order
        let root = self.push_node(&sample, 0);
        let mut stack = vec![(root, sample)];
        while let Some((node, rows)) = stack.pop() {
            let depth = self.tree.depth[node] as usize;
            let pure = self.tree.counts[node].iter().filter(|&&c| c > 0).count() <= 1;
            if pure || depth >= self.params.max_depth || rows.len() < self.params.min_split {
                continue;
            }
            let Some((feature, threshold)) = self.best_split(&rows) else {
                continue;
            };
            let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
            let left = self.push_node(&l, depth + 1);
            let right = self.push_node(&r, depth + 1);
            self.tree.feature[node] = feature as i32;
            self.tree.threshold[node] = threshold;
            self.tree.left[node] = left as u32;
            self.tree.right[node] = right as u32;
            stack.push((right, r));
            stack.push((left, l));
        }
        self.tree
    }

    fn push_node(&mut self, rows: &[usize], depth: usize) -> usize {
        let mut counts = vec![0u32; self.n_classes];
        rows.iter().for_each(|&i| counts[self.y[i]] += 1);
        let t = &mut self.tree;
        t.feature.push(-1);
        t.threshold.push(0.0);
        t.left.push(0);
        t.right.push(0);
        t.counts.push(counts);
        t.depth.push(depth as u32);
        t.feature.len() - 1
    }

    /// Lowest weighted Gini over the candidate features; midpoint thresholds.
    fn best_split(&mut self, rows: &[usize]) -> Option<(usize, f64)> {
        let p = self.x[0].len();
        let candidates = index::sample(self.rng, p, self.mtry).into_vec();
        let n = rows.len() as u32;
        let mut total = vec![0u32; self.n_classes];
        rows.iter().for_each(|&i| total[self.y[i]] += 1);
        let min_leaf = self.params.min_leaf;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut sorted = rows.to_vec();
        for f in candidates {
            sorted.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]));
            let mut left = vec![0u32; self.n_classes];
            for k in 0..sorted.len() - 1 {
                left[self.y[sorted[k]]] += 1;
                let (v, next) = (self.x[sorted[k]][f], self.x[sorted[k + 1]][f]);
                let nl = k + 1;
                if v == next || nl < min_leaf || sorted.len() - nl < min_leaf {
                    continue;
                }
                let right: Vec<u32> = total.iter().zip(&left).map(|(t, l)| t - l).collect();
                let nl = nl as u32;
                let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
                if best.is_none_or(|b| score < b.0) {
                    let mut threshold = v + (next - v) / 2.0;
                    if threshold >= next {
                        threshold = v;
                    }
                    best = Some((score, f, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

/// Mean k-fold validation accuracy for each parameter set. Folds come from a
/// seeded shuffle of the canonical row order.
pub fn cross_validate(
    x: &[Vec<f64>],
    y: &[usize],
    feature_names: &[String],
    grid: &[ForestParams],
    folds: usize,
    seed: u64,
) -> Result<Vec<(ForestParams, f64)>> {
    if folds < 2 || folds > x.len() {
        return Err(invalid(format!("cannot make {folds} folds from {} rows", x.len())));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| cmp_rows(&x[a], &x[b]).then(y[a].cmp(&y[b])));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let mut out = Vec::new();
    for params in grid {
        let mut acc = 0.0;
        let mut used = 0;
        for k in 0..folds {
            let (mut tx, mut ty, mut vx, mut vy) = (vec![], vec![], vec![], vec![]);
            for (pos, &i) in order.iter().enumerate() {
                if pos % folds == k {
                    vx.push(x[i].clone());
                    vy.push(y[i]);
                } else {
                    tx.push(x[i].clone());
                    ty.push(y[i]);
                }
            }
            // a fold whose training part lost a class cannot be scored
            let Ok(m) = train_forest(&tx, &ty, feature_names.to_vec(), *params, seed.wrapping_add(k as u64)) else {
                continue;
            };
            acc += m.accuracy(&vx, &vy)?;
            used += 1;
        }
        if used == 0 {
            return Err(invalid("no cross-validation fold could be trained"));
        }
        out.push((*params, acc / used as f64));
    }
    Ok(out)
}

/// Best parameter set by cross-validated accuracy; ties keep the earlier entry.
pub fn grid_search(
    x: &[Vec<f64>],
    y: &[usize],
    feature_names: &[String],
    grid: &[ForestParams],
    folds: usize,
    seed: u64,
) -> Result<(ForestParams, Vec<(ForestParams, f64)>)> {
    let scores = cross_validate(x, y, feature_names, grid, folds, seed)?;
    let best = scores
        .iter()
        .fold(None::<&(ForestParams, f64)>, |b, s| match b {
            Some(b) if b.1 >= s.1 => Some(b),
            _ => Some(s),
        })
        .ok_or_else(|| invalid("empty parameter grid"))?;
    Ok((best.0, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    fn names(p: usize) -> Vec<String> {
        (0..p).map(|i| format!("f{i}")).collect()
    }

    /// Two Gaussian clouds separated along every axis.
    fn separable(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let shift = if c == 0 { -3.0 } else { 3.0 };
            x.push((0..6).map(|_| shift + noise.sample(&mut rng)).collect());
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_fixture() {
        let (x, y) = separable(200, 1);
        let m = train_forest(&x, &y, names(6), ForestParams::default(), 7).unwrap();
        assert!(m.oob_accuracy.unwrap() > 0.95);
        assert!(m.accuracy(&x, &y).unwrap() >= 0.99);
        assert_eq!(m.trees.len(), 20);
    }

    #[test]
    fn structural_invariants() {
        let (x, y) = separable(120, 2);
        let params = ForestParams {
            max_depth: 3,
            ..Default::default()
        };
        let m = train_forest(&x, &y, names(6), params, 3).unwrap();
        for t in &m.trees {
            assert!(t.max_depth() <= 3);
            for n in 0..t.node_count() {
                let total: u32 = t.counts[n].iter().sum();
                assert!(total >= 1);
                if !t.is_leaf(n) {
                    assert!(total >= 2);
                    assert!(t.threshold[n].is_finite());
                }
            }
        }
    }

    #[test]
    fn vote_ties_and_fractions() {
        let (x, y) = separable(40, 3);
        let mut m = train_forest(&x, &y, names(6), ForestParams::default(), 1).unwrap();
        let leaf = |class: usize| {
            let mut counts = vec![0, 0];
            counts[class] = 1;
            DecisionTree {
                feature: vec![-1],
                threshold: vec![0.0],
                left: vec![0],
                right: vec![0],
                counts: vec![counts],
                depth: vec![0],
            }
        };
        m.trees = (0..20).map(|i| leaf(if i < 10 { 1 } else { 0 })).collect();
        let p = m.predict(&[0.0; 6]).unwrap();
        assert_eq!(p.class, 0);
        assert_eq!(p.vote_fractions, vec![0.5, 0.5]);
        m.trees = (0..20).map(|_| leaf(1)).collect();
        let p = m.predict(&[0.0; 6]).unwrap();
        assert_eq!((p.class, p.vote_fractions[1]), (1, 1.0));
        assert!(m.predict(&[0.0; 5]).is_err());
    }

    #[test]
    fn rejects_degenerate_training_sets() {
        let x = vec![vec![0.0], vec![1.0]];
        assert!(train_forest(&x, &[1, 1], names(1), ForestParams::default(), 0).is_err());
        assert!(train_forest(&x[..1], &[0], names(1), ForestParams::default(), 0).is_err());
        assert!(train_forest(&x, &[0], names(1), ForestParams::default(), 0).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let (x, y) = separable(60, 4);
        let m = train_forest(&x, &y, names(6), ForestParams::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("forest.json");
        m.save(&path).unwrap();
        assert_eq!(ForestModel::load(&path).unwrap(), m);
    }

    #[test]
    fn grid_search_prefers_working_depth() {
        let (x, y) = separable(80, 5);
        let grid = [
            ForestParams {
                n_trees: 5,
                max_depth: 1,
                mtry: Some(1),
                ..Default::default()
            },
            ForestParams::default(),
        ];
        let (best, scores) = grid_search(&x, &y, &names(6), &grid, 5, 0).unwrap();
        assert_eq!(scores.len(), 2);
        assert!(scores.iter().all(|s| s.1 > 0.8));
        assert!(grid.contains(&best));
    }

    #[test]
    fn classifier_row_hour() {
        let r = classifier_row(&[1.0, 2.0, 3.0, 4.0, 5.0], 86_400 * 3 + 5400).unwrap();
        assert_eq!(r[5], 1.5);
        assert!(classifier_row(&[1.0], 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn row_order_does_not_matter(seed in 0u64..1000, perm_seed in 0u64..1000) {
            let (x, y) = separable(50, seed);
            let mut idx: Vec<usize> = (0..x.len()).collect();
            rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut ChaCha8Rng::seed_from_u64(perm_seed));
            let px: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
            let py: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            let a = train_forest(&x, &y, names(6), ForestParams::default(), seed).unwrap();
            let b = train_forest(&px, &py, names(6), ForestParams::default(), seed).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
