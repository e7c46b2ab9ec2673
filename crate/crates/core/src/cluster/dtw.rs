//! Dynamic time warping over multivariate point sequences.
//!
//! The alignment minimizes the sum of squared point distances along the
//! warping path and the reported cost is its square root, i.e. the Euclidean
//! distance between the two warped sequences. With min-max-scaled inputs that
//! makes `sqrt(d * max(|a|, |b|))` the size of the largest diagonal
//! alignment, which is what the nDTW normalization divides by.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geo::Trajectory;
use crate::preprocess::MinMaxScaler;

/// One coordinate a trajectory point contributes to the DTW distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DtwDim {
    Lon,
    Lat,
    Alt,
    /// Index into the state feature vector.
    Feature(usize),
}

impl DtwDim {
    pub fn position() -> Vec<DtwDim> {
        vec![DtwDim::Lon, DtwDim::Lat, DtwDim::Alt]
    }

    /// Position plus the first `n_features` state features.
    pub fn position_and_features(n_features: usize) -> Vec<DtwDim> {
        let mut d = Self::position();
        d.extend((0..n_features).map(DtwDim::Feature));
        d
    }
}

/// Alignment between two sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwAlignment {
    pub cost: f64,
    /// Monotone index pairs from `(0, 0)` to `(|a|-1, |b|-1)`.
    pub path: Vec<(usize, usize)>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()
}

/// Square root of the minimum, over monotone alignments of `a` and `b`, of
/// the summed squared point distances.
pub fn dtw_cost(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    Ok(cost_matrix(a, b)?.last().copied().unwrap_or(0.0).sqrt())
}

/// Full DTW with the optimal path. Ties during backtracking prefer the
/// diagonal move, then advancing `a`, then advancing `b`.
pub fn dtw_points(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DtwAlignment> {
    let acc = cost_matrix(a, b)?;
    let m = b.len();
    let at = |i: usize, j: usize| acc[i * m + j];
    let (mut i, mut j) = (a.len() - 1, m - 1);
    let mut path = vec![(i, j)];
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let (diag, up, left) = (at(i - 1, j - 1), at(i - 1, j), at(i, j - 1));
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();
    Ok(DtwAlignment {
        cost: at(a.len() - 1, m - 1).sqrt(),
        path,
    })
}

fn cost_matrix(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("DTW needs two non-empty sequences"));
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![0.0f64; n * m];
    for i in 0..n {
        for j in 0..m {
            let c = squared_distance(&a[i], &b[j]);
            let prev = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => acc[j - 1],
                (_, 0) => acc[(i - 1) * m],
                _ => acc[(i - 1) * m + j - 1].min(acc[(i - 1) * m + j]).min(acc[i * m + j - 1]),
            };
            acc[i * m + j] = if i == 0 && j == 0 { c } else { c + prev };
        }
    }
    Ok(acc)
}

/// DTW cost divided by `sqrt(d * max(|a|, |b|))`.
pub fn ndtw_points(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = a.first().map_or(0, Vec::len).max(1);
    let cost = dtw_cost(a, b)?;
    Ok(cost / ((d * a.len().max(b.len())) as f64).sqrt())
}

/// Chosen dimensions plus the min-max scaling fitted on a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtwSpace {
    pub dims: Vec<DtwDim>,
    pub scaler: MinMaxScaler,
}

impl DtwSpace {
    pub fn fit(corpus: &[Trajectory], dims: Vec<DtwDim>) -> Result<Self> {
        if dims.is_empty() {
            return Err(invalid("DTW needs at least one dimension"));
        }
        let rows: Vec<Vec<f64>> = corpus
            .iter()
            .map(|t| raw_points(t, &dims))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .flatten()
            .collect();
        let scaler = MinMaxScaler::fit_lenient(&rows)?;
        Ok(Self { dims, scaler })
    }

    pub fn points(&self, t: &Trajectory) -> Result<Vec<Vec<f64>>> {
        Ok(raw_points(t, &self.dims)?.iter().map(|p| self.scaler.apply(p)).collect())
    }
}

fn raw_points(t: &Trajectory, dims: &[DtwDim]) -> Result<Vec<Vec<f64>>> {
    t.states
        .iter()
        .map(|s| {
            dims.iter()
                .map(|d| match *d {
                    DtwDim::Lon => Ok(s.position.lon),
                    DtwDim::Lat => Ok(s.position.lat),
                    DtwDim::Alt => Ok(s.position.alt),
                    DtwDim::Feature(i) => s.features.0.get(i).copied().ok_or_else(|| {
                        invalid(format!("trajectory `{}` has no feature {i} for DTW", t.id))
                    }),
                })
                .collect()
        })
        .collect()
}

pub fn dtw(a: &Trajectory, b: &Trajectory, space: &DtwSpace) -> Result<DtwAlignment> {
    dtw_points(&space.points(a)?, &space.points(b)?)
}

pub fn ndtw(a: &Trajectory, b: &Trajectory, space: &DtwSpace) -> Result<f64> {
    ndtw_points(&space.points(a)?, &space.points(b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all monotone paths, summing along the path.
    pub(crate) fn brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        fn go(a: &[Vec<f64>], b: &[Vec<f64>], i: usize, j: usize, acc: f64, best: &mut f64) {
            let acc = acc + squared_distance(&a[i], &b[j]);
            if i == a.len() - 1 && j == b.len() - 1 {
                *best = best.min(acc);
                return;
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                go(a, b, i + 1, j + 1, acc, best);
            }
            if i + 1 < a.len() {
                go(a, b, i + 1, j, acc, best);
            }
            if j + 1 < b.len() {
                go(a, b, i, j + 1, acc, best);
            }
        }
        let mut best = f64::INFINITY;
        go(a, b, 0, 0, 0.0, &mut best);
        best.sqrt()
    }

    fn seq(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn self_alignment_is_free_and_diagonal() {
        let a = seq(&[0.0, 1.0, 3.0, 2.0]);
        let r = dtw_points(&a, &a).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert_eq!(ndtw_points(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn single_points() {
        let r = dtw_points(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap();
        assert_eq!(r.cost, 5.0);
        assert_eq!(r.path, vec![(0, 0)]);
        assert!(dtw_points(&[], &[vec![1.0]]).is_err());
    }

    #[test]
    fn duplicated_points_match_their_source() {
        let a = seq(&[0.0, 1.0, 2.0]);
        let b = seq(&[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let r = dtw_points(&b, &a).unwrap();
        assert_eq!(r.cost, 0.0);
        assert_eq!(r.path, vec![(0, 0), (1, 0), (2, 1), (3, 1), (4, 2), (5, 2)]);
    }

    fn pts() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..1.0, 2), 1..=6)
    }

    proptest! {
        #[test]
        fn matches_exhaustive_enumeration(a in pts(), b in pts()) {
            let r = dtw_points(&a, &b).unwrap();
            prop_assert_eq!(r.cost, brute_force(&a, &b));
            // the returned path realizes the cost
            let along: f64 = r.path.iter().fold(0.0, |s, &(i, j)| s + squared_distance(&a[i], &b[j]));
            prop_assert!((along.sqrt() - r.cost).abs() < 1e-12);
            prop_assert_eq!(r.path[0], (0, 0));
            prop_assert_eq!(*r.path.last().unwrap(), (a.len() - 1, b.len() - 1));
            for w in r.path.windows(2) {
                let (di, dj) = (w[1].0 - w[0].0, w[1].1 - w[0].1);
                prop_assert!(di <= 1 && dj <= 1 && di + dj >= 1);
            }
        }

        #[test]
        fn ndtw_is_symmetric_and_nonnegative(a in pts(), b in pts()) {
            let ab = ndtw_points(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, ndtw_points(&b, &a).unwrap());
            prop_assert_eq!(ndtw_points(&a, &a).unwrap(), 0.0);
        }
    }
}
