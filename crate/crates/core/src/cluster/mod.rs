//! Behavioral-mode discovery: nDTW distances, Ward agglomeration and
//! silhouette-driven choice of the number of clusters.

mod dtw;

pub use dtw::{dtw, dtw_cost, dtw_points, ndtw, ndtw_points, DtwAlignment, DtwDim, DtwSpace};

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geo::Trajectory;

pub const CLUSTER_MODEL_VERSION: u32 = 1;

/// Symmetric matrix of pairwise distances with the ids it indexes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub ids: Vec<String>,
    data: Vec<f64>,
}

impl DistanceMatrix {
    /// Builds from a full row-major matrix, checking it is a dissimilarity.
    pub fn from_full(ids: Vec<String>, data: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if data.len() != n * n {
            return Err(Error::Shape {
                context: "distance matrix",
                expected: n * n,
                got: data.len(),
            });
        }
        for i in 0..n {
            if data[i * n + i] != 0.0 {
                return Err(invalid(format!("distance matrix diagonal {i} is not zero")));
            }
            for j in 0..i {
                let (x, y) = (data[i * n + j], data[j * n + i]);
                if x != y || !(x >= 0.0) {
                    return Err(invalid(format!("distance matrix entry ({i},{j}) is asymmetric or negative")));
                }
            }
        }
        Ok(Self { ids, data })
    }

    /// Fills the matrix with `dist` over all unordered pairs.
    pub fn from_fn(ids: Vec<String>, mut dist: impl FnMut(usize, usize) -> Result<f64>) -> Result<Self> {
        let n = ids.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d = dist(i, j)?;
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Self::from_full(ids, data)
    }

    /// nDTW between every pair of trajectories.
    pub fn ndtw(corpus: &[Trajectory], space: &DtwSpace) -> Result<Self> {
        let points: Vec<Vec<Vec<f64>>> = corpus.iter().map(|t| space.points(t)).collect::<Result<_>>()?;
        Self::from_fn(corpus.iter().map(|t| t.id.clone()).collect(), |i, j| {
            ndtw_points(&points[i], &points[j])
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.ids.len() + j]
    }
}

/// One merge of the dendrogram. Clusters are named by their slot, which is
/// always the smallest member index; the merged cluster keeps slot `a`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
    pub size: usize,
}

/// Full Ward merge sequence (N - 1 merges).
///
/// Distances are updated with the Lance-Williams recurrence applied to
/// squared distances,
/// `d(k, i+j)^2 = ((n_i+n_k) d(k,i)^2 + (n_j+n_k) d(k,j)^2 - n_k d(i,j)^2) / (n_i+n_j+n_k)`.
/// Ties go to the smallest `(a, b)` slot pair.
pub fn ward_dendrogram(d: &DistanceMatrix) -> Vec<Merge> {
    let n = d.len();
    let mut sq: Vec<f64> = (0..n * n).map(|k| d.data[k] * d.data[k]).collect();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for _ in 1..n {
        let mut best = (f64::INFINITY, 0, 0);
        for i in 0..n {
            if !active[i] {
                continue;
            }
            for j in (i + 1)..n {
                if active[j] && sq[i * n + j] < best.0 {
                    best = (sq[i * n + j], i, j);
                }
            }
        }
        let (dij, a, b) = best;
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let v = ((na + nk) * sq[k * n + a] + (nb + nk) * sq[k * n + b] - nk * dij) / (na + nb + nk);
            let v = v.max(0.0);
            sq[k * n + a] = v;
            sq[a * n + k] = v;
        }
        active[b] = false;
        size[a] += size[b];
        merges.push(Merge {
            a,
            b,
            distance: dij.sqrt(),
            size: size[a],
        });
    }
    merges
}

/// Labels after applying the first `n - k` merges. Cluster ids are assigned
/// in order of each cluster's smallest member.
pub fn cut(merges: &[Merge], n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(invalid(format!("cannot cut {n} items into {k} clusters")));
    }
    let mut owner: Vec<usize> = (0..n).collect();
    for m in &merges[..n - k] {
        for o in owner.iter_mut() {
            if *o == m.b {
                *o = m.a;
            }
        }
    }
    let mut ids = BTreeMap::new();
    Ok(owner
        .iter()
        .map(|slot| {
            let next = ids.len();
            *ids.entry(*slot).or_insert(next)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub version: u32,
    pub k: usize,
    pub ids: Vec<String>,
    /// Cluster of `ids[i]`.
    pub assignments: Vec<usize>,
    pub merges: Vec<Merge>,
    /// `(k, silhouette)` for every candidate examined.
    pub silhouettes: Vec<(usize, f64)>,
}

impl ClusterModel {
    pub fn label_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id).map(|i| self.assignments[i])
    }

    pub fn label_map(&self) -> BTreeMap<String, usize> {
        self.ids.iter().cloned().zip(self.assignments.iter().copied()).collect()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &c in &self.assignments {
            s[c] += 1;
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = ClusterModelFile {
            version: self.version,
            k: self.k,
            labels: self.label_map(),
            order: self.ids.clone(),
            merges: self.merges.clone(),
            silhouettes: self.silhouettes.clone(),
        };
        fs::write(path, serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: ClusterModelFile = serde_json::from_str(&fs::read_to_string(path)?)?;
        if doc.version != CLUSTER_MODEL_VERSION {
            return Err(Error::Version {
                found: doc.version,
                expected: CLUSTER_MODEL_VERSION,
            });
        }
        let assignments = doc
            .order
            .iter()
            .map(|id| doc.labels.get(id).copied().ok_or_else(|| invalid(format!("no label for `{id}`"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            version: doc.version,
            k: doc.k,
            ids: doc.order,
            assignments,
            merges: doc.merges,
            silhouettes: doc.silhouettes,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ClusterModelFile {
    version: u32,
    k: usize,
    labels: BTreeMap<String, usize>,
    order: Vec<String>,
    merges: Vec<Merge>,
    silhouettes: Vec<(usize, f64)>,
}

/// Ward clustering of `d` into exactly `k` clusters.
pub fn agglomerate(d: &DistanceMatrix, k: usize) -> Result<ClusterModel> {
    let n = d.len();
    if k == 0 || k > n {
        return Err(invalid(format!("K={k} must lie in [1, {n}]")));
    }
    let merges = ward_dendrogram(d);
    Ok(ClusterModel {
        version: CLUSTER_MODEL_VERSION,
        k,
        ids: d.ids.clone(),
        assignments: cut(&merges, n, k)?,
        merges,
        silhouettes: Vec::new(),
    })
}

/// Mean silhouette coefficient. Singleton clusters contribute 0.
pub fn silhouette(d: &DistanceMatrix, labels: &[usize]) -> Result<f64> {
    let n = d.len();
    if labels.len() != n {
        return Err(Error::Shape {
            context: "silhouette labels",
            expected: n,
            got: labels.len(),
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if k < 2 || sizes.iter().any(|&s| s == 0) {
        return Err(invalid("silhouette needs at least two non-empty clusters"));
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d.get(i, j);
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Runs Ward for every K in `k_range` (inclusive) and keeps the best
/// silhouette; ties go to the smaller K.
pub fn select_k(d: &DistanceMatrix, k_range: std::ops::RangeInclusive<usize>) -> Result<ClusterModel> {
    let n = d.len();
    if k_range.is_empty() {
        return Err(invalid("empty K range"));
    }
    if *k_range.start() < 2 || *k_range.end() > n.saturating_sub(1) {
        return Err(invalid(format!(
            "K range {}..={} must lie within [2, {}]",
            k_range.start(),
            k_range.end(),
            n.saturating_sub(1)
        )));
    }
    let merges = ward_dendrogram(d);
    let mut silhouettes = Vec::new();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for k in k_range {
        let labels = cut(&merges, n, k)?;
        let s = silhouette(d, &labels)?;
        silhouettes.push((k, s));
        if best.as_ref().is_none_or(|b| s > b.1) {
            best = Some((k, s, labels));
        }
    }
    let (k, _, assignments) = best.expect("non-empty range");
    Ok(ClusterModel {
        version: CLUSTER_MODEL_VERSION,
        k,
        ids: d.ids.clone(),
        assignments,
        merges,
        silhouettes,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![0u64; ka * kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.iter().map(|&v| c2(v)).sum();
    let rows: f64 = (0..ka).map(|i| c2((0..kb).map(|j| table[i * kb + j]).sum())).sum();
    let cols: f64 = (0..kb).map(|j| c2((0..ka).map(|i| table[i * kb + j]).sum())).sum();
    let expected = rows * cols / c2(n as u64);
    let max = (rows + cols) / 2.0;
    if max == expected {
        1.0
    } else {
        (index - expected) / (max - expected)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn euclid(points: &[Vec<f64>]) -> DistanceMatrix {
        let ids = (0..points.len()).map(|i| format!("p{i}")).collect();
        DistanceMatrix::from_fn(ids, |i, j| {
            Ok(points[i].iter().zip(&points[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        })
        .unwrap()
    }

    fn bundles(rng: &mut ChaCha8Rng, per: usize, centers: &[(f64, f64)]) -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        // interleave members so cluster membership is not contiguous by index
        for i in 0..per {
            for (c, &(x, y)) in centers.iter().enumerate() {
                let _ = i;
                pts.push(vec![x + rng.random_range(-0.5..0.5), y + rng.random_range(-0.5..0.5)]);
                truth.push(c);
            }
        }
        (pts, truth)
    }

    #[test]
    fn extreme_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (pts, _) = bundles(&mut rng, 5, &[(0.0, 0.0), (10.0, 0.0)]);
        let d = euclid(&pts);
        let all = agglomerate(&d, d.len()).unwrap();
        assert_eq!(all.assignments, (0..d.len()).collect::<Vec<_>>());
        let one = agglomerate(&d, 1).unwrap();
        assert!(one.assignments.iter().all(|&c| c == 0));
        assert!(agglomerate(&d, d.len() + 1).is_err());
        assert!(agglomerate(&d, 0).is_err());
    }

    #[test]
    fn separated_bundles_split_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (pts, truth) = bundles(&mut rng, 10, &[(0.0, 0.0), (20.0, 5.0)]);
        let d = euclid(&pts);
        let m = agglomerate(&d, 2).unwrap();
        assert_eq!(adjusted_rand_index(&m.assignments, &truth), 1.0);
        assert!(silhouette(&d, &m.assignments).unwrap() > 0.8);
    }

    #[test]
    fn coincident_clusters_score_one() {
        let pts = vec![vec![0.0], vec![0.0], vec![5.0], vec![5.0], vec![5.0]];
        let d = euclid(&pts);
        assert_eq!(silhouette(&d, &[0, 0, 1, 1, 1]).unwrap(), 1.0);
        assert!(silhouette(&d, &[0, 0, 0, 0, 0]).is_err());
        // singleton contributes zero
        let s = silhouette(&d, &[0, 0, 1, 1, 2]).unwrap();
        assert!(s < 1.0);
    }

    #[test]
    fn random_labels_on_uniform_data_score_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mean = 0.0;
        let reps = 20;
        for _ in 0..reps {
            let pts: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
            let labels: Vec<usize> = (0..60).map(|i| if i < 2 { i } else { rng.random_range(0..2) }).collect();
            mean += silhouette(&euclid(&pts), &labels).unwrap();
        }
        mean /= reps as f64;
        assert!(mean.abs() < 0.15, "{mean}");
    }

    #[test]
    fn select_k_recovers_mode_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (pts, truth) = bundles(&mut rng, 8, &[(0.0, 0.0), (15.0, 0.0), (7.0, 14.0)]);
        let d = euclid(&pts);
        let m = select_k(&d, 2..=6).unwrap();
        assert_eq!(m.k, 3);
        assert_eq!(adjusted_rand_index(&m.assignments, &truth), 1.0);
        assert_eq!(m.silhouettes.len(), 5);
        assert_eq!(select_k(&d, 2..=6).unwrap(), m);
        assert!(select_k(&d, 1..=3).is_err());
        assert!(select_k(&d, 2..=d.len()).is_err());
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert!(select_k(&d, empty).is_err());
    }

    #[test]
    fn hierarchy_nests() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec<f64>> = (0..25).map(|_| vec![rng.random::<f64>() * 10.0, rng.random::<f64>()]).collect();
        let d = euclid(&pts);
        let merges = ward_dendrogram(&d);
        for k in 2..=d.len() {
            let fine = cut(&merges, d.len(), k).unwrap();
            let coarse = cut(&merges, d.len(), k - 1).unwrap();
            // every fine cluster lies inside one coarse cluster
            let mut map = BTreeMap::new();
            for (f, c) in fine.iter().zip(&coarse) {
                assert_eq!(*map.entry(*f).or_insert(*c), *c);
            }
            // exactly two fine clusters collapse into one
            let distinct: std::collections::BTreeSet<_> = map.values().collect();
            assert_eq!(distinct.len(), k - 1);
        }
    }

    #[test]
    fn ties_break_by_smallest_pair() {
        // four points on a line at unit spacing: (0,1), (1,2), (2,3) tie
        let d = euclid(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let merges = ward_dendrogram(&d);
        assert_eq!((merges[0].a, merges[0].b), (0, 1));
        assert_eq!((merges[1].a, merges[1].b), (2, 3));
    }

    #[test]
    fn model_file_round_trip() {
        let d = euclid(&[vec![0.0], vec![1.0], vec![5.0], vec![6.0]]);
        let m = select_k(&d, 2..=3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("clusters.json");
        m.save(&p).unwrap();
        assert_eq!(ClusterModel::load(&p).unwrap(), m);
        assert_eq!(m.label_of("p2"), Some(1));
        assert_eq!(m.cluster_sizes(), vec![2, 2]);
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert!(adjusted_rand_index(&[0, 1, 0, 1], &[0, 0, 1, 1]) < 0.0);
    }
}
