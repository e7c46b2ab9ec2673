use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Per-dimension z-score transform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits on rows of equal arity. A constant dimension is an error naming it.
    pub fn fit(rows: &[Vec<f64>], names: &[&str]) -> Result<Self> {
        let s = Self::fit_inner(rows)?;
        if let Some(d) = s.std.iter().position(|&v| v <= 0.0) {
            let name = names.get(d).map_or_else(|| format!("#{d}"), |n| n.to_string());
            return Err(Error::ConstantDimension(name));
        }
        Ok(s)
    }

    /// Like [`Standardizer::fit`], but constant dimensions keep unit scale
    /// instead of failing. Used for network inputs where a degenerate
    /// training set is legal.
    pub fn fit_lenient(rows: &[Vec<f64>]) -> Result<Self> {
        let mut s = Self::fit_inner(rows)?;
        for (sd, m) in s.std.iter_mut().zip(&s.mean) {
            if *sd <= 1e-12 * m.abs().max(1.0) {
                *sd = 1.0;
            }
        }
        Ok(s)
    }

    fn fit_inner(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| invalid("cannot fit normalization on zero rows"))?;
        let d = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            if r.len() != d {
                return Err(Error::Shape {
                    context: "normalization rows",
                    expected: d,
                    got: r.len(),
                });
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.into_iter().map(|v| (v / n).sqrt()).collect();
        if mean.iter().chain(&std).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("normalization statistics"));
        }
        Ok(Self { mean, std })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (v, (m, s))) in out.iter_mut().zip(x.iter().zip(self.mean.iter().zip(&self.std))) {
            *o = (v - m) / s;
        }
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Per-dimension min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn fit(rows: &[Vec<f64>], names: &[&str]) -> Result<Self> {
        let s = Self::fit_inner(rows)?;
        if let Some(d) = (0..s.min.len()).find(|&d| s.max[d] <= s.min[d]) {
            let name = names.get(d).map_or_else(|| format!("#{d}"), |n| n.to_string());
            return Err(Error::ConstantDimension(name));
        }
        Ok(s)
    }

    /// Constant dimensions map to zero instead of failing.
    pub fn fit_lenient(rows: &[Vec<f64>]) -> Result<Self> {
        Self::fit_inner(rows)
    }

    fn fit_inner(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| invalid("cannot fit scaling on zero rows"))?;
        let mut min = first.clone();
        let mut max = first.clone();
        for r in rows {
            if r.len() != min.len() {
                return Err(Error::Shape {
                    context: "scaling rows",
                    expected: min.len(),
                    got: r.len(),
                });
            }
            for ((lo, hi), v) in min.iter_mut().zip(max.iter_mut()).zip(r) {
                *lo = lo.min(*v);
                *hi = hi.max(*v);
            }
        }
        if min.iter().chain(&max).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scaling statistics"));
        }
        Ok(Self { min, max })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(d, v)| {
                let range = self.max[d] - self.min[d];
                if range > 0.0 {
                    (v - self.min[d]) / range
                } else {
                    0.0
                }
            })
            .collect()
    }
}
