use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// No hidden nonlinearity; the whole net is affine.
    Identity,
}

/// Fully connected network with a shared hidden activation and a linear
/// output layer. Weights are `out x in`.
///
/// The flat parameter layout used by [`Mlp::params`], gradients and
/// direction vectors is, per layer, the weight matrix row-major followed by
/// the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpFile", into = "MlpFile")]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
}

/// Activations of every layer for a batch, input included.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    acts: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds the input at least")
    }

    pub fn input(&self) -> &Array2<f64> {
        &self.acts[0]
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(invalid(format!("bad layer sizes {sizes:?}")));
    }
    Ok(())
}

impl Mlp {
    /// Uniform init in `+-1/sqrt(fan_in)` for weights, zero biases.
    pub fn new(sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        let mut m = Self::zeros(sizes, activation)?;
        for w in &mut m.weights {
            let bound = 1.0 / (w.ncols() as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..bound));
        }
        Ok(m)
    }

    pub fn zeros(sizes: &[usize], activation: Activation) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            activation,
            weights: sizes.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect(),
            biases: sizes[1..].iter().map(|&n| Array1::zeros(n)).collect(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            p.extend(w.iter());
            p.extend(b.iter());
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.n_params() {
            return Err(Error::Shape {
                context: "parameter vector",
                expected: self.n_params(),
                got: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network parameters"));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            for (dst, src) in w.iter_mut().zip(&p[off..]) {
                *dst = *src;
            }
            off += w.len();
            for (dst, src) in b.iter_mut().zip(&p[off..]) {
                *dst = *src;
            }
            off += b.len();
        }
        Ok(())
    }

    fn hidden(&self, z: &mut Array2<f64>) {
        if self.activation == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::Shape {
                context: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row view");
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// Rows of `x` are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let last = self.weights.len() - 1;
        let mut a = x.to_owned();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = a.dot(&w.t()) + b;
            if l < last {
                self.hidden(&mut z);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: Array2<f64>) -> Result<ForwardCache> {
        self.check_input(&x.view())?;
        let last = self.weights.len() - 1;
        let mut acts = vec![x];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t()) + b;
            if l < last {
                self.hidden(&mut z);
            }
            acts.push(z);
        }
        Ok(ForwardCache { acts })
    }

    /// Reverse-mode pass. `upstream` is dLoss/dOutput per sample; returns the
    /// parameter gradient summed over the batch and dLoss/dInput per sample.
    pub fn backward(&self, cache: &ForwardCache, upstream: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = cache.output();
        if upstream.dim() != out.dim() {
            return Err(Error::Shape {
                context: "upstream gradient",
                expected: out.len(),
                got: upstream.len(),
            });
        }
        let n_layers = self.weights.len();
        let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(n_layers);
        let mut delta = upstream.to_owned();
        for l in (0..n_layers).rev() {
            let a_prev = &cache.acts[l];
            grads.push((delta.t().dot(a_prev), delta.sum_axis(Axis(0))));
            let mut d_prev = delta.dot(&self.weights[l]);
            if l > 0 && self.activation == Activation::Tanh {
                d_prev.zip_mut_with(a_prev, |d, a| *d *= 1.0 - a * a);
            }
            delta = d_prev;
        }
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in grads.iter().rev() {
            flat.extend(gw.iter());
            flat.extend(gb.iter());
        }
        Ok((flat, delta))
    }

    /// Forward-mode directional derivative of the batch output along the
    /// parameter direction `v`, around the cached point.
    pub fn jvp(&self, cache: &ForwardCache, v: &[f64]) -> Result<Array2<f64>> {
        if v.len() != self.n_params() {
            return Err(Error::Shape {
                context: "direction vector",
                expected: self.n_params(),
                got: v.len(),
            });
        }
        let n_layers = self.weights.len();
        let mut off = 0;
        let mut tangent: Option<Array2<f64>> = None;
        for l in 0..n_layers {
            let w = &self.weights[l];
            let (rows, cols) = w.dim();
            let dw = ArrayView2::from_shape((rows, cols), &v[off..off + rows * cols]).expect("layer slice");
            off += rows * cols;
            let db = ndarray::ArrayView1::from(&v[off..off + rows]);
            off += rows;
            let mut dz = cache.acts[l].dot(&dw.t()) + db;
            if let Some(t) = &tangent {
                dz += &t.dot(&w.t());
            }
            if l + 1 < n_layers && self.activation == Activation::Tanh {
                dz.zip_mut_with(&cache.acts[l + 1], |d, a| *d *= 1.0 - a * a);
            }
            tangent = Some(dz);
        }
        Ok(tangent.expect("at least one layer"))
    }

    #[cfg(test)]
    pub(crate) fn output_bias_mut(&mut self) -> ndarray::ArrayViewMut1<'_, f64> {
        self.biases.last_mut().unwrap().slice_mut(ndarray::s![..])
    }
}

#[derive(Serialize, Deserialize)]
struct MlpFile {
    sizes: Vec<usize>,
    activation: Activation,
    /// Row-major `out x in` per layer.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<Mlp> for MlpFile {
    fn from(m: Mlp) -> Self {
        Self {
            sizes: m.sizes,
            activation: m.activation,
            weights: m.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: m.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpFile> for Mlp {
    type Error = Error;

    fn try_from(f: MlpFile) -> Result<Self> {
        check_sizes(&f.sizes)?;
        let n = f.sizes.len() - 1;
        if f.weights.len() != n || f.biases.len() != n {
            return Err(invalid("network file layer count does not match sizes"));
        }
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for (l, (w, b)) in f.weights.into_iter().zip(f.biases).enumerate() {
            let (o, i) = (f.sizes[l + 1], f.sizes[l]);
            if b.len() != o {
                return Err(invalid(format!("layer {l} bias has {} entries, expected {o}", b.len())));
            }
            weights.push(
                Array2::from_shape_vec((o, i), w)
                    .map_err(|_| invalid(format!("layer {l} weights do not match {o}x{i}")))?,
            );
            biases.push(Array1::from(b));
        }
        let m = Self {
            sizes: f.sizes,
            activation: f.activation,
            weights,
            biases,
        };
        if m.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network file"));
        }
        Ok(m)
    }
}
