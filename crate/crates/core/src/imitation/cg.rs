use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// `||Hx - g|| / ||g||`, recomputed from `H` at exit (0 when `g = 0`).
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `Hx = g` for symmetric positive-definite `H` given only products.
///
/// Stops once the true residual is below `tol * ||g||` or after `iters`
/// products. When the recursive residual drifts below the threshold but the
/// true one has not, the search restarts from the true residual.
pub fn conjugate_gradient(
    mut hvp: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    g: &[f64],
    iters: usize,
    tol: f64,
) -> Result<CgSolution> {
    let n = g.len();
    let g_norm = dot(g, g).sqrt();
    let mut x = vec![0.0; n];
    if g_norm == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let threshold = tol * g_norm;
    let mut r = g.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let mut used = 0;
    while used < iters {
        let hp = hvp(&p)?;
        used += 1;
        let php = dot(&p, &hp);
        if !php.is_finite() || !rr.is_finite() {
            return Err(Error::NonFinite("conjugate gradient"));
        }
        if php <= 0.0 {
            break;
        }
        let alpha = rr / php;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * hp[i];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= threshold {
            if used >= iters {
                break;
            }
            let hx = hvp(&x)?;
            used += 1;
            r = g.iter().zip(&hx).map(|(a, b)| a - b).collect();
            rr = dot(&r, &r);
            if rr.sqrt() <= threshold {
                break;
            }
            p = r.clone();
            continue;
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("conjugate gradient"));
    }
    let hx = hvp(&x)?;
    let res = g.iter().zip(&hx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(CgSolution {
        x,
        iterations: used,
        relative_residual: res / g_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_in_one_step() {
        let g = vec![1.0, -2.0, 3.0];
        let s = conjugate_gradient(|v| Ok(v.to_vec()), &g, 1, 1e-12).unwrap();
        assert_eq!(s.x, g);
        assert_eq!(s.relative_residual, 0.0);
    }

    #[test]
    fn zero_rhs() {
        let s = conjugate_gradient(|v| Ok(v.to_vec()), &[0.0; 4], 10, 1e-10).unwrap();
        assert_eq!(s.x, vec![0.0; 4]);
    }

    #[test]
    fn small_spd_system() {
        // [[4,1],[1,3]] x = [1,2] -> x = [1/11, 7/11]
        let h = |v: &[f64]| Ok(vec![4.0 * v[0] + v[1], v[0] + 3.0 * v[1]]);
        let s = conjugate_gradient(h, &[1.0, 2.0], 10, 1e-12).unwrap();
        assert!((s.x[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((s.x[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn non_finite_product_is_error() {
        let r = conjugate_gradient(|_| Ok(vec![f64::NAN]), &[1.0], 5, 1e-10);
        assert!(r.is_err());
    }
}
