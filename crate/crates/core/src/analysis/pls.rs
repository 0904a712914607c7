//! Partial least squares (PLS2) via NIPALS with standard deflation.

use crate::error::{Error, Result};
use crate::math::Matrix;

const INNER_TOL: f64 = 1e-10;
const INNER_MAX_ITER: usize = 500;
/// Residual scales below this are treated as exhausted.
const DEGENERATE: f64 = 1e-12;

/// A fitted PLS projection: per-column X means and the unit-norm weight
/// vectors, one column per extracted component.
#[derive(Debug, Clone)]
pub struct PlsProjection {
    pub x_mean: Vec<f64>,
    /// `n_features x n_valid_components`.
    pub weights: Matrix,
    pub requested: usize,
}

impl PlsProjection {
    pub fn valid_components(&self) -> usize {
        self.weights.cols()
    }

    /// Project rows of `x` onto the weight directions after centering.
    pub fn project(&self, x: &Matrix) -> Matrix {
        let k = self.weights.cols();
        let mut out = Matrix::zeros(x.rows(), k);
        for r in 0..x.rows() {
            let row = x.row(r);
            let o = out.row_mut(r);
            for (i, (&v, &m)) in row.iter().zip(&self.x_mean).enumerate() {
                let c = v - m;
                if c != 0.0 {
                    for (j, slot) in o.iter_mut().enumerate() {
                        *slot += c * self.weights.get(i, j);
                    }
                }
            }
        }
        out
    }
}

fn column_means(m: &Matrix) -> Vec<f64> {
    let mut means = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (s, v) in means.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    for s in &mut means {
        *s /= m.rows() as f64;
    }
    means
}

fn center(m: &Matrix) -> (Matrix, Vec<f64>) {
    let means = column_means(m);
    let mut out = m.clone();
    for r in 0..out.rows() {
        for (v, mean) in out.row_mut(r).iter_mut().zip(&means) {
            *v -= mean;
        }
    }
    (out, means)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `m^T v` for column vector`v` of length `m.rows()`.
fn tv(m: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        let x = v[r];
        if x != 0.0 {
            for (slot, mv) in out.iter_mut().zip(m.row(r)) {
                *slot += x * mv;
            }
        }
    }
    out
}

/// `m v` for column vector `v` of length `m.cols()`.
fn mv(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|r| m.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

/// Fit `k` PLS2 components of centered `x` against centered `y`.
///
/// Returns unit-norm weight columns. If the X residual (or the
/// cross-covariance with the Y residual) degenerates before `k` components,
/// the projection carries fewer columns than requested;
/// `valid_components()` reports how many were extracted.
pub fn pls_fit(x: &Matrix, y: &Matrix, k: usize) -> Result<PlsProjection> {
    if x.rows() != y.rows() || x.rows() < 2 {
        return Err(Error::contract("pls_fit: X and Y must share >= 2 rows"));
    }
    if k == 0 || k > x.cols() {
        return Err(Error::contract(format!(
            "pls_fit: k = {k} outside 1..=n_features ({})",
            x.cols()
        )));
    }
    let (mut xr, x_mean) = center(x);
    let (mut yr, _) = center(y);
    let x_scale = xr.as_slice().iter().map(|v| v.abs()).fold(0.0, f64::max);

    let mut weight_cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    for _ in 0..k {
        // Start u from the Y residual column with the largest variance.
        let u_col = (0..yr.cols())
            .max_by(|&a, &b| {
                let va: f64 = (0..yr.rows()).map(|r| yr.get(r, a).powi(2)).sum();
                let vb: f64 = (0..yr.rows()).map(|r| yr.get(r, b).powi(2)).sum();
                va.total_cmp(&vb)
            })
            .expect("y has columns");
        let mut u: Vec<f64> = (0..yr.rows()).map(|r| yr.get(r, u_col)).collect();
        if norm(&u) <= DEGENERATE {
            break;
        }

        let mut w = vec![0.0; xr.cols()];
        let mut t = vec![0.0; xr.rows()];
        let mut converged = false;
        for _ in 0..INNER_MAX_ITER {
            let mut w_new = tv(&xr, &u);
            let wn = norm(&w_new);
            if wn <= DEGENERATE * x_scale.max(1.0) {
                break;
            }
            for v in &mut w_new {
                *v /= wn;
            }
            let t_new = mv(&xr, &w_new);
            let tt: f64 = t_new.iter().map(|v| v * v).sum();
            if tt <= DEGENERATE {
                break;
            }
            let mut q = tv(&yr, &t_new);
            for v in &mut q {
                *v /= tt;
            }
            let qq: f64 = q.iter().map(|v| v * v).sum();
            if qq <= DEGENERATE {
                break;
            }
            u = mv(&yr, &q);
            for v in &mut u {
                *v /= qq;
            }
            let drift: f64 = t_new
                .iter()
                .zip(&t)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let t_norm = tt.sqrt();
            w = w_new;
            t = t_new;
            if drift <= INNER_TOL * t_norm.max(1.0) {
                converged = true;
                break;
            }
        }
        let tt: f64 = t.iter().map(|v| v * v).sum();
        if !converged && tt <= DEGENERATE {
            break;
        }
        if norm(&w) <= DEGENERATE {
            break;
        }

        // Deflate X by the loading p = X^T t / (t^T t), and Y by q.
        let p: Vec<f64> = tv(&xr, &t).iter().map(|v| v / tt).collect();
        let mut q = tv(&yr, &t);
        for v in &mut q {
            *v /= tt;
        }
        for r in 0..xr.rows() {
            let tr = t[r];
            for (slot, pv) in xr.row_mut(r).iter_mut().zip(&p) {
                *slot -= tr * pv;
            }
            for (slot, qv) in yr.row_mut(r).iter_mut().zip(&q) {
                *slot -= tr * qv;
            }
        }
        weight_cols.push(w);
    }

    if weight_cols.is_empty() {
        return Err(Error::contract(
            "pls_fit: degenerate input, no component could be extracted",
        ));
    }
    let mut weights = Matrix::zeros(x.cols(), weight_cols.len());
    for (j, col) in weight_cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            weights.set(i, j, v);
        }
    }
    Ok(PlsProjection {
        x_mean,
        weights,
        requested: k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = stream(seed, "pls-test", &[]);
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        (dot / (norm(a) * norm(b))).abs()
    }

    /// Dominant left singular vector of `x^T y` by power iteration on
    /// `(X^T Y)(X^T Y)^T` — the independent oracle route.
    pub(super) fn dominant_cross_cov_direction(x: &Matrix, y: &Matrix) -> Vec<f64> {
        let (xc, _) = center(x);
        let (yc, _) = center(y);
        let cross = xc.transpose().matmul(&yc).unwrap(); // d x q
        let m = cross.matmul(&cross.transpose()).unwrap(); // d x d
        let mut v = vec![1.0; m.rows()];
        for _ in 0..500 {
            let next = mv(&m, &v);
            let n = norm(&next);
            if n == 0.0 {
                break;
            }
            v = next.iter().map(|x| x / n).collect();
        }
        v
    }

    #[test]
    fn first_direction_aligns_with_a_copied_column() {
        // Y carries x's first column (and its negation): the dominant
        // cross-covariance direction is e1.
        let x = random_matrix(12_000, 8, 1);
        let mut y = Matrix::zeros(12_000, 2);
        for r in 0..12_000 {
            y.set(r, 0, x.get(r, 0));
            y.set(r, 1, -x.get(r, 0));
        }
        let proj = pls_fit(&x, &y, 2).unwrap();
        let w1: Vec<f64> = (0..8).map(|i| proj.weights.get(i, 0)).collect();
        let mut e1 = vec![0.0; 8];
        e1[0] = 1.0;
        assert!(cosine(&w1, &e1) > 0.999);
    }

    #[test]
    fn first_weight_matches_cross_covariance_svd() {
        for seed in 0..5 {
            let x = random_matrix(120, 10, 100 + seed);
            let y = random_matrix(120, 3, 200 + seed);
            let proj = pls_fit(&x, &y, 1).unwrap();
            let w1: Vec<f64> = (0..10).map(|i| proj.weights.get(i, 0)).collect();
            let oracle = dominant_cross_cov_direction(&x, &y);
            assert!(cosine(&w1, &oracle) > 0.999, "seed {seed}");
        }
    }

    #[test]
    fn weights_are_unit_norm_and_orthogonal() {
        let x = random_matrix(200, 12, 7);
        let y = random_matrix(200, 3, 8);
        let proj = pls_fit(&x, &y, 2).unwrap();
        let w1: Vec<f64> = (0..12).map(|i| proj.weights.get(i, 0)).collect();
        let w2: Vec<f64> = (0..12).map(|i| proj.weights.get(i, 1)).collect();
        assert!((norm(&w1) - 1.0).abs() < 1e-12);
        assert!((norm(&w2) - 1.0).abs() < 1e-12);
        let dot: f64 = w1.iter().zip(&w2).map(|(a, b)| a * b).sum();
        assert!(dot.abs() < 1e-8);
    }

    #[test]
    fn degenerate_input_reports_fewer_components() {
        // X has rank 1, so at most one component exists.
        let base = random_matrix(50, 1, 9);
        let mut x = Matrix::zeros(50, 4);
        for r in 0..50 {
            for c in 0..4 {
                x.set(r, c, base.get(r, 0) * (c + 1) as f64);
            }
        }
        let y = random_matrix(50, 2, 10);
        let proj = pls_fit(&x, &y, 3).unwrap();
        assert!(proj.valid_components() < 3);
        assert_eq!(proj.requested, 3);
    }

    #[test]
    fn projection_shape() {
        let x = random_matrix(60, 6, 11);
        let y = random_matrix(60, 2, 12);
        let proj = pls_fit(&x, &y, 3).unwrap();
        let z = proj.project(&x);
        assert_eq!(z.rows(), 60);
        assert_eq!(z.cols(), proj.valid_components());
    }
}
