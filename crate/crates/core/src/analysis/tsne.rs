//! Exact (non-approximate) t-SNE with binary-search calibration of the
//! per-point Gaussian bandwidth to a target perplexity.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng;

const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const ENTROPY_TOL: f64 = 1e-5;
const BANDWIDTH_SEARCH_ITERS: usize = 50;
const P_FLOOR: f64 = 1e-12;

/// Embed rows of `x` into 2 dimensions.
pub fn tsne_embed(x: &Matrix, perplexity: f64, iters: usize, seed: u64) -> Result<Matrix> {
    let n = x.rows();
    if (n as f64) <= 3.0 * perplexity {
        return Err(Error::contract(format!(
            "tsne: need n > 3 * perplexity, got n = {n}, perplexity = {perplexity}"
        )));
    }
    let d2 = pairwise_sq_dists(x);
    let p = joint_probabilities(&d2, n, perplexity);
    let exaggeration_iters = EXAGGERATION_ITERS.min(iters / 2);
    // Adaptive step size: n / (4 * exaggeration) normalizes the attractive
    // stiffness to ~1 regardless of n; larger steps diverge on small sets.
    let learning_rate = (n as f64 / (4.0 * EXAGGERATION)).max(2.0);

    // Seeded random init, keyed by row content so identical input rows get
    // identical starting points (their affinities are identical, so they
    // then stay coincident through identical gradients).
    let mut y = Vec::with_capacity(n * 2);
    for i in 0..n {
        let mut row_key: u64 = 0;
        for v in x.row(i) {
            row_key = rng::mix(row_key, "tsne-row", &[v.to_bits()]);
        }
        let mut rng = rng::stream(seed, "tsne-init", &[row_key]);
        for _ in 0..2 {
            let v: f64 = StandardNormal.sample(&mut rng);
            y.push(1e-4 * v);
        }
    }

    let mut velocity = vec![0.0; n * 2];
    let mut gains = vec![1.0; n * 2];
    let mut grad = vec![0.0; n * 2];
    let mut num = vec![0.0; n * n];
    for iter in 0..iters {
        // Student-t numerators and their total.
        let mut num_sum = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    num[i * n + j] = 0.0;
                    continue;
                }
                let dy0 = y[i * 2] - y[j * 2];
                let dy1 = y[i * 2 + 1] - y[j * 2 + 1];
                let v = 1.0 / (1.0 + dy0 * dy0 + dy1 * dy1);
                num[i * n + j] = v;
                num_sum += v;
            }
        }

        let exaggeration = if iter < exaggeration_iters {
            EXAGGERATION
        } else {
            1.0
        };
        let momentum = if iter < exaggeration_iters { 0.5 } else { 0.8 };

        // Whole-batch gradient, applied synchronously after the loop.
        for i in 0..n {
            let mut g0 = 0.0;
            let mut g1 = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let nij = num[i * n + j];
                let qij = (nij / num_sum).max(P_FLOOR);
                let coef = 4.0 * (exaggeration * p[i * n + j] - qij) * nij;
                g0 += coef * (y[i * 2] - y[j * 2]);
                g1 += coef * (y[i * 2 + 1] - y[j * 2 + 1]);
            }
            grad[i * 2] = g0;
            grad[i * 2 + 1] = g1;
        }
        for (ix, &g) in grad.iter().enumerate() {
            gains[ix] = if (g > 0.0) == (velocity[ix] > 0.0) {
                (gains[ix] * 0.8_f64).max(0.01)
            } else {
                gains[ix] + 0.2
            };
            velocity[ix] = momentum * velocity[ix] - learning_rate * gains[ix] * g;
            y[ix] += velocity[ix];
        }
        // Keep the embedding centered.
        for k in 0..2 {
            let mean: f64 = (0..n).map(|i| y[i * 2 + k]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[i * 2 + k] -= mean;
            }
        }
    }

    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::contract("tsne: embedding diverged to non-finite"));
    }
    Matrix::from_vec(n, 2, y)
}

fn pairwise_sq_dists(x: &Matrix) -> Vec<f64> {
    let n = x.rows();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dist: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i * n + j] = dist;
            d2[j * n + i] = dist;
        }
    }
    d2
}

/// Conditional distributions calibrated per point to `log(perplexity)`
/// entropy, then symmetrized to the joint `p`.
fn joint_probabilities(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target_entropy = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let mut beta = 1.0;
        let mut beta_min = f64::NEG_INFINITY;
        let mut beta_max = f64::INFINITY;
        for _ in 0..BANDWIDTH_SEARCH_ITERS {
            let mut sum_p = 0.0;
            let mut sum_dp = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let pj = (-beta * d2[i * n + j]).exp();
                cond[i * n + j] = pj;
                sum_p += pj;
                sum_dp += beta * d2[i * n + j] * pj;
            }
            // Shannon entropy of the normalized row: ln(sum) + sum_dp / sum.
            let entropy = if sum_p > 0.0 {
                sum_p.ln() + sum_dp / sum_p
            } else {
                0.0
            };
            let diff = entropy - target_entropy;
            if diff.abs() < ENTROPY_TOL {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_infinite() {
                    beta * 2.0
                } else {
                    (beta + beta_max) / 2.0
                };
            } else {
                beta_max = beta;
                beta = if beta_min.is_infinite() {
                    beta / 2.0
                } else {
                    (beta + beta_min) / 2.0
                };
            }
        }
        let row_sum: f64 = (0..n).filter(|&j| j != i).map(|j| cond[i * n + j]).sum();
        if row_sum > 0.0 {
            for j in 0..n {
                if i != j {
                    cond[i * n + j] /= row_sum;
                }
            }
        }
    }

    let mut p = vec![0.0; n * n];
    let scale = 2.0 * n as f64;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / scale).max(P_FLOOR);
            }
        }
    }
    p
}
