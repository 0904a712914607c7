//! One-vs-rest linear SVM with L2-regularized hinge loss, trained by
//! deterministic full-batch subgradient descent, evaluated by stratified
//! k-fold cross-validation.

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct SvmOptions {
    /// Inverse regularization strength; lambda = 1 / (c * n_train).
    pub c: f64,
    pub max_epochs: usize,
    /// Stop when the best objective has not improved by this much over the
    /// last `PATIENCE` epochs.
    pub tol: f64,
    pub folds: usize,
    /// Keys the per-class shuffles behind the stratified fold assignment.
    pub seed: u64,
}

impl Default for SvmOptions {
    fn default() -> Self {
        SvmOptions {
            c: 1.0,
            max_epochs: 2000,
            tol: 1e-4,
            folds: 5,
            seed: 2,
        }
    }
}

const PATIENCE: usize = 50;

/// Stratified cross-validated accuracy (mean %, std %, per-fold %).
pub fn svm_accuracy(
    z: &Matrix,
    labels: &[usize],
    opts: &SvmOptions,
) -> Result<(f64, f64, Vec<f64>)> {
    if z.rows() != labels.len() || z.rows() == 0 {
        return Err(Error::contract("svm: features and labels must align"));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut present = vec![false; n_classes];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::contract("svm: need at least two classes"));
    }
    if opts.folds < 2 || opts.folds > z.rows() {
        return Err(Error::contract("svm: folds must be in 2..=n"));
    }

    let fold_of = stratified_folds(labels, opts.folds, opts.seed);
    let mut fold_acc = Vec::with_capacity(opts.folds);
    for fold in 0..opts.folds {
        let train_idx: Vec<usize> = (0..z.rows()).filter(|i| fold_of[*i] != fold).collect();
        let test_idx: Vec<usize> = (0..z.rows()).filter(|i| fold_of[*i] == fold).collect();
        let scaler = Scaler::fit(z, &train_idx);
        let classifiers: Vec<Vec<f64>> = (0..n_classes)
            .map(|class| {
                if present[class] {
                    train_binary(z, labels, &train_idx, &scaler, class, opts)
                } else {
                    vec![f64::NEG_INFINITY; z.cols() + 1]
                }
            })
            .collect();
        let mut correct = 0usize;
        for &i in &test_idx {
            let x = scaler.apply(z.row(i));
            let pred = (0..n_classes)
                .max_by(|&a, &b| score(&classifiers[a], &x).total_cmp(&score(&classifiers[b], &x)))
                .expect("classes exist");
            if pred == labels[i] {
                correct += 1;
            }
        }
        fold_acc.push(100.0 * correct as f64 / test_idx.len() as f64);
    }
    let mean = fold_acc.iter().sum::<f64>() / fold_acc.len() as f64;
    let std = super::population_std(&fold_acc);
    Ok((mean, std, fold_acc))
}

/// Per-class index shuffle, then round-robin assignment to folds, so every
/// fold sees close to the class proportions of the full set.
fn stratified_folds(labels: &[usize], folds: usize, seed: u64) -> Vec<usize> {
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut fold_of = vec![0usize; labels.len()];
    for class in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let mut rng = rng::stream(seed, "svm-folds", &[class as u64]);
        idx.shuffle(&mut rng);
        for (pos, &i) in idx.iter().enumerate() {
            fold_of[i] = pos % folds;
        }
    }
    fold_of
}

struct Scaler {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Scaler {
    fn fit(z: &Matrix, idx: &[usize]) -> Self {
        let d = z.cols();
        let n = idx.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in idx {
            for (m, v) in mean.iter_mut().zip(z.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; d];
        for &i in idx {
            for ((s, v), m) in var.iter_mut().zip(z.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var
            .iter()
            .map(|&s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    0.0 // constant column scales to zero
                }
            })
            .collect();
        Scaler { mean, inv_std }
    }

    /// Standardize and append the constant bias feature.
    fn apply(&self, row: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(row.len() + 1);
        for ((v, m), s) in row.iter().zip(&self.mean).zip(&self.inv_std) {
            out.push((v - m) * s);
        }
        out.push(1.0);
        out
    }
}

#[inline]
fn score(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Pegasos-style full-batch subgradient descent on
/// `0.5 * lambda * |w|^2 + mean(hinge)`, keeping the best iterate by
/// objective value.
fn train_binary(
    z: &Matrix,
    labels: &[usize],
    train_idx: &[usize],
    scaler: &Scaler,
    class: usize,
    opts: &SvmOptions,
) -> Vec<f64> {
    let rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| scaler.apply(z.row(i))).collect();
    let y: Vec<f64> = train_idx
        .iter()
        .map(|&i| if labels[i] == class { 1.0 } else { -1.0 })
        .collect();
    let n = rows.len();
    let d = z.cols() + 1;
    let lambda = 1.0 / (opts.c * n as f64);
    let radius = 1.0 / lambda.sqrt();

    let objective = |w: &[f64]| -> f64 {
        let reg = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
        let hinge: f64 = rows
            .iter()
            .zip(&y)
            .map(|(x, &yi)| (1.0 - yi * score(w, x)).max(0.0))
            .sum();
        reg + hinge / n as f64
    };

    let mut w = vec![0.0; d];
    let mut best_w = w.clone();
    let mut best_obj = objective(&w);
    let mut last_improve = 0usize;
    for t in 1..=opts.max_epochs {
        let mut grad: Vec<f64> = w.iter().map(|v| lambda * v).collect();
        for (x, &yi) in rows.iter().zip(&y) {
            if yi * score(&w, x) < 1.0 {
                for (g, xv) in grad.iter_mut().zip(x) {
                    *g -= yi * xv / n as f64;
                }
            }
        }
        let eta = 1.0 / (lambda * (t as f64 + 1.0));
        for (wv, g) in w.iter_mut().zip(&grad) {
            *wv -= eta * g;
        }
        // Project onto the Pegasos feasibility ball.
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if wn > radius {
            let shrink = radius / wn;
            for wv in &mut w {
                *wv *= shrink;
            }
        }
        let obj = objective(&w);
        if obj < best_obj - opts.tol {
            best_obj = obj;
            best_w = w.clone();
            last_improve = t;
        } else if obj < best_obj {
            best_obj = obj;
            best_w = w.clone();
        }
        if t - last_improve >= PATIENCE {
            break;
        }
    }
    best_w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn two_clusters(n_per: usize, gap: f64, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = stream(seed, "svm-test", &[]);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2 {
            let center = if class == 0 { -gap / 2.0 } else { gap / 2.0 };
            for _ in 0..n_per {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                data.extend_from_slice(&[center + 0.3 * a, 0.3 * b]);
                labels.push(class);
            }
        }
        (Matrix::from_vec(2 * n_per, 2, data).unwrap(), labels)
    }

    #[test]
    fn separable_clusters_reach_perfect_accuracy() {
        let (z, labels) = two_clusters(60, 4.0, 1);
        let (mean, std, folds) = svm_accuracy(&z, &labels, &SvmOptions::default()).unwrap();
        assert_eq!(mean, 100.0);
        assert_eq!(std, 0.0);
        assert!(folds.iter().all(|&f| f == 100.0));
    }

    #[test]
    fn shuffled_labels_score_near_chance() {
        let mut rng = stream(3, "svm-shuffle", &[]);
        let n = 600;
        let data: Vec<f64> = (0..n * 4).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = Matrix::from_vec(n, 4, data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let (mean, _, _) = svm_accuracy(&z, &labels, &SvmOptions::default()).unwrap();
        assert!((mean - 100.0 / 3.0).abs() < 5.0, "chance check: {mean}");
    }

    #[test]
    fn single_class_is_contract_violation() {
        let z = Matrix::from_vec(4, 2, vec![0.0; 8]).unwrap();
        assert!(svm_accuracy(&z, &[1, 1, 1, 1], &SvmOptions::default()).is_err());
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<usize> = (0..100).map(|i| i % 2).collect();
        let fold_of = stratified_folds(&labels, 5, 9);
        for fold in 0..5 {
            let class1 = (0..100)
                .filter(|&i| fold_of[i] == fold && labels[i] == 1)
                .count();
            let total = (0..100).filter(|&i| fold_of[i] == fold).count();
            assert_eq!(total, 20);
            assert_eq!(class1, 10);
        }
    }

    #[test]
    fn accuracy_is_deterministic() {
        let (z, labels) = two_clusters(40, 1.0, 5);
        let a = svm_accuracy(&z, &labels, &SvmOptions::default()).unwrap();
        let b = svm_accuracy(&z, &labels, &SvmOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
