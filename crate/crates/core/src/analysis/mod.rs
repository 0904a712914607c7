//! Measurable pipelines for the three evaluation criteria: fixed-grid
//! policy evaluation, gradient feature importance (with the thresholded
//! variable count), feature-layer embeddings with PLS/SVM separability and
//! t-SNE, and held-out-level robustness.

mod pls;
mod svm;
mod tsne;

pub use pls::{pls_fit, PlsProjection};
pub use svm::{svm_accuracy, SvmOptions};
pub use tsne::tsne_embed;

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::agent::{greedy, q_from_probs_row, Support};
use crate::env::{
    pendulum_step, reset, LevelSpec, PendulumState, SharedSpec, Task, EPISODE_LEN, TORQUES,
};
use crate::error::{Error, Result};
use crate::math::{Matrix, MlpNet};
use crate::rng;

/// Number of evaluation start states.
pub const GRID_SIZE: usize = 50;

/// A frozen set of 50 initial states drawn once from the reset distribution,
/// plus the seed that keys the per-(task, state) observation-noise streams.
/// Every agent compared within a study is evaluated on the same grid with
/// the same noise realizations.
#[derive(Debug, Clone)]
pub struct EvalGrid {
    pub seed: u64,
    pub states: Vec<PendulumState>,
}

impl EvalGrid {
    pub fn new(seed: u64) -> Self {
        let mut state_rng = rng::stream(seed, "grid-states", &[]);
        EvalGrid {
            seed,
            states: (0..GRID_SIZE).map(|_| reset(&mut state_rng)).collect(),
        }
    }

    fn noise_stream(&self, task: &Task, state_index: usize) -> ChaCha8Rng {
        rng::stream(
            self.seed,
            "grid-noise",
            &[task.stream_id(), state_index as u64],
        )
    }

    fn importance_stream(&self, task: &Task, state_index: usize) -> ChaCha8Rng {
        rng::stream(
            self.seed,
            "grid-importance-noise",
            &[task.stream_id(), state_index as u64],
        )
    }
}

pub fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Greedy fixed-grid evaluation: 200-step rollouts from each grid state with
/// deterministic observation-noise streams; returns the mean and per-state
/// undiscounted returns.
pub fn eval_policy(net: &MlpNet, task: &Task, grid: &EvalGrid) -> Result<(f64, Vec<f64>)> {
    eval_policy_with_epsilon(net, task, grid, 0.0)
}

pub fn eval_policy_with_epsilon(
    net: &MlpNet,
    task: &Task,
    grid: &EvalGrid,
    epsilon: f64,
) -> Result<(f64, Vec<f64>)> {
    let support = support_for(net)?;
    let mut returns = Vec::with_capacity(grid.states.len());
    for (j, &start) in grid.states.iter().enumerate() {
        let mut noise_rng = grid.noise_stream(task, j);
        let mut explore_rng =
            rng::stream(grid.seed, "grid-explore", &[task.stream_id(), j as u64]);
        let mut state = start;
        let mut ret = 0.0;
        for _ in 0..EPISODE_LEN {
            let obs = task.observe(&state, &mut noise_rng);
            let cache = net.forward_one(&obs)?;
            let q = q_from_probs_row(cache.probs().row(0), &support);
            let action = crate::agent::act_epsilon_greedy(&q, epsilon, &mut explore_rng)?;
            let (next, reward) = pendulum_step(state, TORQUES[action])?;
            ret += reward;
            state = next;
        }
        returns.push(ret);
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok((mean, returns))
}

/// Uniform-random policy baseline on the same grid and noise protocol.
pub fn random_policy_returns(task: &Task, grid: &EvalGrid, seed: u64) -> Result<(f64, Vec<f64>)> {
    use rand::Rng;
    let mut returns = Vec::with_capacity(grid.states.len());
    for (j, &start) in grid.states.iter().enumerate() {
        let mut action_rng = rng::stream(seed, "random-policy", &[task.stream_id(), j as u64]);
        let mut state = start;
        let mut ret = 0.0;
        for _ in 0..EPISODE_LEN {
            let action = action_rng.random_range(0..TORQUES.len());
            let (next, reward) = pendulum_step(state, TORQUES[action])?;
            ret += reward;
            state = next;
        }
        returns.push(ret);
    }
    let mean = returns.iter().sum::<f64>() / returns.len() as f64;
    Ok((mean, returns))
}

/// The support an analysis assumes when reading a network's value head.
/// Analyses only need greedy actions, which are invariant to the affine
/// support placement, so a canonical default support is used.
fn support_for(net: &MlpNet) -> Result<Support> {
    Support::new(-800.0, 0.0, net.n_atoms())
}

/// Per-variable importance: `profile[i] = sum_j |dQ_a*/ds^i (s_j)|` over the
/// grid states, where the scalar output is the greedy action's Q-value and
/// each grid observation uses a frozen per-(task, state) noise stream.
pub fn feature_importance(net: &MlpNet, task: &Task, grid: &EvalGrid) -> Result<Vec<f64>> {
    let support = support_for(net)?;
    feature_importance_with(net, task, grid, &support)
}

fn feature_importance_with(
    net: &MlpNet,
    task: &Task,
    grid: &EvalGrid,
    support: &Support,
) -> Result<Vec<f64>> {
    let z_n = net.n_atoms();
    let mut profile = vec![0.0; task.obs_dim()];
    for (j, &state) in grid.states.iter().enumerate() {
        let mut noise_rng = grid.importance_stream(task, j);
        let obs = task.observe(&state, &mut noise_rng);
        let cache = net.forward_one(&obs)?;
        let q = q_from_probs_row(cache.probs().row(0), support);
        let a_star = greedy(&q);
        // dQ/d(log p_az) = p_az * z_z for the greedy action, zero elsewhere.
        let mut upstream = Matrix::zeros(1, net.n_actions() * z_n);
        for (z, &atom) in support.atoms().iter().enumerate() {
            let col = a_star * z_n + z;
            upstream.set(0, col, cache.probs().get(0, col) * atom);
        }
        let (_, input_grad) = net.backward(&cache, &upstream, None)?;
        for (slot, g) in profile.iter_mut().zip(input_grad.row(0)) {
            *slot += g.abs();
        }
    }
    Ok(profile)
}

/// Count variables whose min-max-scaled importance exceeds `eps`. A constant
/// profile scales to all zeros and counts zero.
pub fn importance_count(profile: &[f64], eps: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&eps) || eps == 0.0 {
        return Err(Error::contract(format!("eps {eps} outside (0, 1)")));
    }
    let max = profile.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = profile.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > min) {
        return Ok(0);
    }
    Ok(profile
        .iter()
        .filter(|&&v| (v - min) / (max - min) > eps)
        .count())
}

/// Feature-layer activations of greedy rollouts, labeled with the network's
/// own greedy actions.
#[derive(Debug, Clone)]
pub struct EmbeddingSet {
    /// `N x feature_dim`.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub level_ids: Vec<usize>,
}

/// Roll greedy episodes on each task until `n_per_level` states are
/// recorded per task.
pub fn collect_embeddings(
    net: &MlpNet,
    tasks: &[Task],
    n_per_level: usize,
    seed: u64,
) -> Result<EmbeddingSet> {
    if n_per_level == 0 || tasks.is_empty() {
        return Err(Error::contract("collect_embeddings: empty request"));
    }
    let support = support_for(net)?;
    let f_dim = net.feature_dim();
    let mut features = Matrix::zeros(tasks.len() * n_per_level, f_dim);
    let mut labels = Vec::with_capacity(tasks.len() * n_per_level);
    let mut level_ids = Vec::with_capacity(tasks.len() * n_per_level);
    let mut row = 0;
    for (li, task) in tasks.iter().enumerate() {
        let mut env_rng = rng::stream(seed, "embed", &[li as u64]);
        let mut collected = 0;
        'episodes: loop {
            let mut state = reset(&mut env_rng);
            for _ in 0..EPISODE_LEN {
                let obs = task.observe(&state, &mut env_rng);
                let cache = net.forward_one(&obs)?;
                let q = q_from_probs_row(cache.probs().row(0), &support);
                let action = greedy(&q);
                features.row_mut(row).copy_from_slice(cache.features().row(0));
                labels.push(action);
                level_ids.push(li);
                row += 1;
                collected += 1;
                if collected == n_per_level {
                    break 'episodes;
                }
                let (next, _) = pendulum_step(state, TORQUES[action])?;
                state = next;
            }
        }
    }
    Ok(EmbeddingSet {
        features,
        labels,
        level_ids,
    })
}

/// Accuracy of one dimensionality setting of the separability analysis.
#[derive(Debug, Clone)]
pub struct DimAccuracy {
    pub dim: usize,
    pub mean: f64,
    pub std: f64,
    pub folds: Vec<f64>,
}

/// PLS-project the embedding to each requested dimension and report the
/// cross-validated linear-SVM accuracy of predicting the greedy action.
pub fn separability(
    set: &EmbeddingSet,
    dims: &[usize],
    opts: &SvmOptions,
) -> Result<Vec<DimAccuracy>> {
    let n_classes = set.labels.iter().max().map_or(0, |m| m + 1);
    let mut onehot = Matrix::zeros(set.labels.len(), n_classes);
    for (i, &l) in set.labels.iter().enumerate() {
        onehot.set(i, l, 1.0);
    }
    let mut out = Vec::with_capacity(dims.len());
    for &dim in dims {
        let proj = pls_fit(&set.features, &onehot, dim)?;
        let z = proj.project(&set.features);
        let (mean, std, folds) = svm_accuracy(&z, &set.labels, opts)?;
        out.push(DimAccuracy {
            dim,
            mean,
            std,
            folds,
        });
    }
    Ok(out)
}

/// Held-out-level score distribution for a student.
#[derive(Debug, Clone)]
pub struct RobustnessReport {
    /// (test level seed, fixed-grid mean return) per fresh level.
    pub per_level: Vec<(u64, f64)>,
    pub mean: f64,
}

/// Draw `n_test_levels` fresh levels under the same shared weights (seeds
/// disjoint from training levels by stream construction) and evaluate the
/// student on each with the fixed grid.
pub fn robustness_eval(
    student: &MlpNet,
    shared: &Arc<SharedSpec>,
    n_test_levels: usize,
    grid: &EvalGrid,
    eval_seed: u64,
) -> Result<RobustnessReport> {
    if n_test_levels == 0 {
        return Err(Error::contract("robustness_eval: empty distribution"));
    }
    let mut per_level = Vec::with_capacity(n_test_levels);
    for i in 0..n_test_levels {
        let seed = crate::env::test_level_seed(eval_seed, i);
        let level = LevelSpec::from_seed(seed, Arc::clone(shared));
        let task = Task::Level(level);
        let (mean, _) = eval_policy(student, &task, grid)?;
        per_level.push((seed, mean));
    }
    let mean = per_level.iter().map(|(_, m)| m).sum::<f64>() / n_test_levels as f64;
    Ok(RobustnessReport { per_level, mean })
}
