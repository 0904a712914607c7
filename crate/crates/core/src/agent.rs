//! Distributional C51 agent: fixed atom support, categorical Bellman
//! projection, replay buffer, epsilon-greedy behavior, and the per-level
//! expert training loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{eval_policy_with_epsilon, EvalGrid};
use crate::env::{pendulum_step, reset, Task, EPISODE_LEN, N_ACTIONS, TORQUES};
use crate::error::{Error, Result};
use crate::math::{adam_step, AdamState, Gradients, Matrix, MlpNet};
use crate::rng;

/// Hidden layer widths of both experts and students.
pub const HIDDEN_DIMS: [usize; 2] = [32, 32];

/// Evenly spaced return atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    pub v_min: f64,
    pub v_max: f64,
    atoms: Vec<f64>,
    delta: f64,
}

impl Support {
    pub fn new(v_min: f64, v_max: f64, n_atoms: usize) -> Result<Self> {
        if !(v_min < v_max) || n_atoms < 2 {
            return Err(Error::contract("support needs v_min < v_max and >= 2 atoms"));
        }
        let delta = (v_max - v_min) / (n_atoms - 1) as f64;
        let mut atoms: Vec<f64> = (0..n_atoms).map(|i| v_min + i as f64 * delta).collect();
        *atoms.last_mut().unwrap() = v_max;
        Ok(Support {
            v_min,
            v_max,
            atoms,
            delta,
        })
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }
}

/// Per-action probability mass over the support atoms, for one state.
#[derive(Debug, Clone)]
pub struct CategoricalValueDist {
    /// `n_actions x n_atoms`.
    pub probs: Matrix,
}

/// Q-values as expectations over atoms: `Q[a] = sum_z probs[a,z] * z`.
pub fn q_values(dist: &CategoricalValueDist, support: &Support) -> Vec<f64> {
    (0..dist.probs.rows())
        .map(|a| expected_value(dist.probs.row(a), support))
        .collect()
}

#[inline]
fn expected_value(atom_probs: &[f64], support: &Support) -> f64 {
    atom_probs
        .iter()
        .zip(support.atoms())
        .map(|(p, z)| p * z)
        .sum()
}

/// Q-values for one sample of a forward cache row (`n_actions * n_atoms`
/// flattened probabilities).
pub fn q_from_probs_row(row: &[f64], support: &Support) -> Vec<f64> {
    let z = support.n_atoms();
    row.chunks_exact(z)
        .map(|chunk| expected_value(chunk, support))
        .collect()
}

/// Argmax with lowest-index tie-breaking.
pub fn greedy(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

/// With probability epsilon a uniform action, otherwise the greedy one.
pub fn act_epsilon_greedy(q: &[f64], epsilon: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::contract(format!("epsilon {epsilon} outside [0, 1]")));
    }
    if rng.random::<f64>() < epsilon {
        Ok(rng.random_range(0..q.len()))
    } else {
        Ok(greedy(q))
    }
}

/// Project the Bellman-shifted next-state distribution back onto the fixed
/// support: each atom's mass `Tz_j = clamp(r + gamma * z_j)` splits linearly
/// between its two bracketing atoms.
pub fn categorical_projection(
    reward: f64,
    terminal: bool,
    next_probs: &[f64],
    support: &Support,
    gamma: f64,
) -> Vec<f64> {
    let n = support.n_atoms();
    let mut out = vec![0.0; n];
    for (j, &mass) in next_probs.iter().enumerate() {
        let tz = if terminal {
            reward
        } else {
            reward + gamma * support.atoms()[j]
        }
        .clamp(support.v_min, support.v_max);
        let b = ((tz - support.v_min) / support.delta()).clamp(0.0, (n - 1) as f64);
        let lo = b.floor() as usize;
        let hi = b.ceil() as usize;
        if lo == hi {
            out[lo] += mass;
        } else {
            out[lo] += mass * (hi as f64 - b);
            out[hi] += mass * (b - lo as f64);
        }
    }
    out
}

/// One environment transition.
#[derive(Debug, Clone)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub terminal: bool,
}

/// Bounded FIFO ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    capacity: usize,
    items: Vec<T>,
    cursor: usize,
}

impl<T> ReplayBuffer<T> {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            items: Vec::new(),
            cursor: 0,
        }
    }

    pub fn push(&mut self, item: T) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            self.items[self.cursor] = item;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &T {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.items.iter()
    }

    /// Uniform indices with replacement.
    pub fn sample_indices(&self, rng: &mut ChaCha8Rng, k: usize) -> Vec<usize> {
        (0..k).map(|_| rng.random_range(0..self.items.len())).collect()
    }
}

/// Expert training hyperparameters. Defaults follow the toy-scale setting:
/// lr 5e-3, batch 128, target update 100, 50k-transition memory, 50
/// iterations of 1000 steps.
#[derive(Debug, Clone)]
pub struct C51Config {
    pub gamma: f64,
    pub n_atoms: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Counted in learning steps.
    pub target_update_period: u64,
    pub min_replay: usize,
    /// Learn every this many environment steps.
    pub update_period: u64,
    pub capacity: usize,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay_steps: u64,
    pub eval_epsilon: f64,
    pub iterations: usize,
    pub steps_per_iteration: usize,
}

impl Default for C51Config {
    fn default() -> Self {
        C51Config {
            gamma: 0.99,
            n_atoms: 51,
            v_min: -800.0,
            v_max: 0.0,
            lr: 5e-3,
            batch_size: 128,
            target_update_period: 100,
            min_replay: 500,
            update_period: 1,
            capacity: 50_000,
            eps_start: 1.0,
            eps_end: 0.01,
            eps_decay_steps: 10_000,
            eval_epsilon: 0.0,
            iterations: 50,
            steps_per_iteration: 1000,
        }
    }
}

impl C51Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_min < self.v_max) {
            return Err(Error::contract("v_min must be < v_max"));
        }
        if self.batch_size > self.capacity || self.batch_size == 0 {
            return Err(Error::contract("batch_size must be in 1..=capacity"));
        }
        if self.update_period == 0 || self.steps_per_iteration == 0 {
            return Err(Error::contract("periods must be >= 1"));
        }
        Ok(())
    }

    /// Linearly decayed exploration rate at environment step `t`.
    pub fn epsilon(&self, t: u64) -> f64 {
        if t >= self.eps_decay_steps {
            self.eps_end
        } else {
            let frac = t as f64 / self.eps_decay_steps as f64;
            self.eps_start + (self.eps_end - self.eps_start) * frac
        }
    }

    pub fn support(&self) -> Result<Support> {
        Support::new(self.v_min, self.v_max, self.n_atoms)
    }
}

/// A trained expert: final network plus the per-iteration fixed-grid
/// evaluation curve (mean, std over grid states).
#[derive(Debug, Clone)]
pub struct ExpertArtifact {
    pub net: MlpNet,
    pub support: Support,
    pub curve: Vec<(f64, f64)>,
}

/// Train a C51 expert on one task.
///
/// Runs `iterations * steps_per_iteration` environment steps. Once the
/// buffer holds `min_replay` transitions, every `update_period`-th step
/// samples a batch, projects the target network's greedy next-state
/// distribution through the Bellman operator, and minimizes the atom
/// cross-entropy for the taken action. The online network is copied to the
/// target every `target_update_period` learning steps. The episode cutoff at
/// 200 steps is a time limit, so transitions are stored non-terminal and
/// bootstrapped.
pub fn train_expert(
    task: &Task,
    cfg: &C51Config,
    grid: &EvalGrid,
    seed: u64,
) -> Result<ExpertArtifact> {
    cfg.validate()?;
    let support = cfg.support()?;
    let mut init_rng = rng::stream(seed, "expert-init", &[]);
    let mut online = MlpNet::new(
        task.obs_dim(),
        &HIDDEN_DIMS,
        N_ACTIONS,
        cfg.n_atoms,
        &mut init_rng,
    );
    let mut target = online.clone();
    let mut adam = AdamState::new(&online.param_shapes());
    let mut env_rng = rng::stream(seed, "expert-env", &[]);
    let mut batch_rng = rng::stream(seed, "expert-batch", &[]);

    let mut replay: ReplayBuffer<Transition> = ReplayBuffer::new(cfg.capacity);
    let mut curve = Vec::with_capacity(cfg.iterations);
    let total = (cfg.iterations * cfg.steps_per_iteration) as u64;

    let mut state = reset(&mut env_rng);
    let mut obs = task.observe(&state, &mut env_rng);
    let mut ep_steps = 0usize;
    let mut learn_steps = 0u64;

    for t in 0..total {
        let epsilon = cfg.epsilon(t);
        // Same draw pattern as act_epsilon_greedy, but the forward pass is
        // skipped when the action is random anyway.
        let action = if env_rng.random::<f64>() < epsilon {
            env_rng.random_range(0..N_ACTIONS)
        } else {
            let cache = online.forward_one(&obs)?;
            greedy(&q_from_probs_row(cache.probs().row(0), &support))
        };
        let (next_state, reward) = pendulum_step(state, TORQUES[action])?;
        let next_obs = task.observe(&next_state, &mut env_rng);
        replay.push(Transition {
            obs: std::mem::replace(&mut obs, next_obs.clone()),
            action,
            reward,
            next_obs,
            terminal: false,
        });
        state = next_state;
        ep_steps += 1;
        if ep_steps == EPISODE_LEN {
            state = reset(&mut env_rng);
            obs = task.observe(&state, &mut env_rng);
            ep_steps = 0;
        }

        if replay.len() >= cfg.min_replay && (t + 1) % cfg.update_period == 0 {
            let (loss, grads) =
                learn_step(&online, &target, &replay, cfg, &support, &mut batch_rng)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: t,
                    details: format!(
                        "expert loss {loss}; replay size {}, epsilon {epsilon:.4}",
                        replay.len()
                    ),
                });
            }
            let mut params = online.param_slices_mut();
            adam_step(&mut params, &grads.slices(), &mut adam, cfg.lr)?;
            learn_steps += 1;
            if learn_steps % cfg.target_update_period == 0 {
                target = online.clone();
            }
        }

        if (t + 1) % cfg.steps_per_iteration as u64 == 0 {
            let (mean, returns) = eval_policy_with_epsilon(&online, task, grid, cfg.eval_epsilon)?;
            let std = crate::analysis::population_std(&returns);
            curve.push((mean, std));
        }
    }

    Ok(ExpertArtifact {
        net: online,
        support,
        curve,
    })
}

/// One batch update; returns (loss, gradients). Kept free of the optimizer
/// so the borrow of `online` stays shared.
fn learn_step(
    online: &MlpNet,
    target: &MlpNet,
    replay: &ReplayBuffer<Transition>,
    cfg: &C51Config,
    support: &Support,
    batch_rng: &mut ChaCha8Rng,
) -> Result<(f64, Gradients)> {
    let b_n = cfg.batch_size;
    let z_n = cfg.n_atoms;
    let idx = replay.sample_indices(batch_rng, b_n);

    let obs_rows: Vec<&[f64]> = idx.iter().map(|&i| replay.get(i).obs.as_slice()).collect();
    let next_rows: Vec<&[f64]> = idx
        .iter()
        .map(|&i| replay.get(i).next_obs.as_slice())
        .collect();
    let obs_batch = Matrix::from_rows(&obs_rows)?;
    let next_batch = Matrix::from_rows(&next_rows)?;

    let target_cache = target.forward(&next_batch)?;
    let online_cache = online.forward(&obs_batch)?;

    let mut loss = 0.0;
    let mut upstream = Matrix::zeros(b_n, N_ACTIONS * z_n);
    for (b, &i) in idx.iter().enumerate() {
        let tr = replay.get(i);
        let q_next = q_from_probs_row(target_cache.probs().row(b), support);
        let a_star = greedy(&q_next);
        let projected = categorical_projection(
            tr.reward,
            tr.terminal,
            target_cache.atom_probs(b, a_star, z_n),
            support,
            cfg.gamma,
        );
        let lp = online_cache.log_probs().row(b);
        let u = upstream.row_mut(b);
        for (z, &m) in projected.iter().enumerate() {
            let col = tr.action * z_n + z;
            loss -= m * lp[col];
            u[col] = -m / b_n as f64;
        }
    }
    loss /= b_n as f64;

    let (grads, _) = online.backward(&online_cache, &upstream, None)?;
    Ok((loss, grads))
}
