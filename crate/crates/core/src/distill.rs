//! Student training: student-driven data collection, per-level buffers,
//! cross-entropy imitation of expert policy targets, and the optional
//! feature-regression loss with an adaptation layer.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{
    act_epsilon_greedy, q_from_probs_row, ReplayBuffer, Support, HIDDEN_DIMS,
};
use crate::env::{pendulum_step, reset, Task, EPISODE_LEN, N_ACTIONS, TORQUES};
use crate::error::{Error, Result};
use crate::math::{adam_step, AdamState, Matrix, MlpNet};
use crate::rng;

/// Expert action distribution for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTarget {
    pub probs: Vec<f64>,
}

impl PolicyTarget {
    pub fn validate(&self) -> Result<()> {
        if self.probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(Error::contract("policy target has invalid mass"));
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("policy target sums to {sum}")));
        }
        Ok(())
    }
}

/// One distillation sample: observation, expert target, and (when the
/// feature loss is enabled) the expert's feature-layer activations.
#[derive(Debug, Clone)]
pub struct DistillSample {
    pub obs: Vec<f64>,
    pub target: PolicyTarget,
    pub expert_features: Option<Vec<f64>>,
}

/// Linear adaptation layer mapping student features into expert feature
/// space for the regression loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Adapter {
    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (2 * dim) as f64).sqrt();
        let data: Vec<f64> = (0..dim * dim)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Adapter {
            weights: Matrix::from_vec(dim, dim, data).expect("sized above"),
            bias: vec![0.0; dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weights = Matrix::zeros(dim, dim);
        for i in 0..dim {
            weights.set(i, i, 1.0);
        }
        Adapter {
            weights,
            bias: vec![0.0; dim],
        }
    }

    pub fn map(&self, features: &[f64]) -> Vec<f64> {
        (0..self.weights.rows())
            .map(|o| {
                self.bias[o]
                    + self
                        .weights
                        .row(o)
                        .iter()
                        .zip(features)
                        .map(|(w, f)| w * f)
                        .sum::<f64>()
            })
            .collect()
    }

    fn param_shapes(&self) -> Vec<usize> {
        vec![self.weights.rows() * self.weights.cols(), self.bias.len()]
    }
}

/// Gradients for the adapter parameters.
#[derive(Debug, Clone)]
pub struct AdapterGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl AdapterGrads {
    fn zeros_like(adapter: &Adapter) -> Self {
        AdapterGrads {
            weights: Matrix::zeros(adapter.weights.rows(), adapter.weights.cols()),
            bias: vec![0.0; adapter.bias.len()],
        }
    }
}

/// Student hyperparameters. Defaults: 25 iterations of 1000 steps, batch
/// 128, lr 5e-3, temperature 1, feature loss off with beta 0.01, per-level
/// buffers of 1000 samples, collection epsilon 0.01.
#[derive(Debug, Clone)]
pub struct StudentConfig {
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub amn_enabled: bool,
    pub amn_beta: f64,
    pub level_buffer_capacity: usize,
    pub collect_epsilon: f64,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            iterations: 25,
            steps_per_iteration: 1000,
            batch_size: 128,
            lr: 5e-3,
            tau: 1.0,
            amn_enabled: false,
            amn_beta: 0.01,
            level_buffer_capacity: 1000,
            collect_epsilon: 0.01,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::contract("tau must be > 0"));
        }
        if self.amn_beta < 0.0 {
            return Err(Error::contract("amn_beta must be >= 0"));
        }
        if self.batch_size == 0 || self.level_buffer_capacity == 0 {
            return Err(Error::contract("batch size and buffer capacity must be >= 1"));
        }
        Ok(())
    }
}

/// Boltzmann policy over the expert's Q-values at temperature `tau`.
pub fn expert_policy(
    expert: &MlpNet,
    support: &Support,
    obs: &[f64],
    tau: f64,
) -> Result<PolicyTarget> {
    if !(tau > 0.0) {
        return Err(Error::contract("tau must be > 0"));
    }
    let cache = expert.forward_one(obs)?;
    let q = q_from_probs_row(cache.probs().row(0), support);
    Ok(PolicyTarget {
        probs: softmax_scaled(&q, tau),
    })
}

fn softmax_scaled(q: &[f64], tau: f64) -> Vec<f64> {
    let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = q.iter().map(|v| ((v - max) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mean cross-entropy between expert targets and the student's softmax over
/// its action logits, with the gradient w.r.t. the logits:
/// `(pi_student - pi_expert) / B`.
pub fn imitation_loss(targets: &Matrix, student_action_logits: &Matrix) -> Result<(f64, Matrix)> {
    if targets.rows() != student_action_logits.rows()
        || targets.cols() != student_action_logits.cols()
    {
        return Err(Error::contract("imitation loss: shape mismatch"));
    }
    let b_n = targets.rows();
    let mut loss = 0.0;
    let mut grads = Matrix::zeros(b_n, targets.cols());
    for b in 0..b_n {
        let pi_s = softmax_scaled(student_action_logits.row(b), 1.0);
        let pi_e = targets.row(b);
        for (a, (&ps, &pe)) in pi_s.iter().zip(pi_e).enumerate() {
            loss -= pe * ps.max(1e-300).ln();
            grads.set(b, a, (ps - pe) / b_n as f64);
        }
    }
    Ok((loss / b_n as f64, grads))
}

/// Squared L2 distance between expert features and adapter-mapped student
/// features, with gradients for the student path and the adapter. The expert
/// side receives no gradient.
pub fn amn_feature_loss(
    expert_feat: &[f64],
    student_feat: &[f64],
    adapter: &Adapter,
) -> Result<(f64, Vec<f64>, AdapterGrads)> {
    if expert_feat.len() != adapter.weights.rows() || student_feat.len() != adapter.weights.cols()
    {
        return Err(Error::contract("feature widths do not match adapter"));
    }
    let mapped = adapter.map(student_feat);
    let residual: Vec<f64> = expert_feat
        .iter()
        .zip(&mapped)
        .map(|(e, m)| e - m)
        .collect();
    let loss: f64 = residual.iter().map(|r| r * r).sum();

    let mut d_student = vec![0.0; student_feat.len()];
    for (o, &r) in residual.iter().enumerate() {
        let w_row = adapter.weights.row(o);
        for (slot, w) in d_student.iter_mut().zip(w_row) {
            *slot -= 2.0 * r * w;
        }
    }
    let mut grads = AdapterGrads::zeros_like(adapter);
    for (o, &r) in residual.iter().enumerate() {
        let g_row = grads.weights.row_mut(o);
        for (slot, &s) in g_row.iter_mut().zip(student_feat) {
            *slot = -2.0 * r * s;
        }
        grads.bias[o] = -2.0 * r;
    }
    Ok((loss, d_student, grads))
}

/// One logged training step of the student.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub ce: f64,
    pub amn: f64,
}

/// A trained student: final network plus per-step loss curve.
#[derive(Debug, Clone)]
pub struct StudentArtifact {
    pub net: MlpNet,
    pub curve: Vec<LossPoint>,
}

/// Distill a set of experts into one student.
///
/// Levels are visited round-robin, one 200-step episode at a time. The
/// student picks the actions (greedy with a small exploration epsilon); each
/// step appends `(obs, expert target[, expert features])` to that level's
/// buffer and takes one gradient step on a batch drawn from the *current*
/// level's buffer. Runs until `iterations * steps_per_iteration` total steps.
pub fn train_student(
    experts: &[(MlpNet, Task)],
    support: &Support,
    cfg: &StudentConfig,
    seed: u64,
) -> Result<StudentArtifact> {
    cfg.validate()?;
    if experts.is_empty() {
        return Err(Error::contract("train_student: need at least one expert"));
    }
    let arch = experts[0].0.layer_dims().to_vec();
    for (net, task) in experts {
        if net.layer_dims() != arch.as_slice() {
            return Err(Error::contract("train_student: experts must share architecture"));
        }
        if net.input_dim() != task.obs_dim() {
            return Err(Error::contract("train_student: expert does not fit its task"));
        }
    }

    let n_levels = experts.len();
    let (n_atoms, input_dim) = (experts[0].0.n_atoms(), experts[0].0.input_dim());
    let mut init_rng = rng::stream(seed, "student-init", &[]);
    let mut student = MlpNet::new(input_dim, &HIDDEN_DIMS, N_ACTIONS, n_atoms, &mut init_rng);
    let mut adam = AdamState::new(&student.param_shapes());

    let mut adapter_rng = rng::stream(seed, "student-adapter", &[]);
    let mut adapter = Adapter::new(student.feature_dim(), &mut adapter_rng);
    let mut adapter_adam = AdamState::new(&adapter.param_shapes());

    let mut env_rng = rng::stream(seed, "student-env", &[]);
    let mut batch_rng = rng::stream(seed, "student-batch", &[]);

    let mut buffers: Vec<ReplayBuffer<DistillSample>> = (0..n_levels)
        .map(|_| ReplayBuffer::new(cfg.level_buffer_capacity))
        .collect();
    let total = (cfg.iterations * cfg.steps_per_iteration) as u64;
    let mut curve = Vec::with_capacity(total as usize);
    let mut step = 0u64;
    let mut episode = 0usize;

    'outer: while step < total {
        let li = episode % n_levels;
        episode += 1;
        let (expert, task) = &experts[li];
        let mut state = reset(&mut env_rng);
        for _ in 0..EPISODE_LEN {
            if step == total {
                break 'outer;
            }
            let obs = task.observe(&state, &mut env_rng);

            let expert_cache = expert.forward_one(&obs)?;
            let q_e = q_from_probs_row(expert_cache.probs().row(0), support);
            let target = PolicyTarget {
                probs: softmax_scaled(&q_e, cfg.tau),
            };
            let expert_features = cfg
                .amn_enabled
                .then(|| expert_cache.features().row(0).to_vec());

            let student_cache = student.forward_one(&obs)?;
            let q_s = q_from_probs_row(student_cache.probs().row(0), support);
            let action = act_epsilon_greedy(&q_s, cfg.collect_epsilon, &mut env_rng)?;

            buffers[li].push(DistillSample {
                obs,
                target,
                expert_features,
            });

            let (ce, amn) = student_update(
                &mut student,
                &mut adam,
                &mut adapter,
                &mut adapter_adam,
                &buffers[li],
                support,
                cfg,
                &mut batch_rng,
            )?;
            if !ce.is_finite() || !amn.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    details: format!("student ce {ce}, feature loss {amn}, level {li}"),
                });
            }
            curve.push(LossPoint { step, ce, amn });

            let (next, _) = pendulum_step(state, TORQUES[action])?;
            state = next;
            step += 1;
        }
    }

    Ok(StudentArtifact {
        net: student,
        curve,
    })
}

#[allow(clippy::too_many_arguments)]
fn student_update(
    student: &mut MlpNet,
    adam: &mut AdamState,
    adapter: &mut Adapter,
    adapter_adam: &mut AdamState,
    buffer: &ReplayBuffer<DistillSample>,
    support: &Support,
    cfg: &StudentConfig,
    batch_rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let b_n = cfg.batch_size;
    let z_n = student.n_atoms();
    let idx = buffer.sample_indices(batch_rng, b_n);
    let obs_rows: Vec<&[f64]> = idx.iter().map(|&i| buffer.get(i).obs.as_slice()).collect();
    let obs_batch = Matrix::from_rows(&obs_rows)?;
    let cache = student.forward(&obs_batch)?;

    // Student action logits are its Q-values over tau.
    let mut targets = Matrix::zeros(b_n, N_ACTIONS);
    let mut logits = Matrix::zeros(b_n, N_ACTIONS);
    for (b, &i) in idx.iter().enumerate() {
        targets.row_mut(b).copy_from_slice(&buffer.get(i).target.probs);
        let q = q_from_probs_row(cache.probs().row(b), support);
        for (a, &qa) in q.iter().enumerate() {
            logits.set(b, a, qa / cfg.tau);
        }
    }
    let (ce_loss, logit_grads) = imitation_loss(&targets, &logits)?;

    // Chain rule into the log-probability outputs:
    // dL/dq = dL/dlogit / tau, dq/d(log p_az) = p_az * z_z.
    let mut upstream = Matrix::zeros(b_n, N_ACTIONS * z_n);
    for b in 0..b_n {
        for a in 0..N_ACTIONS {
            let dq = logit_grads.get(b, a) / cfg.tau;
            if dq != 0.0 {
                for (z, &atom) in support.atoms().iter().enumerate() {
                    let col = a * z_n + z;
                    upstream.set(b, col, dq * cache.probs().get(b, col) * atom);
                }
            }
        }
    }

    let mut amn_mean = 0.0;
    let feature_grad = if cfg.amn_enabled {
        let scale = cfg.amn_beta / b_n as f64;
        let mut fg = Matrix::zeros(b_n, student.feature_dim());
        let mut w_acc = Matrix::zeros(adapter.weights.rows(), adapter.weights.cols());
        let mut b_acc = vec![0.0; adapter.bias.len()];
        for (b, &i) in idx.iter().enumerate() {
            let expert_feat = buffer
                .get(i)
                .expert_features
                .as_ref()
                .ok_or_else(|| Error::contract("feature loss enabled but sample has no features"))?;
            let (loss, d_student, a_grads) =
                amn_feature_loss(expert_feat, cache.features().row(b), adapter)?;
            amn_mean += loss / b_n as f64;
            for (slot, g) in fg.row_mut(b).iter_mut().zip(&d_student) {
                *slot = scale * g;
            }
            for (slot, g) in w_acc.as_mut_slice().iter_mut().zip(a_grads.weights.as_slice()) {
                *slot += scale * g;
            }
            for (slot, g) in b_acc.iter_mut().zip(&a_grads.bias) {
                *slot += scale * g;
            }
        }
        let mut params: Vec<&mut [f64]> =
            vec![adapter.weights.as_mut_slice(), adapter.bias.as_mut_slice()];
        adam_step(
            &mut params,
            &[w_acc.as_slice(), &b_acc],
            adapter_adam,
            cfg.lr,
        )?;
        Some(fg)
    } else {
        None
    };

    let (grads, _) = student.backward(&cache, &upstream, feature_grad.as_ref())?;
    let mut params = student.param_slices_mut();
    adam_step(&mut params, &grads.slices(), adam, cfg.lr)?;
    Ok((ce_loss, amn_mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn small_net(seed: u64) -> MlpNet {
        let mut rng = stream(seed, "distill-test", &[]);
        MlpNet::new(3, &HIDDEN_DIMS, N_ACTIONS, 5, &mut rng)
    }

    #[test]
    fn expert_policy_examples() {
        let uniform = softmax_scaled(&[2.0, 2.0, 2.0], 1.0);
        for p in &uniform {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let p = softmax_scaled(&[1.0, 0.0, 0.0], 1.0);
        assert!((p[0] - 0.5761168847658291).abs() < 1e-10);
        assert!((p[1] - 0.21194155761708544).abs() < 1e-10);
        assert!((p[2] - p[1]).abs() < 1e-15);
        let sharp = softmax_scaled(&[1.0, 0.0, 0.0], 1e-3);
        assert!(sharp[0] > 1.0 - 1e-12);
    }

    #[test]
    fn expert_policy_normalizes() {
        let net = small_net(1);
        let support = Support::new(-1.0, 0.0, 5).unwrap();
        let target = expert_policy(&net, &support, &[0.1, -0.2, 0.4], 1.0).unwrap();
        target.validate().unwrap();
        assert!(expert_policy(&net, &support, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn imitation_loss_minimum_is_target_entropy_with_zero_grad() {
        // Student logits chosen so its softmax equals the target.
        let target = [0.6, 0.3, 0.1];
        let logits: Vec<f64> = target.iter().map(|p: &f64| p.ln()).collect();
        let t = Matrix::from_rows(&[&target]).unwrap();
        let l = Matrix::from_rows(&[&logits]).unwrap();
        let (loss, grads) = imitation_loss(&t, &l).unwrap();
        let entropy: f64 = -target.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((loss - entropy).abs() < 1e-12);
        assert!(grads.as_slice().iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn imitation_loss_uniform_student_example() {
        let t = Matrix::from_rows(&[&[0.5, 0.5, 0.0]]).unwrap();
        let l = Matrix::from_rows(&[&[0.7, 0.7, 0.7]]).unwrap();
        let (loss, _) = imitation_loss(&t, &l).unwrap();
        assert!((loss - 3.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn imitation_loss_decreases_with_margin() {
        let t = Matrix::from_rows(&[&[1.0, 0.0, 0.0]]).unwrap();
        let mut prev = f64::INFINITY;
        for margin in [0.5, 1.0, 2.0, 4.0] {
            let l = Matrix::from_rows(&[&[margin, 0.0, 0.0]]).unwrap();
            let (loss, _) = imitation_loss(&t, &l).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
    }

    #[test]
    fn amn_loss_examples() {
        let adapter = Adapter::identity(4);
        let feat = [0.3, -0.2, 0.9, 0.0];
        let (loss, d_student, _) = amn_feature_loss(&feat, &feat, &adapter).unwrap();
        assert_eq!(loss, 0.0);
        assert!(d_student.iter().all(|&g| g == 0.0));

        let expert = [1.0, 0.0, 0.0, 0.0];
        let student = [0.0, 0.0, 0.0, 0.0];
        let (loss, d_student, grads) = amn_feature_loss(&expert, &student, &adapter).unwrap();
        assert_eq!(loss, 1.0);
        assert_eq!(d_student[0], -2.0);
        assert_eq!(grads.bias[0], -2.0);
    }

    #[test]
    fn amn_gradients_match_finite_differences() {
        let mut rng = stream(4, "amn-fd", &[]);
        let dim = 6;
        let adapter = Adapter::new(dim, &mut rng);
        let expert: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let student: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, d_student, grads) = amn_feature_loss(&expert, &student, &adapter).unwrap();
        let h = 1e-6;
        for i in 0..dim {
            let mut plus = student.clone();
            plus[i] += h;
            let mut minus = student.clone();
            minus[i] -= h;
            let (lp, _, _) = amn_feature_loss(&expert, &plus, &adapter).unwrap();
            let (lm, _, _) = amn_feature_loss(&expert, &minus, &adapter).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - d_student[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for r in 0..dim {
            let mut pa = adapter.clone();
            pa.weights.set(r, 0, pa.weights.get(r, 0) + h);
            let mut ma = adapter.clone();
            ma.weights.set(r, 0, ma.weights.get(r, 0) - h);
            let (lp, _, _) = amn_feature_loss(&expert, &student, &pa).unwrap();
            let (lm, _, _) = amn_feature_loss(&expert, &student, &ma).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - grads.weights.get(r, 0)).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn zero_iterations_returns_the_initialization() {
        let support = Support::new(-1.0, 0.0, 5).unwrap();
        let experts = vec![(small_net(7), Task::Plain)];
        let cfg = StudentConfig {
            iterations: 0,
            ..StudentConfig::default()
        };
        let artifact = train_student(&experts, &support, &cfg, 99).unwrap();
        let mut init_rng = stream(99, "student-init", &[]);
        let fresh = MlpNet::new(3, &HIDDEN_DIMS, N_ACTIONS, 5, &mut init_rng);
        assert_eq!(artifact.net, fresh);
        assert!(artifact.curve.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_leaves_experts_untouched() {
        let support = Support::new(-1.0, 0.0, 5).unwrap();
        let experts = vec![(small_net(8), Task::Plain), (small_net(9), Task::Plain)];
        let before: Vec<MlpNet> = experts.iter().map(|(n, _)| n.clone()).collect();
        let cfg = StudentConfig {
            iterations: 1,
            steps_per_iteration: 150,
            batch_size: 16,
            ..StudentConfig::default()
        };
        let a = train_student(&experts, &support, &cfg, 5).unwrap();
        let b = train_student(&experts, &support, &cfg, 5).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.curve, b.curve);
        for ((net, _), orig) in experts.iter().zip(&before) {
            assert_eq!(net, orig);
        }
    }

    #[test]
    fn architecture_mismatch_is_rejected() {
        let support = Support::new(-1.0, 0.0, 5).unwrap();
        let mut rng = stream(10, "distill-test", &[]);
        let other = MlpNet::new(3, &[16, 16], N_ACTIONS, 5, &mut rng);
        let experts = vec![(small_net(11), Task::Plain), (other, Task::Plain)];
        assert!(train_student(&experts, &support, &StudentConfig::default(), 0).is_err());
    }

    #[test]
    fn amn_training_smoke() {
        let support = Support::new(-1.0, 0.0, 5).unwrap();
        let experts = vec![(small_net(12), Task::Plain)];
        let cfg = StudentConfig {
            iterations: 1,
            steps_per_iteration: 120,
            batch_size: 8,
            amn_enabled: true,
            amn_beta: 0.05,
            ..StudentConfig::default()
        };
        let artifact = train_student(&experts, &support, &cfg, 3).unwrap();
        assert!(artifact.curve.iter().all(|p| p.amn.is_finite()));
        assert!(artifact.curve.iter().any(|p| p.amn > 0.0));
    }
}
