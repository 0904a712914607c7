//! Discretized inverted-pendulum dynamics and the per-level 30-variable
//! observation constructor.
//!
//! A *level* keeps the pendulum dynamics untouched and only changes how the
//! 3-dimensional state is expanded into 30 observation variables:
//!
//! - vars 1-3: `(cos theta, sin theta, theta_dot)`
//! - vars 4-13: level-specific linear recombinations of vars 1-3
//! - vars 14-23: suite-shared linear recombinations plus N(0, 0.05^2) noise
//! - vars 24-26: copies of 3 level-chosen variables among vars 1-23,
//!   duplicated after noise is applied
//! - vars 27-30: pure N(0, 1) noise

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::rng;

/// Discrete torque set.
pub const TORQUES: [f64; 3] = [-2.0, 0.0, 2.0];
pub const N_ACTIONS: usize = 3;
/// Augmented observation width.
pub const OBS_DIM: usize = 30;
/// Steps per episode; the cutoff is a time limit, not a terminal state.
pub const EPISODE_LEN: usize = 200;

const DT: f64 = 0.05;
const MAX_SPEED: f64 = 8.0;

/// Map an angle to `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let r = theta.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Pendulum pose: angle in `(-pi, pi]` (0 = upright), angular velocity
/// clamped to `[-8, 8]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendulumState {
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        PendulumState {
            theta: normalize_angle(theta),
            theta_dot: theta_dot.clamp(-MAX_SPEED, MAX_SPEED),
        }
    }
}

/// One Euler step of the swing-up dynamics. Reward is the negative cost of
/// the state-action pair *before* the update, always <= 0.
pub fn pendulum_step(s: PendulumState, torque: f64) -> Result<(PendulumState, f64)> {
    if !TORQUES.contains(&torque) {
        return Err(Error::contract(format!(
            "torque {torque} outside action set {TORQUES:?}"
        )));
    }
    let cost = normalize_angle(s.theta).powi(2)
        + 0.1 * s.theta_dot.powi(2)
        + 0.001 * torque.powi(2);
    let theta_dot =
        (s.theta_dot + (15.0 * s.theta.sin() + 3.0 * torque) * DT).clamp(-MAX_SPEED, MAX_SPEED);
    let theta = normalize_angle(s.theta + theta_dot * DT);
    Ok((PendulumState { theta, theta_dot }, -cost))
}

/// Initial-state distribution: theta ~ U(-pi, pi), theta_dot ~ U(-1, 1).
pub fn reset(rng: &mut ChaCha8Rng) -> PendulumState {
    PendulumState {
        theta: rng.random_range(-PI..PI),
        theta_dot: rng.random_range(-1.0..1.0),
    }
}

/// Weights shared by every level of a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedSpec {
    /// 10x3, entries drawn U(-1, 1) once per suite.
    pub noisy_weights: Matrix,
    /// Measurement-noise sigma on vars 14-23.
    pub noise_sigma: f64,
}

/// Level-specific observation mapping.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSpec {
    pub level_seed: u64,
    /// 10x3, entries drawn U(-1, 1) per level.
    pub redundant_weights: Matrix,
    /// 1-based indices into vars 1..=23, re-drawn per level.
    pub copy_indices: [usize; 3],
    pub shared: Arc<SharedSpec>,
    /// Sigma of the pure-noise vars 27-30.
    pub pure_noise_sigma: f64,
}

fn uniform_10x3(rng: &mut ChaCha8Rng) -> Matrix {
    let data: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(10, 3, data).expect("sized above")
}

impl LevelSpec {
    /// Deterministically reconstruct a level from its seed and the suite's
    /// shared weights.
    pub fn from_seed(level_seed: u64, shared: Arc<SharedSpec>) -> Self {
        let mut level_rng = rng::stream(level_seed, "level-weights", &[]);
        let redundant_weights = uniform_10x3(&mut level_rng);
        let copy_indices = [
            level_rng.random_range(1..=23),
            level_rng.random_range(1..=23),
            level_rng.random_range(1..=23),
        ];
        LevelSpec {
            level_seed,
            redundant_weights,
            copy_indices,
            shared,
            pure_noise_sigma: 1.0,
        }
    }
}

/// Deterministically draw the shared weights and `n_levels` level specs.
/// The same `(master_seed, n_levels)` reproduces the suite bit-for-bit, and
/// growing `n_levels` leaves earlier levels untouched.
pub fn make_suite(master_seed: u64, n_levels: usize) -> Result<(Arc<SharedSpec>, Vec<LevelSpec>)> {
    if n_levels == 0 {
        return Err(Error::contract("make_suite: n_levels must be >= 1"));
    }
    let mut shared_rng = rng::stream(master_seed, "shared-weights", &[]);
    let shared = Arc::new(SharedSpec {
        noisy_weights: uniform_10x3(&mut shared_rng),
        noise_sigma: 0.05,
    });
    let levels = (0..n_levels)
        .map(|i| {
            let level_seed = rng::mix(master_seed, "level", &[i as u64]);
            LevelSpec::from_seed(level_seed, Arc::clone(&shared))
        })
        .collect();
    Ok((shared, levels))
}

/// Seed for a held-out test level, from a stream disjoint from `make_suite`'s
/// "level" streams.
pub fn test_level_seed(eval_seed: u64, index: usize) -> u64 {
    rng::mix(eval_seed, "test-level", &[index as u64])
}

/// Build the 30-variable observation for a state. Draws 14 normal variates
/// from `rng` (10 measurement-noise, 4 pure-noise), in index order.
pub fn observe(level: &LevelSpec, s: &PendulumState, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut v = vec![0.0; OBS_DIM];
    v[0] = s.theta.cos();
    v[1] = s.theta.sin();
    v[2] = s.theta_dot;
    for r in 0..10 {
        let w = level.redundant_weights.row(r);
        v[3 + r] = w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
    }
    for r in 0..10 {
        let w = level.shared.noisy_weights.row(r);
        let noise: f64 = StandardNormal.sample(rng);
        v[13 + r] = w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + level.shared.noise_sigma * noise;
    }
    for (k, &ix) in level.copy_indices.iter().enumerate() {
        v[23 + k] = v[ix - 1];
    }
    for k in 0..4 {
        let noise: f64 = StandardNormal.sample(rng);
        v[26 + k] = level.pure_noise_sigma * noise;
    }
    v
}

/// What an agent observes: either the bare 3-variable pendulum state or the
/// 30-variable confounded mapping of one level.
#[derive(Debug, Clone)]
pub enum Task {
    Plain,
    Level(LevelSpec),
}

impl Task {
    pub fn obs_dim(&self) -> usize {
        match self {
            Task::Plain => 3,
            Task::Level(_) => OBS_DIM,
        }
    }

    /// Identifier used to key frozen evaluation noise streams.
    pub fn stream_id(&self) -> u64 {
        match self {
            Task::Plain => 0,
            Task::Level(level) => level.level_seed,
        }
    }

    pub fn observe(&self, s: &PendulumState, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Task::Plain => vec![s.theta.cos(), s.theta.sin(), s.theta_dot],
            Task::Level(level) => observe(level, s, rng),
        }
    }
}

// --- suite manifest -------------------------------------------------------
//
// Text serialization of a suite so it is portable across builds and
// languages. Weights are written as decimal literals with 17 significant
// digits, which round-trips f64 exactly.

fn write_weights(out: &mut String, m: &Matrix) {
    for r in 0..m.rows() {
        let row = m.row(r);
        let _ = writeln!(out, "{:.16e} {:.16e} {:.16e}", row[0], row[1], row[2]);
    }
}

pub fn suite_to_manifest(master_seed: u64, shared: &SharedSpec, levels: &[LevelSpec]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "pendulum-suite v1");
    let _ = writeln!(out, "master_seed {master_seed}");
    let _ = writeln!(out, "n_levels {}", levels.len());
    let _ = writeln!(out, "noise_sigma {:.16e}", shared.noise_sigma);
    let _ = writeln!(out, "shared_weights");
    write_weights(&mut out, &shared.noisy_weights);
    for (i, level) in levels.iter().enumerate() {
        let _ = writeln!(out, "level {i}");
        let _ = writeln!(out, "seed {}", level.level_seed);
        let _ = writeln!(
            out,
            "copy_indices {} {} {}",
            level.copy_indices[0], level.copy_indices[1], level.copy_indices[2]
        );
        let _ = writeln!(out, "pure_noise_sigma {:.16e}", level.pure_noise_sigma);
        let _ = writeln!(out, "redundant_weights");
        write_weights(&mut out, &level.redundant_weights);
    }
    out
}

struct ManifestReader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    path: &'a Path,
}

impl<'a> ManifestReader<'a> {
    fn next_line(&mut self) -> Result<(u64, &'a str)> {
        for (i, line) in self.lines.by_ref() {
            let line = line.trim();
            if !line.is_empty() {
                return Ok((i as u64 + 1, line));
            }
        }
        Err(Error::Parse {
            path: self.path.to_path_buf(),
            offset: 0,
            what: "unexpected end of manifest".into(),
        })
    }

    fn err(&self, offset: u64, what: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset,
            what: what.into(),
        }
    }

    fn expect_kv(&mut self, key: &str) -> Result<(u64, Vec<&'a str>)> {
        let (n, line) = self.next_line()?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some(head) if head == key => Ok((n, parts.collect())),
            _ => Err(self.err(n, format!("expected `{key} ...`, got `{line}`"))),
        }
    }

    fn read_weights(&mut self) -> Result<Matrix> {
        let mut data = Vec::with_capacity(30);
        for _ in 0..10 {
            let (n, line) = self.next_line()?;
            for tok in line.split_whitespace() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| self.err(n, format!("bad real `{tok}`")))?;
                data.push(v);
            }
            if data.len() % 3 != 0 {
                return Err(self.err(n, "weight row must have 3 entries"));
            }
        }
        Matrix::from_vec(10, 3, data)
            .map_err(|e| self.err(0, format!("bad weight matrix: {e}")))
    }
}

fn parse_one<T: std::str::FromStr>(
    reader: &ManifestReader,
    n: u64,
    fields: &[&str],
    what: &str,
) -> Result<T> {
    fields
        .first()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| reader.err(n, format!("bad {what}")))
}

/// Parse a suite manifest back into `(master_seed, shared, levels)`. Values
/// are taken from the literals in the file, not re-derived from seeds.
pub fn suite_from_manifest(
    text: &str,
    path: &Path,
) -> Result<(u64, Arc<SharedSpec>, Vec<LevelSpec>)> {
    let mut r = ManifestReader {
        lines: text.lines().enumerate(),
        path,
    };
    let (n, header) = r.next_line()?;
    if header != "pendulum-suite v1" {
        return Err(r.err(n, format!("unknown header `{header}`")));
    }
    let (n, f) = r.expect_kv("master_seed")?;
    let master_seed: u64 = parse_one(&r, n, &f, "master_seed")?;
    let (n, f) = r.expect_kv("n_levels")?;
    let n_levels: usize = parse_one(&r, n, &f, "n_levels")?;
    let (n, f) = r.expect_kv("noise_sigma")?;
    let noise_sigma: f64 = parse_one(&r, n, &f, "noise_sigma")?;
    r.expect_kv("shared_weights")?;
    let shared = Arc::new(SharedSpec {
        noisy_weights: r.read_weights()?,
        noise_sigma,
    });

    let mut levels = Vec::with_capacity(n_levels);
    for i in 0..n_levels {
        let (n, f) = r.expect_kv("level")?;
        let got: usize = parse_one(&r, n, &f, "level index")?;
        if got != i {
            return Err(r.err(n, format!("expected level {i}, got {got}")));
        }
        let (n, f) = r.expect_kv("seed")?;
        let level_seed: u64 = parse_one(&r, n, &f, "seed")?;
        let (n, f) = r.expect_kv("copy_indices")?;
        if f.len() != 3 {
            return Err(r.err(n, "copy_indices needs 3 entries"));
        }
        let mut copy_indices = [0usize; 3];
        for (slot, tok) in copy_indices.iter_mut().zip(&f) {
            *slot = tok
                .parse()
                .map_err(|_| r.err(n, format!("bad copy index `{tok}`")))?;
            if !(1..=23).contains(slot) {
                return Err(r.err(n, format!("copy index {slot} outside 1..=23")));
            }
        }
        let (n, f) = r.expect_kv("pure_noise_sigma")?;
        let pure_noise_sigma: f64 = parse_one(&r, n, &f, "pure_noise_sigma")?;
        r.expect_kv("redundant_weights")?;
        let redundant_weights = r.read_weights()?;
        levels.push(LevelSpec {
            level_seed,
            redundant_weights,
            copy_indices,
            shared: Arc::clone(&shared),
            pure_noise_sigma,
        });
    }
    Ok((master_seed, shared, levels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn upright_zero_torque_is_a_fixed_point() {
        let s = PendulumState::new(0.0, 0.0);
        let (s2, r) = pendulum_step(s, 0.0).unwrap();
        assert_eq!(s2, s);
        assert_eq!(r, 0.0);
    }

    #[test]
    fn hanging_state_step_matches_hand_evaluation() {
        let s = PendulumState::new(PI, 0.0);
        let (s2, r) = pendulum_step(s, 2.0).unwrap();
        // theta_dot' = (15 sin(pi) + 6) * 0.05 = 0.3 up to sin(pi) rounding
        assert!((s2.theta_dot - 0.3).abs() < 1e-12);
        assert!((s2.theta - normalize_angle(PI + s2.theta_dot * 0.05)).abs() < 1e-12);
        assert!((r - -(PI * PI + 0.004)).abs() < 1e-9);
    }

    #[test]
    fn speed_clamps_at_eight() {
        // At theta = pi/2 gravity accelerates: 8 + (15 + 6) * 0.05 > 8.
        let s = PendulumState::new(PI / 2.0, 8.0);
        let (s2, _) = pendulum_step(s, 2.0).unwrap();
        assert_eq!(s2.theta_dot, 8.0);
    }

    #[test]
    fn invalid_torque_is_rejected() {
        assert!(pendulum_step(PendulumState::new(0.0, 0.0), 1.0).is_err());
    }

    #[test]
    fn rewards_are_bounded_per_step() {
        let mut rng = stream(1, "bound", &[]);
        for _ in 0..2000 {
            let s = PendulumState::new(
                rng.random_range(-PI..PI),
                rng.random_range(-MAX_SPEED..MAX_SPEED),
            );
            let u = TORQUES[rng.random_range(0..3)];
            let (_, r) = pendulum_step(s, u).unwrap();
            assert!(r <= 0.0 && r >= -16.28);
        }
    }

    #[test]
    fn reset_distribution_support() {
        let mut rng = stream(5, "reset", &[]);
        let mut mean_theta = 0.0;
        for _ in 0..10_000 {
            let s = reset(&mut rng);
            assert!(s.theta > -PI && s.theta <= PI);
            assert!(s.theta_dot.abs() <= 1.0);
            mean_theta += s.theta;
        }
        assert!((mean_theta / 10_000.0).abs() < 0.1);
    }

    #[test]
    fn suite_is_deterministic_and_per_level_distinct() {
        let (sh1, lv1) = make_suite(42, 12).unwrap();
        let (sh2, lv2) = make_suite(42, 12).unwrap();
        assert_eq!(*sh1, *sh2);
        assert_eq!(lv1, lv2);
        assert_ne!(lv1[0].redundant_weights, lv1[1].redundant_weights);
        for level in &lv1 {
            assert!(level
                .redundant_weights
                .as_slice()
                .iter()
                .chain(sh1.noisy_weights.as_slice())
                .all(|v| (-1.0..1.0).contains(v)));
        }
    }

    #[test]
    fn growing_the_suite_preserves_existing_levels() {
        let (_, small) = make_suite(7, 3).unwrap();
        let (_, big) = make_suite(7, 8).unwrap();
        assert_eq!(small, big[..3]);
    }

    #[test]
    fn make_suite_rejects_zero_levels() {
        assert!(make_suite(1, 0).is_err());
    }

    #[test]
    fn observe_layout_zero_weights() {
        let shared = Arc::new(SharedSpec {
            noisy_weights: Matrix::zeros(10, 3),
            noise_sigma: 0.0,
        });
        let level = LevelSpec {
            level_seed: 0,
            redundant_weights: Matrix::zeros(10, 3),
            copy_indices: [4, 5, 6],
            shared,
            pure_noise_sigma: 0.0,
        };
        let mut rng = stream(0, "obs", &[]);
        let v = observe(&level, &PendulumState::new(0.0, 0.0), &mut rng);
        assert_eq!(&v[0..3], &[1.0, 0.0, 0.0]);
        assert!(v[3..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn observe_redundant_row_is_exact_dot_product() {
        let shared = Arc::new(SharedSpec {
            noisy_weights: Matrix::zeros(10, 3),
            noise_sigma: 0.0,
        });
        let mut red = Matrix::zeros(10, 3);
        red.set(0, 0, 0.5);
        red.set(0, 1, -0.5);
        let level = LevelSpec {
            level_seed: 0,
            redundant_weights: red,
            copy_indices: [1, 2, 3],
            shared,
            pure_noise_sigma: 0.0,
        };
        let mut rng = stream(0, "obs", &[]);
        let v = observe(&level, &PendulumState::new(0.0, 0.0), &mut rng);
        assert_eq!(v[3], 0.5);
        // copies duplicate realized values
        assert_eq!(&v[23..26], &[v[0], v[1], v[2]]);
    }

    #[test]
    fn observe_noise_placement() {
        let (_, levels) = make_suite(3, 1).unwrap();
        let level = &levels[0];
        let s = PendulumState::new(0.7, -0.3);
        let mut rng = stream(9, "noise", &[]);
        let a = observe(level, &s, &mut rng);
        let b = observe(level, &s, &mut rng);
        assert_eq!(&a[0..13], &b[0..13]);
        assert!(a[13..23].iter().zip(&b[13..23]).all(|(x, y)| x != y));
        assert!(a[26..30].iter().zip(&b[26..30]).all(|(x, y)| x != y));
    }

    #[test]
    fn noisy_vars_reconstruct_with_sigma_residual() {
        let (_, levels) = make_suite(11, 1).unwrap();
        let level = &levels[0];
        let mut rng = stream(2, "resid", &[]);
        let mut sq = vec![0.0; 10];
        let n = 4000;
        for _ in 0..n {
            let s = reset(&mut rng);
            let v = observe(level, &s, &mut rng);
            for r in 0..10 {
                let w = level.shared.noisy_weights.row(r);
                let clean = w[0] * v[0] + w[1] * v[1] + w[2] * v[2];
                sq[r] += (v[13 + r] - clean).powi(2);
            }
        }
        for r in 0..10 {
            let sd = (sq[r] / n as f64).sqrt();
            assert!((sd - 0.05).abs() < 0.01, "row {r}: residual sd {sd}");
        }
    }

    #[test]
    fn manifest_roundtrip_is_exact() {
        let (shared, levels) = make_suite(123, 4).unwrap();
        let text = suite_to_manifest(123, &shared, &levels);
        let (seed, shared2, levels2) =
            suite_from_manifest(&text, Path::new("suite.txt")).unwrap();
        assert_eq!(seed, 123);
        assert_eq!(*shared, *shared2);
        assert_eq!(levels, levels2);
    }

    #[test]
    fn manifest_parse_errors_name_the_line() {
        let (shared, levels) = make_suite(123, 1).unwrap();
        let mut text = suite_to_manifest(123, &shared, &levels);
        text = text.replace("copy_indices", "copy_idx");
        match suite_from_manifest(&text, Path::new("suite.txt")) {
            Err(Error::Parse { offset, .. }) => assert!(offset > 0),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
