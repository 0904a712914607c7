use crate::error::{Error, Result};

/// Bias-corrected Adam moments, shaped like the parameter tensors they
/// update. `t` counts completed steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh zeroed state for tensors of the given flat sizes, with the
    /// canonical constants beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(shapes: &[usize]) -> Self {
        AdamState {
            t: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update over a parameter list; `params[i]` and `grads[i]` must
/// have the shape recorded in the state.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != state.m.len() {
        return Err(Error::contract("adam: tensor count mismatch"));
    }
    for i in 0..params.len() {
        if params[i].len() != state.m[i].len() || grads[i].len() != state.m[i].len() {
            return Err(Error::contract(format!("adam: tensor {i} shape mismatch")));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let g = grads[i];
        let p = &mut *params[i];
        for j in 0..p.len() {
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_params_unchanged() {
        let mut p = vec![0.5, -1.5, 2.0];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(&[3]);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.1).unwrap();
        assert_eq!(p, vec![0.5, -1.5, 2.0]);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        // param 0, grad 1, lr 0.1: bias correction makes m_hat = v_hat = 1,
        // so the update is -0.1 / (1 + eps).
        let mut p = vec![0.0];
        let g = vec![1.0];
        let mut st = AdamState::new(&[1]);
        adam_step(&mut [&mut p], &[&g], &mut st, 0.1).unwrap();
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn identical_params_stay_identical() {
        let mut a = vec![0.3];
        let mut b = vec![0.3];
        let mut st = AdamState::new(&[1, 1]);
        for k in 0..25 {
            let g = vec![(k as f64).sin()];
            adam_step(&mut [&mut a, &mut b], &[&g, &g], &mut st, 0.05).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_contract_violation() {
        let mut p = vec![0.0; 2];
        let g = vec![0.0; 3];
        let mut st = AdamState::new(&[2]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st, 0.1).is_err());
    }

    #[test]
    fn scalar_sequence_matches_reference_formulas() {
        // Independent scalar oracle: track m, v by hand across several steps.
        let mut p = vec![0.7];
        let mut st = AdamState::new(&[1]);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.7f64);
        for k in 1..=10 {
            let g = 0.3 * (k as f64) - 1.0;
            adam_step(&mut [&mut p], &[&[g][..]], &mut st, lr).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(k));
            let vh = v / (1.0 - b2.powi(k));
            x -= lr * mh / (vh.sqrt() + eps);
            assert!((p[0] - x).abs() < 1e-15, "step {k}");
        }
    }
}
