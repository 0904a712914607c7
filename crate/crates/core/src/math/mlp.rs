use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Fully connected ReLU network with a categorical value head: the final
/// linear layer emits `n_actions * n_atoms` logits, normalized per action by
/// a log-softmax over atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    layer_dims: Vec<usize>,
    /// `weights[k]` has shape `layer_dims[k+1] x layer_dims[k]` (out x in).
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    n_actions: usize,
    n_atoms: usize,
}

/// Everything the backward pass needs from a forward evaluation.
pub struct ForwardCache {
    input: Matrix,
    /// Pre-activations per layer.
    pre: Vec<Matrix>,
    /// Post-ReLU activations per hidden layer.
    post: Vec<Matrix>,
    log_probs: Matrix,
    probs: Matrix,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// Per-action atom log-probabilities, flattened `n_actions * n_atoms`.
    pub fn log_probs(&self) -> &Matrix {
        &self.log_probs
    }

    /// Per-action atom probabilities, flattened `n_actions * n_atoms`.
    pub fn probs(&self) -> &Matrix {
        &self.probs
    }

    /// Activations of the last hidden layer (the feature layer).
    pub fn features(&self) -> &Matrix {
        self.post.last().expect("network has a hidden layer")
    }

    pub fn atom_probs(&self, sample: usize, action: usize, n_atoms: usize) -> &[f64] {
        &self.probs.row(sample)[action * n_atoms..(action + 1) * n_atoms]
    }
}

/// Parameter-shaped gradient bundle.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Gradients {
            weights: net
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .map(|w| w.as_slice())
            .chain(self.biases.iter().map(|b| b.as_slice()))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

impl MlpNet {
    /// Glorot-uniform weights in `±sqrt(6/(fan_in+fan_out))`, zero biases.
    pub fn new(
        input_dim: usize,
        hidden_dims: &[usize],
        n_actions: usize,
        n_atoms: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut layer_dims = vec![input_dim];
        layer_dims.extend_from_slice(hidden_dims);
        layer_dims.push(n_actions * n_atoms);

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..layer_dims.len() - 1 {
            let (fan_in, fan_out) = (layer_dims[k], layer_dims[k + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data).expect("sized above"));
            biases.push(vec![0.0; fan_out]);
        }
        MlpNet {
            layer_dims,
            weights,
            biases,
            n_actions,
            n_atoms,
        }
    }

    /// Build a network from explicit parameters (checkpoint loading, tests).
    pub fn from_parts(
        layer_dims: Vec<usize>,
        weights: Vec<Matrix>,
        biases: Vec<Vec<f64>>,
        n_actions: usize,
        n_atoms: usize,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || weights.len() != layer_dims.len() - 1 {
            return Err(Error::contract("layer dims and weights do not chain"));
        }
        if *layer_dims.last().unwrap() != n_actions * n_atoms {
            return Err(Error::contract("output dim must equal n_actions * n_atoms"));
        }
        for k in 0..weights.len() {
            if weights[k].rows() != layer_dims[k + 1]
                || weights[k].cols() != layer_dims[k]
                || biases[k].len() != layer_dims[k + 1]
            {
                return Err(Error::contract(format!("layer {k} shape mismatch")));
            }
        }
        Ok(MlpNet {
            layer_dims,
            weights,
            biases,
            n_actions,
            n_atoms,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    /// Mutable views of every parameter tensor, weights first then biases,
    /// in layer order. This is the ordering checkpoints and Adam state use.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .map(|w| w.as_mut_slice())
            .chain(self.biases.iter_mut().map(|b| b.as_mut_slice()))
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<usize> {
        self.weights
            .iter()
            .map(|w| w.rows() * w.cols())
            .chain(self.biases.iter().map(|b| b.len()))
            .collect()
    }

    fn linear(&self, k: usize, input: &Matrix) -> Matrix {
        let w = &self.weights[k];
        let b = &self.biases[k];
        let mut out = Matrix::zeros(input.rows(), w.rows());
        for r in 0..input.rows() {
            let x = input.row(r);
            let out_row = out.row_mut(r);
            for (o, slot) in out_row.iter_mut().enumerate() {
                let w_row = w.row(o);
                let mut acc = b[o];
                for (xi, wi) in x.iter().zip(w_row) {
                    acc += xi * wi;
                }
                *slot = acc;
            }
        }
        out
    }

    /// Forward pass over a batch; per-action atom softmax via max-subtracted
    /// log-sum-exp.
    pub fn forward(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(Error::contract(format!(
                "batch has {} columns, network expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        if !batch.is_finite() {
            return Err(Error::contract("batch contains non-finite inputs"));
        }
        let n_layers = self.weights.len();
        let mut pre = Vec::with_capacity(n_layers);
        let mut post = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut act = batch.clone();
        for k in 0..n_layers {
            let z = self.linear(k, &act);
            if k + 1 < n_layers {
                let mut a = z.clone();
                for v in a.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                pre.push(z);
                act = a.clone();
                post.push(a);
            } else {
                pre.push(z);
            }
        }

        let logits = pre.last().expect("at least one layer");
        let b_n = logits.rows();
        let (a_n, z_n) = (self.n_actions, self.n_atoms);
        let mut log_probs = Matrix::zeros(b_n, a_n * z_n);
        let mut probs = Matrix::zeros(b_n, a_n * z_n);
        for b in 0..b_n {
            let row = logits.row(b);
            for a in 0..a_n {
                let chunk = &row[a * z_n..(a + 1) * z_n];
                let max = chunk.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = chunk.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                for z in 0..z_n {
                    let lp = chunk[z] - lse;
                    log_probs.set(b, a * z_n + z, lp);
                    probs.set(b, a * z_n + z, lp.exp());
                }
            }
        }
        Ok(ForwardCache {
            input: batch.clone(),
            pre,
            post,
            log_probs,
            probs,
        })
    }

    pub fn forward_one(&self, obs: &[f64]) -> Result<ForwardCache> {
        self.forward(&Matrix::from_rows(&[obs])?)
    }

    /// Exact reverse-mode derivative of the forward map.
    ///
    /// `upstream` is the loss gradient with respect to the `B x (A*Z)`
    /// log-probability outputs. `feature_grad`, when present, is an extra
    /// loss gradient injected at the last hidden layer's activations (used by
    /// the feature-regression loss). Returns parameter gradients plus the
    /// gradient with respect to the input batch.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Matrix,
        feature_grad: Option<&Matrix>,
    ) -> Result<(Gradients, Matrix)> {
        let b_n = cache.input.rows();
        let (a_n, z_n) = (self.n_actions, self.n_atoms);
        if cache.input.cols() != self.input_dim() || cache.pre.len() != self.weights.len() {
            return Err(Error::contract("cache does not match network"));
        }
        if upstream.rows() != b_n || upstream.cols() != a_n * z_n {
            return Err(Error::contract("upstream shape mismatch"));
        }
        if let Some(g) = feature_grad {
            if g.rows() != b_n || g.cols() != self.feature_dim() {
                return Err(Error::contract("feature gradient shape mismatch"));
            }
        }

        // Log-softmax backward: d logits = u - p * sum(u over the atom row).
        let mut delta = Matrix::zeros(b_n, a_n * z_n);
        for b in 0..b_n {
            let u_row = upstream.row(b);
            let p_row = cache.probs.row(b);
            let d_row = delta.row_mut(b);
            for a in 0..a_n {
                let span = a * z_n..(a + 1) * z_n;
                let s: f64 = u_row[span.clone()].iter().sum();
                for z in span {
                    d_row[z] = u_row[z] - p_row[z] * s;
                }
            }
        }

        let n_layers = self.weights.len();
        let mut grads = Gradients::zeros_like(self);
        for k in (0..n_layers).rev() {
            let below: &Matrix = if k == 0 { &cache.input } else { &cache.post[k - 1] };
            // dW[o][i] = sum_b delta[b][o] * below[b][i]; db[o] = sum_b delta[b][o]
            let dw = &mut grads.weights[k];
            let db = &mut grads.biases[k];
            for b in 0..b_n {
                let d_row = delta.row(b);
                let x_row = below.row(b);
                for (o, &d) in d_row.iter().enumerate() {
                    if d != 0.0 {
                        let dw_row = dw.row_mut(o);
                        for (slot, x) in dw_row.iter_mut().zip(x_row) {
                            *slot += d * x;
                        }
                    }
                    db[o] += d;
                }
            }
            // da[b][i] = sum_o delta[b][o] * W[o][i]
            let w = &self.weights[k];
            let mut da = Matrix::zeros(b_n, w.cols());
            for b in 0..b_n {
                let d_row = delta.row(b);
                let da_row = da.row_mut(b);
                for (o, &d) in d_row.iter().enumerate() {
                    if d != 0.0 {
                        let w_row = w.row(o);
                        for (slot, wv) in da_row.iter_mut().zip(w_row) {
                            *slot += d * wv;
                        }
                    }
                }
            }
            if k == 0 {
                return Ok((grads, da));
            }
            if k == n_layers - 1 {
                if let Some(g) = feature_grad {
                    for (slot, gv) in da.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *slot += gv;
                    }
                }
            }
            // ReLU mask of the hidden layer below.
            let z_below = &cache.pre[k - 1];
            for (slot, z) in da.as_mut_slice().iter_mut().zip(z_below.as_slice()) {
                if *z <= 0.0 {
                    *slot = 0.0;
                }
            }
            delta = da;
        }
        unreachable!("loop returns at k == 0");
    }
}
