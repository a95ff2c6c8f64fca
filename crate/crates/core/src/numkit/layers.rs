//! Layer parameter containers and MLP stacks over the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;
use super::tape::{BufId, Tape};
use super::NumError;

pub const BN_EPS: f64 = 1e-5;
/// Running statistics update: run = (1 - momentum) * run + momentum * batch.
pub const BN_MOMENTUM: f64 = 0.1;
/// Clamp for the power-iteration singular-value estimate.
pub const SPECTRAL_EPS: f64 = 1e-12;

/// Batch-normalization parameters and running statistics for one layer.
#[derive(Clone, Debug)]
pub struct NormState {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub run_mean: Vec<f64>,
    pub run_var: Vec<f64>,
}

impl NormState {
    pub fn new(d: usize) -> Self {
        NormState {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            run_mean: vec![0.0; d],
            run_var: vec![1.0; d],
        }
    }
}

/// Persistent power-iteration vectors for spectral normalization.
#[derive(Clone, Debug)]
pub struct SpectralState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl SpectralState {
    /// Unit-norm random vectors.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u: Vec<f64> = (0..fan_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut v: Vec<f64> = (0..fan_out).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        normalize(&mut u);
        normalize(&mut v);
        SpectralState { u, v }
    }
}

/// One affine layer: weight is fan-in x fan-out, optional normalization and
/// spectral state.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub norm: Option<NormState>,
    pub spectral: Option<SpectralState>,
}

impl LayerParams {
    /// Glorot-scaled normal init; biases start at zero.
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        LayerParams {
            weight: Matrix::randn(fan_in, fan_out, std, rng),
            bias: vec![0.0; fan_out],
            norm: None,
            spectral: None,
        }
    }
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > SPECTRAL_EPS {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// Divides the weight by its power-iteration estimate of the largest singular
/// value, clamped at `SPECTRAL_EPS` (a zero matrix passes through unchanged).
/// The persistent u/v pair warm-starts the next call. Returns the estimate.
pub fn spectral_normalize(p: &mut LayerParams, power_iters: usize) -> f64 {
    let LayerParams { weight, spectral, .. } = p;
    let st = spectral.as_mut().expect("spectral_normalize needs initialized spectral state");
    let (m, n) = (weight.rows(), weight.cols());
    assert!(st.u.len() == m && st.v.len() == n, "spectral state does not match weight");
    for _ in 0..power_iters.max(1) {
        for j in 0..n {
            st.v[j] = (0..m).map(|i| weight[(i, j)] * st.u[i]).sum();
        }
        normalize(&mut st.v);
        for i in 0..m {
            st.u[i] = (0..n).map(|j| weight[(i, j)] * st.v[j]).sum();
        }
        normalize(&mut st.u);
    }
    let mut sigma = 0.0;
    for i in 0..m {
        for j in 0..n {
            sigma += st.u[i] * weight[(i, j)] * st.v[j];
        }
    }
    let sigma = sigma.max(SPECTRAL_EPS);
    for w in weight.data_mut() {
        *w /= sigma;
    }
    sigma
}

/// Forward-pass regime. `Train` normalizes by batch statistics and draws
/// dropout masks; `update_stats` additionally refreshes running statistics
/// (left off while a net is held frozen inside another net's update phase).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Phase {
    Train { update_stats: bool },
    Eval,
}

/// Construction options for [`MlpNet`].
#[derive(Clone, Copy, Debug)]
pub struct MlpOptions {
    pub slope: f64,
    /// Batch-normalize hidden layers.
    pub hidden_norm: bool,
    /// Dropout rate on hidden activations; 0 disables.
    pub dropout: f64,
    /// Spectral normalization on every affine layer.
    pub spectral: bool,
    /// Apply the activation after the final affine as well (tower nets);
    /// otherwise the last layer emits plain logits or embeddings.
    pub final_activation: bool,
}

impl Default for MlpOptions {
    fn default() -> Self {
        MlpOptions {
            slope: 0.01,
            hidden_norm: false,
            dropout: 0.0,
            spectral: false,
            final_activation: false,
        }
    }
}

/// Affine stack. Hidden layers run affine -> [batch norm] -> leaky-ReLU ->
/// [dropout]; the final layer is a plain affine unless `final_activation`.
#[derive(Clone, Debug)]
pub struct MlpNet {
    pub layers: Vec<LayerParams>,
    pub slope: f64,
    pub dropout: f64,
    pub final_activation: bool,
}

/// One net forward on a tape: the output buffer plus the parameter buffers in
/// `flat_params_mut` order, for gradient extraction.
pub struct NetTrace {
    pub out: BufId,
    pub params: Vec<BufId>,
}

impl MlpNet {
    /// `sizes` lists the layer widths input-first; `sizes.len() - 1` affine
    /// layers are created.
    pub fn new(sizes: &[usize], opts: MlpOptions, rng: &mut ChaCha8Rng) -> Self {
        assert!(sizes.len() >= 2, "net needs at least one layer");
        let last = sizes.len() - 2;
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        for (li, w) in sizes.windows(2).enumerate() {
            let mut layer = LayerParams::new(w[0], w[1], rng);
            if opts.hidden_norm && li < last {
                layer.norm = Some(NormState::new(w[1]));
            }
            if opts.spectral {
                layer.spectral = Some(SpectralState::init(w[0], w[1], rng));
            }
            layers.push(layer);
        }
        MlpNet {
            layers,
            slope: opts.slope,
            dropout: opts.dropout,
            final_activation: opts.final_activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    /// Tape forward. `drop_rng` is required when dropout is active in train
    /// mode; masks are drawn from it in layer order.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: BufId,
        phase: Phase,
        mut drop_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NetTrace, NumError> {
        let mut params = Vec::new();
        let mut h = x;
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter_mut().enumerate() {
            let w = tape.leaf(&layer.weight);
            let b = tape.leaf_row(&layer.bias);
            params.push(w);
            params.push(b);
            h = tape.affine(h, w, b)?;
            let activated = li < last || self.final_activation;
            if !activated {
                continue;
            }
            if let Some(norm) = layer.norm.as_mut() {
                let g = tape.leaf_row(&norm.gamma);
                let be = tape.leaf_row(&norm.beta);
                params.push(g);
                params.push(be);
                match phase {
                    Phase::Train { update_stats } => {
                        let bn = tape.batch_norm_train(h, g, be, BN_EPS)?;
                        h = bn.out;
                        if update_stats {
                            for j in 0..norm.run_mean.len() {
                                norm.run_mean[j] =
                                    (1.0 - BN_MOMENTUM) * norm.run_mean[j] + BN_MOMENTUM * bn.mean[j];
                                norm.run_var[j] =
                                    (1.0 - BN_MOMENTUM) * norm.run_var[j] + BN_MOMENTUM * bn.var[j];
                            }
                        }
                    }
                    Phase::Eval => {
                        h = tape.batch_norm_eval(h, g, be, &norm.run_mean, &norm.run_var, BN_EPS)?;
                    }
                }
            }
            h = tape.leaky_relu(h, self.slope);
            if self.dropout > 0.0 {
                if let Phase::Train { .. } = phase {
                    let rng = drop_rng
                        .as_deref_mut()
                        .expect("train-mode forward with dropout needs an rng");
                    h = tape.dropout(h, self.dropout, rng);
                }
            }
        }
        Ok(NetTrace { out: h, params })
    }

    /// Tape-free eval-mode forward: running statistics, no dropout.
    pub fn eval_forward(&self, x: &Matrix) -> Result<Matrix, NumError> {
        if x.cols() != self.in_dim() {
            return Err(NumError::Shape(format!(
                "net input is {}x{}, want {} columns",
                x.rows(),
                x.cols(),
                self.in_dim()
            )));
        }
        let n = x.rows();
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            let o = layer.weight.cols();
            let mut next = Matrix::zeros(n, o);
            for r in 0..n {
                let row = next.row_mut(r);
                row.copy_from_slice(&layer.bias);
                for (k, &xv) in h.row(r).iter().enumerate() {
                    let wrow = layer.weight.row(k);
                    for j in 0..o {
                        row[j] += xv * wrow[j];
                    }
                }
            }
            h = next;
            if li < last || self.final_activation {
                if let Some(norm) = &layer.norm {
                    for r in 0..n {
                        let row = h.row_mut(r);
                        for j in 0..o {
                            let inv = 1.0 / (norm.run_var[j] + BN_EPS).sqrt();
                            row[j] = (row[j] - norm.run_mean[j]) * inv * norm.gamma[j]
                                + norm.beta[j];
                        }
                    }
                }
                for v in h.data_mut() {
                    if *v < 0.0 {
                        *v *= self.slope;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Trainable tensors in forward-registration order: per layer weight,
    /// bias, then gamma and beta when normalization is present.
    pub fn flat_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            out.push(layer.weight.data_mut());
            out.push(layer.bias.as_mut_slice());
            if let Some(norm) = layer.norm.as_mut() {
                out.push(norm.gamma.as_mut_slice());
                out.push(norm.beta.as_mut_slice());
            }
        }
        out
    }

    pub fn param_lens(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.weight.data().len());
            out.push(layer.bias.len());
            if let Some(norm) = &layer.norm {
                out.push(norm.gamma.len());
                out.push(norm.beta.len());
            }
        }
        out
    }

    /// Sums this net's gradients over one or more forwards on the same tape.
    pub fn grads_from(&self, tape: &Tape, traces: &[&NetTrace]) -> Vec<Vec<f64>> {
        let lens = self.param_lens();
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| vec![0.0; l]).collect();
        for tr in traces {
            assert_eq!(tr.params.len(), grads.len(), "trace does not belong to this net");
            for (gi, &pid) in tr.params.iter().enumerate() {
                if let Some(g) = tape.grad(pid) {
                    for (a, b) in grads[gi].iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
        }
        grads
    }

    /// Projects every spectral layer's weight to unit spectral norm.
    pub fn spectral_project(&mut self, power_iters: usize) {
        for layer in &mut self.layers {
            if layer.spectral.is_some() {
                spectral_normalize(layer, power_iters);
            }
        }
    }

    /// Largest singular-value estimate per spectral layer (50 refinement
    /// iterations), for invariant checks.
    pub fn spectral_estimates(&mut self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if layer.spectral.is_some() {
                let mut probe = layer.clone();
                let LayerParams { weight, spectral, .. } = &mut probe;
                let st = spectral.as_mut().unwrap();
                let (m, n) = (weight.rows(), weight.cols());
                for _ in 0..50 {
                    for j in 0..n {
                        st.v[j] = (0..m).map(|i| weight[(i, j)] * st.u[i]).sum();
                    }
                    normalize(&mut st.v);
                    for i in 0..m {
                        st.u[i] = (0..n).map(|j| weight[(i, j)] * st.v[j]).sum();
                    }
                    normalize(&mut st.u);
                }
                let mut sigma = 0.0;
                for i in 0..m {
                    for j in 0..n {
                        sigma += st.u[i] * weight[(i, j)] * st.v[j];
                    }
                }
                out.push(sigma);
            }
        }
        out
    }
}
