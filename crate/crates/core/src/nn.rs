//! Feed-forward regressor with hand-written reverse-mode gradients and Adam.
//!
//! Parameters live in one flat buffer laid out as `[W0, b0, W1, b1, ...]`
//! where `Wl` is `out x in` row-major. Gradients and Adam moments share that
//! layout, so the optimizer is a single elementwise pass. A network built
//! with a linear shortcut appends one more `out x in` block `S`, and its
//! output becomes `f(x) + S x`. An optional fixed affine map standardises
//! inputs before the first layer; it is not trained.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};

/// ReLU hidden layers, identity output, optional linear shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    shortcut: bool,
    params: Vec<f64>,
    input_norm: Option<InputNorm>,
}

/// Inputs enter the network as `(x - shift) * scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    /// Column means and inverse standard deviations of `x`. Columns with
    /// (near) zero spread are only centred.
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Empty("normalisation data".into()));
        }
        let shift = x.column_means();
        let mut var = vec![0.0; x.cols()];
        for row in x.iter_rows() {
            for ((v, a), m) in var.iter_mut().zip(row).zip(&shift) {
                *v += (a - m) * (a - m);
            }
        }
        let scale = var
            .iter()
            .map(|v| {
                let sd = (v / x.rows() as f64).sqrt();
                if sd > 1e-8 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { shift, scale })
    }
}

#[derive(Clone, Copy)]
struct LayerView {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
}

impl Mlp {
    /// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views: Vec<LayerView> = m.layers().collect();
        for l in views {
            let bound = (6.0 / l.n_in as f64).sqrt();
            for w in &mut m.params[l.w..l.w + l.n_in * l.n_out] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(m)
    }

    /// Like [`Mlp::new`] plus a zero-initialised linear input-to-output map.
    pub fn with_shortcut(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::new(sizes, seed)?;
        m.shortcut = true;
        let (i, o) = (m.input_dim(), m.output_dim());
        m.params.resize(m.params.len() + i * o, 0.0);
        Ok(m)
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::zeros_with(sizes, false)
    }

    fn zeros_with(sizes: &[usize], shortcut: bool) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "layer sizes {sizes:?} need at least an input and an output, all non-zero"
            )));
        }
        let mut n: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if shortcut {
            n += sizes[0] * sizes[sizes.len() - 1];
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            shortcut,
            params: vec![0.0; n],
            input_norm: None,
        })
    }

    pub fn input_norm(&self) -> Option<&InputNorm> {
        self.input_norm.as_ref()
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<()> {
        if let Some(n) = &norm {
            let d = self.input_dim();
            if n.shift.len() != d || n.scale.len() != d {
                return Err(Error::Shape(format!(
                    "input normalisation has {} / {} entries for {d} inputs",
                    n.shift.len(),
                    n.scale.len()
                )));
            }
        }
        self.input_norm = norm;
        Ok(())
    }

    pub fn has_shortcut(&self) -> bool {
        self.shortcut
    }

    /// Shortcut block `S` (`out x in`), if present.
    pub fn shortcut_weight(&self) -> Option<&[f64]> {
        let off = self.shortcut_offset();
        self.shortcut.then(|| &self.params[off..])
    }

    fn shortcut_offset(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Weight block of layer `l` (`out x in`, row-major).
    pub fn weight(&self, l: usize) -> &[f64] {
        let v = self.layer(l);
        &self.params[v.w..v.w + v.n_in * v.n_out]
    }

    pub fn weight_mut(&mut self, l: usize) -> &mut [f64] {
        let v = self.layer(l);
        &mut self.params[v.w..v.w + v.n_in * v.n_out]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let v = self.layer(l);
        &self.params[v.b..v.b + v.n_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let v = self.layer(l);
        &mut self.params[v.b..v.b + v.n_out]
    }

    fn layer(&self, l: usize) -> LayerView {
        self.layers().nth(l).expect("layer index out of range")
    }

    fn layers(&self) -> impl Iterator<Item = LayerView> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let v = LayerView {
                n_in: w[0],
                n_out: w[1],
                w: off,
                b: off + w[0] * w[1],
            };
            off += w[0] * w[1] + w[1];
            v
        })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut ws = Workspace::default();
        self.forward_into(x.as_slice(), x.rows(), &mut ws);
        let out = ws.acts.pop().unwrap();
        Matrix::from_vec(x.rows(), self.output_dim(), out)
    }

    /// Single-row convenience wrapper around [`Mlp::forward`].
    pub fn predict_one(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Matrix::from_vec(1, input.len(), input.to_vec())?;
        Ok(self.forward(&x)?.into_vec())
    }

    /// Runs the network keeping every layer's output in `ws.acts`
    /// (`acts[0]` is a copy of the input).
    fn forward_into(&self, x: &[f64], batch: usize, ws: &mut Workspace) {
        let n_layers = self.num_layers();
        ws.acts.resize_with(n_layers + 1, Vec::new);
        ws.acts[0].clear();
        ws.acts[0].extend_from_slice(x);
        if let Some(n) = &self.input_norm {
            for row in ws.acts[0].chunks_exact_mut(n.shift.len()) {
                for ((a, s), c) in row.iter_mut().zip(&n.shift).zip(&n.scale) {
                    *a = (*a - s) * c;
                }
            }
        }
        for (l, v) in self.layers().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            let input = &head[l];
            let out = &mut tail[0];
            out.clear();
            let bias = &self.params[v.b..v.b + v.n_out];
            for _ in 0..batch {
                out.extend_from_slice(bias);
            }
            gemm(
                batch,
                v.n_in,
                v.n_out,
                1.0,
                input,
                false,
                &self.params[v.w..v.w + v.n_in * v.n_out],
                true,
                1.0,
                out,
            );
            if l + 1 < n_layers {
                out.iter_mut().for_each(|z| *z = z.max(0.0));
            }
        }
        if self.shortcut {
            let (i, o) = (self.input_dim(), self.output_dim());
            let off = self.shortcut_offset();
            let (head, tail) = ws.acts.split_at_mut(n_layers);
            gemm(batch, i, o, 1.0, &head[0], false, &self.params[off..], true, 1.0, &mut tail[0]);
        }
    }

    /// Backpropagates `delta` (gradient w.r.t. the network output) through
    /// the activations cached by `forward_into`, writing into `grad`.
    fn backward(&self, batch: usize, ws: &mut Workspace, grad: &mut [f64]) {
        if self.shortcut {
            let (i, o) = (self.input_dim(), self.output_dim());
            let off = self.shortcut_offset();
            gemm(o, batch, i, 1.0, &ws.delta, true, &ws.acts[0], false, 0.0, &mut grad[off..]);
        }
        let views: Vec<LayerView> = self.layers().collect();
        for (l, v) in views.iter().enumerate().rev() {
            let input = &ws.acts[l];
            let (gw, rest) = grad[v.w..].split_at_mut(v.n_in * v.n_out);
            gemm(
                v.n_out, batch, v.n_in, 1.0, &ws.delta, true, input, false, 0.0, gw,
            );
            let gb = &mut rest[..v.n_out];
            gb.iter_mut().for_each(|g| *g = 0.0);
            for row in ws.delta.chunks_exact(v.n_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if l > 0 {
                ws.scratch.clear();
                ws.scratch.resize(batch * v.n_in, 0.0);
                gemm(
                    batch,
                    v.n_out,
                    v.n_in,
                    1.0,
                    &ws.delta,
                    false,
                    &self.params[v.w..v.w + v.n_in * v.n_out],
                    false,
                    0.0,
                    &mut ws.scratch,
                );
                for (d, &a) in ws.scratch.iter_mut().zip(input.iter()) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
                std::mem::swap(&mut ws.delta, &mut ws.scratch);
            }
        }
    }

    /// Mean squared error over batch and output dimensions, and its gradient
    /// with respect to every parameter.
    pub fn mse_and_grad(&self, x: &Matrix, y: &Matrix) -> Result<(f64, Vec<f64>)> {
        self.check_input(x)?;
        if y.rows() != x.rows() || y.cols() != self.output_dim() {
            return Err(Error::Shape(format!(
                "targets are {}x{}, expected {}x{}",
                y.rows(),
                y.cols(),
                x.rows(),
                self.output_dim()
            )));
        }
        let mut ws = Workspace::default();
        let mut grad = vec![0.0; self.params.len()];
        let loss = self.loss_grad_rows(x.as_slice(), y.as_slice(), x.rows(), &mut ws, &mut grad);
        Ok((loss, grad))
    }

    fn loss_grad_rows(
        &self,
        x: &[f64],
        y: &[f64],
        batch: usize,
        ws: &mut Workspace,
        grad: &mut [f64],
    ) -> f64 {
        self.forward_into(x, batch, ws);
        let out = ws.acts.last().unwrap();
        let scale = 1.0 / (batch * self.output_dim()) as f64;
        ws.delta.clear();
        let mut loss = 0.0;
        for (p, t) in out.iter().zip(y) {
            let r = p - t;
            loss += r * r;
            ws.delta.push(2.0 * r * scale);
        }
        self.backward(batch, ws, grad);
        loss * scale
    }

    /// Writes the JSON header `<stem>.json` and the little-endian f32
    /// parameter blob `<stem>.bin`.
    pub fn save(&self, stem: &Path, seed: u64, step: u64) -> Result<()> {
        let header = CheckpointHeader {
            sizes: self.sizes.clone(),
            shortcut: self.shortcut,
            input_norm: self.input_norm.clone(),
            seed,
            step,
            num_params: self.params.len(),
        };
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        fs::write(&json_path, serde_json::to_vec_pretty(&header)?)
            .map_err(|e| Error::io(&json_path, e))?;
        let mut blob = Vec::with_capacity(self.params.len() * 4);
        for &p in &self.params {
            blob.extend_from_slice(&(p as f32).to_le_bytes());
        }
        fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))
    }

    pub fn load(stem: &Path) -> Result<(Self, CheckpointHeader)> {
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let header: CheckpointHeader = serde_json::from_slice(
            &fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?,
        )?;
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut m = Self::zeros_with(&header.sizes, header.shortcut)?;
        m.set_input_norm(header.input_norm.clone())?;
        if blob.len() != m.params.len() * 4 || header.num_params != m.params.len() {
            return Err(Error::Parse {
                what: "model checkpoint",
                offset: blob.len().min(m.params.len() * 4),
                reason: format!(
                    "expected {} parameters, blob holds {} bytes",
                    m.params.len(),
                    blob.len()
                ),
            });
        }
        for (p, c) in m.params.iter_mut().zip(blob.chunks_exact(4)) {
            *p = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
        Ok((m, header))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub sizes: Vec<usize>,
    #[serde(default)]
    pub shortcut: bool,
    #[serde(default)]
    pub input_norm: Option<InputNorm>,
    pub seed: u64,
    pub step: u64,
    pub num_params: usize,
}

#[derive(Default)]
struct Workspace {
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    scratch: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient; 0 disables it.
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn for_model(model: &Mlp, lr: f64) -> Self {
        Self::new(model.params().len(), lr)
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// Clears moments and the step counter, keeping hyper-parameters.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut Mlp, grad: &[f64], state: &mut AdamState) -> Result<()> {
    if grad.len() != model.params.len() || state.m.len() != grad.len() {
        return Err(Error::Shape(format!(
            "gradient has {} entries, model {} and optimizer {}",
            grad.len(),
            model.params.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps, wd) = (
        state.beta1,
        state.beta2,
        state.lr,
        state.eps,
        state.weight_decay,
    );
    for (((p, &g), m), v) in model
        .params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        let g = g + wd * *p;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

/// Shuffled mini-batch Adam on the rows of `(x, y)`. Returns the mean
/// training loss of each epoch (evaluated on the pre-update batches).
pub fn train_epochs(
    model: &mut Mlp,
    adam: &mut AdamState,
    x: &Matrix,
    y: &Matrix,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..x.rows()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    train_subset(model, adam, x, y, &idx, cfg.epochs, cfg.batch_size, &mut rng)
}

/// Same as [`train_epochs`] restricted to the rows listed in `subset`,
/// drawing shuffles from the caller's RNG.
#[allow(clippy::too_many_arguments)]
pub fn train_subset<R: Rng>(
    model: &mut Mlp,
    adam: &mut AdamState,
    x: &Matrix,
    y: &Matrix,
    subset: &[usize],
    epochs: usize,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    model.check_input(x)?;
    if y.rows() != x.rows() || y.cols() != model.output_dim() {
        return Err(Error::Shape(format!(
            "targets are {}x{}, expected {}x{}",
            y.rows(),
            y.cols(),
            x.rows(),
            model.output_dim()
        )));
    }
    if subset.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let (din, dout) = (x.cols(), y.cols());
    let mut order = subset.to_vec();
    let mut ws = Workspace::default();
    let mut grad = vec![0.0; model.params.len()];
    let mut bx = Vec::with_capacity(batch_size * din);
    let mut by = Vec::with_capacity(batch_size * dout);
    let mut trace = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch_size) {
            bx.clear();
            by.clear();
            for &i in chunk {
                bx.extend_from_slice(x.row(i));
                by.extend_from_slice(y.row(i));
            }
            let loss = model.loss_grad_rows(&bx, &by, chunk.len(), &mut ws, &mut grad);
            total += loss * chunk.len() as f64;
            adam_step(model, &grad, adam)?;
        }
        trace.push(total / order.len() as f64);
    }
    Ok(trace)
}
