//! Two-convolution, two-dense-layer joint regressor with hand-written reverse-mode gradients.
//!
//! The network is `conv -> ReLU -> conv -> ReLU -> flatten -> dense -> ReLU -> dense`.
//! Convolutions use stride one and same padding, so the spatial grid never shrinks.
//! All parameters live in one flat vector; see [`Layout`] for the ordering.

mod checkpoint;
mod objective;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use objective::{finite_difference_hvp, Objective};

use crate::error::{Error, Result};
use crate::pointcloud::InputGrid;

/// Samples per gradient chunk. Chunks are reduced in index order, so results do not
/// depend on the number of worker threads.
const GRAD_CHUNK: usize = 16;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CnnConfig {
    pub grid_size: usize,
    pub in_channels: usize,
    pub conv1_out: usize,
    pub conv2_out: usize,
    pub kernel: usize,
    pub fc_hidden: usize,
    pub out_dim: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            grid_size: 8,
            in_channels: 5,
            conv1_out: 16,
            conv2_out: 32,
            kernel: 3,
            fc_hidden: 512,
            out_dim: 57,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("grid_size", self.grid_size),
            ("in_channels", self.in_channels),
            ("conv1_out", self.conv1_out),
            ("conv2_out", self.conv2_out),
            ("kernel", self.kernel),
            ("fc_hidden", self.fc_hidden),
            ("out_dim", self.out_dim),
        ];
        if let Some((name, _)) = named.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid_config(format!("{name} must be positive")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid_config(format!(
                "kernel size {} must be odd",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Closed-form parameter count.
pub fn param_count(c: &CnnConfig) -> usize {
    let k2 = c.kernel * c.kernel;
    k2 * c.in_channels * c.conv1_out
        + c.conv1_out
        + k2 * c.conv1_out * c.conv2_out
        + c.conv2_out
        + c.grid_size * c.grid_size * c.conv2_out * c.fc_hidden
        + c.fc_hidden
        + c.fc_hidden * c.out_dim
        + c.out_dim
}

/// Offsets of each tensor inside the flat parameter vector.
///
/// Order: conv1 weights, conv1 bias, conv2 weights, conv2 bias, fc1 weights, fc1 bias,
/// fc2 weights, fc2 bias. Convolution weights are indexed `[out][ky][kx][in]`, dense
/// weights `[out][in]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv1_w: std::ops::Range<usize>,
    pub conv1_b: std::ops::Range<usize>,
    pub conv2_w: std::ops::Range<usize>,
    pub conv2_b: std::ops::Range<usize>,
    pub fc1_w: std::ops::Range<usize>,
    pub fc1_b: std::ops::Range<usize>,
    pub fc2_w: std::ops::Range<usize>,
    pub fc2_b: std::ops::Range<usize>,
}

impl Layout {
    fn new(c: &CnnConfig) -> Self {
        let k2 = c.kernel * c.kernel;
        let sizes = [
            k2 * c.in_channels * c.conv1_out,
            c.conv1_out,
            k2 * c.conv1_out * c.conv2_out,
            c.conv2_out,
            c.grid_size * c.grid_size * c.conv2_out * c.fc_hidden,
            c.fc_hidden,
            c.fc_hidden * c.out_dim,
            c.out_dim,
        ];
        let mut start = 0;
        let mut ranges = sizes.iter().map(|&n| {
            let r = start..start + n;
            start += n;
            r
        });
        let mut next = || ranges.next().unwrap();
        Layout {
            conv1_w: next(),
            conv1_b: next(),
            conv2_w: next(),
            conv2_b: next(),
            fc1_w: next(),
            fc1_b: next(),
            fc2_w: next(),
            fc2_b: next(),
        }
    }

    pub fn total(&self) -> usize {
        self.fc2_b.end
    }

    /// Contiguous range holding the final dense layer (weights then bias).
    pub fn last_layer(&self) -> std::ops::Range<usize> {
        self.fc2_w.start..self.fc2_b.end
    }

    pub fn biases(&self) -> [std::ops::Range<usize>; 4] {
        [
            self.conv1_b.clone(),
            self.conv2_b.clone(),
            self.fc1_b.clone(),
            self.fc2_b.clone(),
        ]
    }
}

/// Network parameters as one flat vector in [`Layout`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    config: CnnConfig,
    values: Vec<f64>,
}

impl CnnParams {
    pub fn zeros(config: CnnConfig) -> Result<Self> {
        config.validate()?;
        Ok(CnnParams {
            values: vec![0.0; config.param_count()],
            config,
        })
    }

    pub fn unflatten(config: CnnConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_count();
        if values.len() != expected {
            return Err(Error::invalid_input(format!(
                "parameter vector has {} entries, config needs {expected}",
                values.len()
            )));
        }
        Ok(CnnParams { config, values })
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> Layout {
        self.config.layout()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Uniform weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer, zero biases.
pub fn init_params(config: &CnnConfig, seed: u64) -> Result<CnnParams> {
    let mut params = CnnParams::zeros(*config)?;
    let layout = config.layout();
    let k2 = config.kernel * config.kernel;
    let fans = [
        (layout.conv1_w.clone(), k2 * config.in_channels),
        (layout.conv2_w.clone(), k2 * config.conv1_out),
        (layout.fc1_w.clone(), config.grid_size * config.grid_size * config.conv2_out),
        (layout.fc2_w.clone(), config.fc_hidden),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (range, fan_in) in fans {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for w in &mut params.values[range] {
            *w = rng.gen_range(-bound..=bound);
        }
    }
    Ok(params)
}

/// Inputs with their regression targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub inputs: Vec<InputGrid>,
    pub targets: Vec<Vec<f64>>,
}

impl Batch {
    pub fn new(inputs: Vec<InputGrid>, targets: Vec<Vec<f64>>) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(Error::invalid_input(format!(
                "{} inputs but {} targets",
                inputs.len(),
                targets.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::invalid_input("batch is empty"));
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Copies the samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: indices.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: indices.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }

    pub fn concat(mut self, other: &Batch) -> Batch {
        self.inputs.extend(other.inputs.iter().cloned());
        self.targets.extend(other.targets.iter().cloned());
        self
    }
}

fn check_grid(config: &CnnConfig, grid: &InputGrid) -> Result<()> {
    if grid.height != config.grid_size
        || grid.width != config.grid_size
        || grid.channels != config.in_channels
        || grid.values.len() != grid.height * grid.width * grid.channels
    {
        return Err(Error::invalid_input(format!(
            "input grid {}x{}x{} does not match network input {g}x{g}x{}",
            grid.height,
            grid.width,
            grid.channels,
            config.in_channels,
            g = config.grid_size
        )));
    }
    Ok(())
}

fn check_batch(config: &CnnConfig, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid_input("batch is empty"));
    }
    if batch.inputs.len() != batch.targets.len() {
        return Err(Error::invalid_input("inputs and targets differ in length"));
    }
    for (grid, target) in batch.inputs.iter().zip(&batch.targets) {
        check_grid(config, grid)?;
        if target.len() != config.out_dim {
            return Err(Error::invalid_input(format!(
                "target has {} values, network outputs {}",
                target.len(),
                config.out_dim
            )));
        }
    }
    Ok(())
}

fn check_theta(config: &CnnConfig, theta: &[f64]) -> Result<()> {
    if theta.len() != config.param_count() {
        return Err(Error::invalid_input(format!(
            "parameter vector has {} entries, config needs {}",
            theta.len(),
            config.param_count()
        )));
    }
    Ok(())
}

/// Same-padded, stride-one convolution; writes pre-activations into `out`.
#[allow(clippy::too_many_arguments)]
fn conv_forward(
    input: &[f64],
    g: usize,
    cin: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
    k: usize,
    out: &mut [f64],
) {
    let pad = k / 2;
    for y in 0..g {
        for x in 0..g {
            let px = &mut out[(y * g + x) * cout..(y * g + x + 1) * cout];
            px.copy_from_slice(bias);
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < g) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < g) else {
                        continue;
                    };
                    let inp = &input[(iy * g + ix) * cin..(iy * g + ix + 1) * cin];
                    for (o, acc) in px.iter_mut().enumerate() {
                        let w = &weights[((o * k + ky) * k + kx) * cin..][..cin];
                        *acc += dot(w, inp);
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients of a convolution, and the input gradient when requested.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    input: &[f64],
    g: usize,
    cin: usize,
    weights: &[f64],
    cout: usize,
    k: usize,
    d_out: &[f64],
    d_weights: &mut [f64],
    d_bias: &mut [f64],
    mut d_input: Option<&mut [f64]>,
) {
    let pad = k / 2;
    for y in 0..g {
        for x in 0..g {
            let d = &d_out[(y * g + x) * cout..(y * g + x + 1) * cout];
            if d.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (db, &dv) in d_bias.iter_mut().zip(d) {
                *db += dv;
            }
            for ky in 0..k {
                let Some(iy) = (y + ky).checked_sub(pad).filter(|&v| v < g) else {
                    continue;
                };
                for kx in 0..k {
                    let Some(ix) = (x + kx).checked_sub(pad).filter(|&v| v < g) else {
                        continue;
                    };
                    let in_off = (iy * g + ix) * cin;
                    let inp = &input[in_off..in_off + cin];
                    for (o, &dv) in d.iter().enumerate() {
                        if dv == 0.0 {
                            continue;
                        }
                        let w_off = ((o * k + ky) * k + kx) * cin;
                        axpy(dv, inp, &mut d_weights[w_off..w_off + cin]);
                        if let Some(di) = d_input.as_deref_mut() {
                            axpy(dv, &weights[w_off..w_off + cin], &mut di[in_off..in_off + cin]);
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x <= 0.0 {
            *x = 0.0;
        }
    }
}

/// Activations of one forward pass, kept for the backward pass.
struct Trace {
    conv1: Vec<f64>,
    conv2: Vec<f64>,
    hidden: Vec<f64>,
    output: Vec<f64>,
}

fn forward_trace(config: &CnnConfig, theta: &[f64], input: &[f64]) -> Trace {
    let l = config.layout();
    let g = config.grid_size;
    let cells = g * g;
    let mut conv1 = vec![0.0; cells * config.conv1_out];
    conv_forward(
        input,
        g,
        config.in_channels,
        &theta[l.conv1_w.clone()],
        &theta[l.conv1_b.clone()],
        config.conv1_out,
        config.kernel,
        &mut conv1,
    );
    relu_in_place(&mut conv1);
    let mut conv2 = vec![0.0; cells * config.conv2_out];
    conv_forward(
        &conv1,
        g,
        config.conv1_out,
        &theta[l.conv2_w.clone()],
        &theta[l.conv2_b.clone()],
        config.conv2_out,
        config.kernel,
        &mut conv2,
    );
    relu_in_place(&mut conv2);

    let fc1_w = &theta[l.fc1_w.clone()];
    let in1 = conv2.len();
    let mut hidden: Vec<f64> = theta[l.fc1_b.clone()].to_vec();
    for (j, h) in hidden.iter_mut().enumerate() {
        *h += dot(&fc1_w[j * in1..(j + 1) * in1], &conv2);
    }
    relu_in_place(&mut hidden);

    let fc2_w = &theta[l.fc2_w.clone()];
    let in2 = config.fc_hidden;
    let mut output: Vec<f64> = theta[l.fc2_b.clone()].to_vec();
    for (j, o) in output.iter_mut().enumerate() {
        *o += dot(&fc2_w[j * in2..(j + 1) * in2], &hidden);
    }
    Trace {
        conv1,
        conv2,
        hidden,
        output,
    }
}

/// Backpropagates `d_output` through one traced sample, accumulating into `grad`.
fn backward_trace(config: &CnnConfig, theta: &[f64], input: &[f64], trace: &Trace, d_output: &[f64], grad: &mut [f64]) {
    let l = config.layout();
    let g = config.grid_size;

    // fc2
    let in2 = config.fc_hidden;
    let mut d_hidden = vec![0.0; in2];
    {
        let fc2_w = &theta[l.fc2_w.clone()];
        for (j, &d) in d_output.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[l.fc2_b.start + j] += d;
            axpy(d, &trace.hidden, &mut grad[l.fc2_w.start + j * in2..l.fc2_w.start + (j + 1) * in2]);
            axpy(d, &fc2_w[j * in2..(j + 1) * in2], &mut d_hidden);
        }
    }
    for (dh, &h) in d_hidden.iter_mut().zip(&trace.hidden) {
        if h <= 0.0 {
            *dh = 0.0;
        }
    }

    // fc1
    let in1 = trace.conv2.len();
    let mut d_conv2 = vec![0.0; in1];
    {
        let fc1_w = &theta[l.fc1_w.clone()];
        for (j, &d) in d_hidden.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad[l.fc1_b.start + j] += d;
            axpy(d, &trace.conv2, &mut grad[l.fc1_w.start + j * in1..l.fc1_w.start + (j + 1) * in1]);
            axpy(d, &fc1_w[j * in1..(j + 1) * in1], &mut d_conv2);
        }
    }
    for (d, &a) in d_conv2.iter_mut().zip(&trace.conv2) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }

    // conv2
    let mut d_conv1 = vec![0.0; trace.conv1.len()];
    {
        let (head, tail) = grad.split_at_mut(l.conv2_b.start);
        conv_backward(
            &trace.conv1,
            g,
            config.conv1_out,
            &theta[l.conv2_w.clone()],
            config.conv2_out,
            config.kernel,
            &d_conv2,
            &mut head[l.conv2_w.clone()],
            &mut tail[..config.conv2_out],
            Some(&mut d_conv1),
        );
    }
    for (d, &a) in d_conv1.iter_mut().zip(&trace.conv1) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }

    // conv1
    let (head, tail) = grad.split_at_mut(l.conv1_b.start);
    conv_backward(
        input,
        g,
        config.in_channels,
        &theta[l.conv1_w.clone()],
        config.conv1_out,
        config.kernel,
        &d_conv1,
        &mut head[l.conv1_w.clone()],
        &mut tail[..config.conv1_out],
        None,
    );
}

/// Predicted joint coordinates for one input grid.
pub fn forward(params: &CnnParams, grid: &InputGrid) -> Result<Vec<f64>> {
    check_grid(&params.config, grid)?;
    Ok(forward_trace(&params.config, &params.values, &grid.values).output)
}

/// Mean absolute error between two equally long vectors.
pub fn loss_l1(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::invalid_input(format!(
            "prediction has {} values, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::invalid_input("empty prediction"));
    }
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}

/// Mean L1 batch loss and its gradient with respect to the flat parameters.
///
/// Where a residual or a ReLU input is exactly zero the subgradient zero is used.
pub fn backward(params: &CnnParams, batch: &Batch) -> Result<(f64, Vec<f64>)> {
    check_batch(&params.config, batch)?;
    Ok(loss_and_grad_unchecked(&params.config, &params.values, batch))
}

fn loss_and_grad_unchecked(config: &CnnConfig, theta: &[f64], batch: &Batch) -> (f64, Vec<f64>) {
    let n = batch.len();
    let scale = 1.0 / (n as f64 * config.out_dim as f64);
    let chunk_ids: Vec<usize> = (0..n.div_ceil(GRAD_CHUNK)).collect();
    let partials: Vec<(f64, Vec<f64>)> = chunk_ids
        .par_iter()
        .map(|&c| {
            let mut grad = vec![0.0; theta.len()];
            let mut loss = 0.0;
            for i in c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n) {
                let input = &batch.inputs[i].values;
                let trace = forward_trace(config, theta, input);
                let mut sample_loss = 0.0;
                let d_output: Vec<f64> = trace
                    .output
                    .iter()
                    .zip(&batch.targets[i])
                    .map(|(p, t)| {
                        let r = p - t;
                        sample_loss += r.abs();
                        if r > 0.0 {
                            scale
                        } else if r < 0.0 {
                            -scale
                        } else {
                            0.0
                        }
                    })
                    .collect();
                loss += sample_loss;
                backward_trace(config, theta, input, &trace, &d_output, &mut grad);
            }
            (loss, grad)
        })
        .collect();

    let mut iter = partials.into_iter();
    let (mut loss, mut grad) = iter.next().expect("batch is non-empty");
    for (l, g) in iter {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    (loss * scale, grad)
}

fn loss_unchecked(config: &CnnConfig, theta: &[f64], batch: &Batch) -> f64 {
    let n = batch.len();
    let chunk_ids: Vec<usize> = (0..n.div_ceil(GRAD_CHUNK)).collect();
    let partials: Vec<f64> = chunk_ids
        .par_iter()
        .map(|&c| {
            (c * GRAD_CHUNK..((c + 1) * GRAD_CHUNK).min(n))
                .map(|i| {
                    let out = forward_trace(config, theta, &batch.inputs[i].values).output;
                    out.iter()
                        .zip(&batch.targets[i])
                        .map(|(p, t)| (p - t).abs())
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    partials.iter().sum::<f64>() / (n as f64 * config.out_dim as f64)
}

/// Hessian-vector product of the mean L1 batch loss by central differences of gradients.
pub fn hvp(params: &CnnParams, batch: &Batch, v: &[f64], eps: f64) -> Result<Vec<f64>> {
    Cnn::new(params.config)?.hvp(&params.values, batch, v, eps)
}

/// The regression network as a differentiable objective over flat parameter vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cnn {
    config: CnnConfig,
}

impl Cnn {
    pub fn new(config: CnnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Cnn { config })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.config
    }

    /// Predictions for every input in `batch`, in order.
    pub fn predict(&self, theta: &[f64], inputs: &[InputGrid]) -> Result<Vec<Vec<f64>>> {
        check_theta(&self.config, theta)?;
        for g in inputs {
            check_grid(&self.config, g)?;
        }
        Ok(inputs
            .par_iter()
            .map(|g| forward_trace(&self.config, theta, &g.values).output)
            .collect())
    }
}

impl Objective for Cnn {
    type Batch = Batch;

    fn dim(&self) -> usize {
        self.config.param_count()
    }

    fn loss(&self, theta: &[f64], batch: &Batch) -> Result<f64> {
        check_theta(&self.config, theta)?;
        check_batch(&self.config, batch)?;
        Ok(loss_unchecked(&self.config, theta, batch))
    }

    fn loss_and_grad(&self, theta: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        check_theta(&self.config, theta)?;
        check_batch(&self.config, batch)?;
        Ok(loss_and_grad_unchecked(&self.config, theta, batch))
    }
}
