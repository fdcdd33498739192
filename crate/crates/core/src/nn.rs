//! Small neural-network engine: LSTM and dense layers over `f64`, mean
//! squared error, backpropagation through time, and Adam.
//!
//! A network maps one flattened input window (`p` time steps of `channels`
//! values, time major) to a scalar. LSTM layers come first and consume the
//! sequence; the last LSTM hands its final hidden state to the dense stack.
//! Without LSTM layers the whole window is the dense input.
//!
//! All parameters live in one flat vector so that gradients, optimizer state
//! and model files share a single layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::excitation::{ScalingSpec, WindowedDataset};
use crate::exec::{map_range, Execution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

fn default_cell_activation() -> Activation {
    Activation::Tanh
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LayerSpec {
    /// Gates always use the sigmoid; `activation` is applied to the candidate
    /// and to the cell state on output.
    Lstm {
        hidden: usize,
        #[serde(default = "default_cell_activation")]
        activation: Activation,
    },
    Dense { units: usize, activation: Activation },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Window length.
    pub p: usize,
    pub channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// `lstm_layers` LSTM layers of `hidden` units and a single-unit dense
    /// output layer.
    pub fn sequence_model(p: usize, channels: usize, lstm_layers: usize, hidden: usize, cell: Activation, output: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = (0..lstm_layers)
            .map(|_| LayerSpec::Lstm {
                hidden,
                activation: cell,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            units: 1,
            activation: output,
        });
        Self { p, channels, layers }
    }

    /// Plain feed-forward stack on a flat input of `inputs` values.
    pub fn dense_model(inputs: usize, hidden: &[usize], hidden_activation: Activation, output: Activation) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&units| LayerSpec::Dense {
                units,
                activation: hidden_activation,
            })
            .collect();
        layers.push(LayerSpec::Dense {
            units: 1,
            activation: output,
        });
        Self {
            p: 1,
            channels: inputs,
            layers,
        }
    }

    pub fn input_len(&self) -> usize {
        self.p * self.channels
    }

    fn layout(&self) -> Result<(Vec<LayerLayout>, usize)> {
        if self.p == 0 || self.channels == 0 || self.layers.is_empty() {
            return Err(Error::Shape("network needs p, channels and at least one layer".into()));
        }
        let mut out = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        let mut width = self.channels;
        let mut seen_dense = false;
        let mut any_lstm = false;
        for (idx, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Lstm { hidden, activation } => {
                    if seen_dense {
                        return Err(Error::Shape(format!("layer {idx}: LSTM after a dense layer")));
                    }
                    if hidden == 0 {
                        return Err(Error::Shape(format!("layer {idx}: zero hidden units")));
                    }
                    let cols = width + hidden;
                    out.push(LayerLayout {
                        kind: LayerKind::Lstm,
                        inputs: width,
                        outputs: hidden,
                        w_off: offset,
                        b_off: offset + 4 * hidden * cols,
                        activation,
                    });
                    offset += 4 * hidden * cols + 4 * hidden;
                    width = hidden;
                    any_lstm = true;
                }
                LayerSpec::Dense { units, activation } => {
                    if units == 0 {
                        return Err(Error::Shape(format!("layer {idx}: zero units")));
                    }
                    if !seen_dense && !any_lstm {
                        width = self.p * self.channels;
                    }
                    seen_dense = true;
                    out.push(LayerLayout {
                        kind: LayerKind::Dense,
                        inputs: width,
                        outputs: units,
                        w_off: offset,
                        b_off: offset + units * width,
                        activation,
                    });
                    offset += units * width + units;
                    width = units;
                }
            }
        }
        if !seen_dense || width != 1 {
            return Err(Error::Shape("network must end in a single-unit dense layer".into()));
        }
        Ok((out, offset))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    Lstm,
    Dense,
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    kind: LayerKind,
    inputs: usize,
    outputs: usize,
    w_off: usize,
    b_off: usize,
    activation: Activation,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetworkSpec,
    layout: Vec<LayerLayout>,
    params: Vec<f64>,
}

impl PartialEq for Network {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

/// Activations recorded by a forward pass, reused across calls.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    layers: Vec<LayerTape>,
    output: f64,
    // backward scratch
    seq_grad: Vec<f64>,
    seq_grad_next: Vec<f64>,
    vec_grad: Vec<f64>,
    vec_grad_next: Vec<f64>,
    dz: Vec<f64>,
    dh_next: Vec<f64>,
    dc_next: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
struct LayerTape {
    input: Vec<f64>,
    /// LSTM: p x 4H post-activation gates (i, f, g, o). Dense: outputs.
    out: Vec<f64>,
    c: Vec<f64>,
    a: Vec<f64>,
    h: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> f64 {
        self.output
    }
}

impl Network {
    /// Uniform initialization in `±1/sqrt(fan_in)`, forget-gate bias 1.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for lay in net.layout.clone() {
            let (rows, cols) = lay.weight_shape();
            let fan_in = match lay.kind {
                LayerKind::Lstm => lay.outputs,
                LayerKind::Dense => lay.inputs,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in &mut net.params[lay.w_off..lay.w_off + rows * cols] {
                *w = rng.gen_range(-bound..bound);
            }
            if lay.kind == LayerKind::Lstm {
                let h = lay.outputs;
                for b in &mut net.params[lay.b_off + h..lay.b_off + 2 * h] {
                    *b = 1.0;
                }
            }
        }
        Ok(net)
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        let (layout, n) = spec.layout()?;
        Ok(Self {
            spec,
            layout,
            params: vec![0.0; n],
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.spec.input_len()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_len() {
            return Err(Error::Shape(format!(
                "network expects {} inputs ({} x {}), got {}",
                self.input_len(),
                self.spec.p,
                self.spec.channels,
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        self.check_input(input)?;
        let mut tape = Tape::default();
        Ok(self.forward_tape(input, &mut tape))
    }

    /// Forward pass recording everything the backward pass needs. The input
    /// length is not checked.
    pub fn forward_tape(&self, input: &[f64], tape: &mut Tape) -> f64 {
        let p = self.spec.p;
        tape.layers.resize_with(self.layout.len(), LayerTape::default);
        let mut seq_source: Option<usize> = None;
        for (li, lay) in self.layout.iter().enumerate() {
            let (done, rest) = tape.layers.split_at_mut(li);
            let lt = &mut rest[0];
            match lay.kind {
                LayerKind::Lstm => {
                    lt.input.clear();
                    match seq_source {
                        None => lt.input.extend_from_slice(input),
                        Some(prev) => lt.input.extend_from_slice(&done[prev].h),
                    }
                    self.lstm_forward(lay, p, lt);
                    seq_source = Some(li);
                }
                LayerKind::Dense => {
                    lt.input.clear();
                    if li == 0 {
                        lt.input.extend_from_slice(input);
                    } else {
                        let prev = &done[li - 1];
                        match self.layout[li - 1].kind {
                            LayerKind::Lstm => {
                                let hsz = self.layout[li - 1].outputs;
                                lt.input.extend_from_slice(&prev.h[(p - 1) * hsz..p * hsz]);
                            }
                            LayerKind::Dense => lt.input.extend_from_slice(&prev.out),
                        }
                    }
                    self.dense_forward(lay, lt);
                }
            }
        }
        tape.output = tape.layers.last().map(|l| l.out[0]).unwrap_or(0.0);
        tape.output
    }

    fn dense_forward(&self, lay: &LayerLayout, lt: &mut LayerTape) {
        let w = &self.params[lay.w_off..lay.w_off + lay.outputs * lay.inputs];
        let b = &self.params[lay.b_off..lay.b_off + lay.outputs];
        lt.out.clear();
        for r in 0..lay.outputs {
            let row = &w[r * lay.inputs..(r + 1) * lay.inputs];
            let z = b[r] + dot(row, &lt.input);
            lt.out.push(lay.activation.apply(z));
        }
    }

    fn lstm_forward(&self, lay: &LayerLayout, p: usize, lt: &mut LayerTape) {
        let hsz = lay.outputs;
        let nin = lay.inputs;
        let cols = nin + hsz;
        let w = &self.params[lay.w_off..lay.w_off + 4 * hsz * cols];
        let b = &self.params[lay.b_off..lay.b_off + 4 * hsz];
        lt.out.resize(p * 4 * hsz, 0.0);
        lt.c.resize(p * hsz, 0.0);
        lt.a.resize(p * hsz, 0.0);
        lt.h.resize(p * hsz, 0.0);
        let zero = vec![0.0; hsz];
        for t in 0..p {
            let xt = &lt.input[t * nin..(t + 1) * nin];
            let (h_hist, h_rest) = lt.h.split_at_mut(t * hsz);
            let h_prev: &[f64] = if t == 0 { &zero } else { &h_hist[(t - 1) * hsz..] };
            let z = &mut lt.out[t * 4 * hsz..(t + 1) * 4 * hsz];
            for r in 0..4 * hsz {
                let row = &w[r * cols..(r + 1) * cols];
                z[r] = b[r] + dot(&row[..nin], xt) + dot(&row[nin..], h_prev);
            }
            for k in 0..hsz {
                z[k] = Activation::Sigmoid.apply(z[k]);
                z[hsz + k] = Activation::Sigmoid.apply(z[hsz + k]);
                z[2 * hsz + k] = lay.activation.apply(z[2 * hsz + k]);
                z[3 * hsz + k] = Activation::Sigmoid.apply(z[3 * hsz + k]);
            }
            let (c_hist, c_rest) = lt.c.split_at_mut(t * hsz);
            let h_t = &mut h_rest[..hsz];
            for k in 0..hsz {
                let c_prev = if t == 0 { 0.0 } else { c_hist[(t - 1) * hsz + k] };
                let c = z[hsz + k] * c_prev + z[k] * z[2 * hsz + k];
                c_rest[k] = c;
                let a = lay.activation.apply(c);
                lt.a[t * hsz + k] = a;
                h_t[k] = z[3 * hsz + k] * a;
            }
        }
    }

    /// Backpropagate `d_output` through the recorded pass. Parameter
    /// gradients are added into `grad`; the input gradient overwrites `d_input`.
    pub fn backward(&self, tape: &mut Tape, d_output: f64, mut grad: Option<&mut [f64]>, d_input: Option<&mut [f64]>) {
        let p = self.spec.p;
        let Tape {
            layers,
            seq_grad,
            seq_grad_next,
            vec_grad,
            vec_grad_next,
            dz,
            dh_next,
            dc_next,
            ..
        } = tape;

        vec_grad.clear();
        vec_grad.push(d_output);
        // true while the running gradient refers to a sequence of hidden states
        let mut in_sequence = false;
        for li in (0..self.layout.len()).rev() {
            let lay = &self.layout[li];
            let lt = &layers[li];
            match lay.kind {
                LayerKind::Dense => {
                    vec_grad_next.clear();
                    vec_grad_next.resize(lay.inputs, 0.0);
                    let w = &self.params[lay.w_off..lay.w_off + lay.outputs * lay.inputs];
                    for r in 0..lay.outputs {
                        let dzr = vec_grad[r] * lay.activation.derivative_from_output(lt.out[r]);
                        if dzr == 0.0 {
                            continue;
                        }
                        if let Some(g) = grad.as_deref_mut() {
                            let gw = &mut g[lay.w_off + r * lay.inputs..lay.w_off + (r + 1) * lay.inputs];
                            axpy(dzr, &lt.input, gw);
                            g[lay.b_off + r] += dzr;
                        }
                        axpy(dzr, &w[r * lay.inputs..(r + 1) * lay.inputs], vec_grad_next);
                    }
                    std::mem::swap(vec_grad, vec_grad_next);
                }
                LayerKind::Lstm => {
                    let hsz = lay.outputs;
                    if !in_sequence {
                        // only the final hidden state feeds the dense stack
                        seq_grad.clear();
                        seq_grad.resize(p * hsz, 0.0);
                        seq_grad[(p - 1) * hsz..].copy_from_slice(&vec_grad[..hsz]);
                        in_sequence = true;
                    }
                    seq_grad_next.clear();
                    seq_grad_next.resize(p * lay.inputs, 0.0);
                    self.lstm_backward(lay, p, lt, seq_grad, grad.as_deref_mut(), seq_grad_next, dz, dh_next, dc_next);
                    std::mem::swap(seq_grad, seq_grad_next);
                }
            }
        }
        if let Some(di) = d_input {
            let src: &[f64] = if in_sequence { seq_grad } else { vec_grad };
            di.copy_from_slice(&src[..di.len()]);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        lay: &LayerLayout,
        p: usize,
        lt: &LayerTape,
        dh_out: &[f64],
        mut grad: Option<&mut [f64]>,
        dx: &mut [f64],
        dz: &mut Vec<f64>,
        dh_next: &mut Vec<f64>,
        dc_next: &mut Vec<f64>,
    ) {
        let hsz = lay.outputs;
        let nin = lay.inputs;
        let cols = nin + hsz;
        let w = &self.params[lay.w_off..lay.w_off + 4 * hsz * cols];
        dz.clear();
        dz.resize(4 * hsz, 0.0);
        dh_next.clear();
        dh_next.resize(hsz, 0.0);
        dc_next.clear();
        dc_next.resize(hsz, 0.0);
        let act = lay.activation;
        for t in (0..p).rev() {
            let gates = &lt.out[t * 4 * hsz..(t + 1) * 4 * hsz];
            for k in 0..hsz {
                let dh = dh_out[t * hsz + k] + dh_next[k];
                let (i, f, g, o) = (gates[k], gates[hsz + k], gates[2 * hsz + k], gates[3 * hsz + k]);
                let a = lt.a[t * hsz + k];
                let c_prev = if t == 0 { 0.0 } else { lt.c[(t - 1) * hsz + k] };
                let d_o = dh * a;
                let dc = dc_next[k] + dh * o * act.derivative_from_output(a);
                dc_next[k] = dc * f;
                dz[k] = dc * g * i * (1.0 - i);
                dz[hsz + k] = dc * c_prev * f * (1.0 - f);
                dz[2 * hsz + k] = dc * i * act.derivative_from_output(g);
                dz[3 * hsz + k] = d_o * o * (1.0 - o);
            }
            let xt = &lt.input[t * nin..(t + 1) * nin];
            let h_prev: Option<&[f64]> = if t == 0 { None } else { Some(&lt.h[(t - 1) * hsz..t * hsz]) };
            if let Some(g) = grad.as_deref_mut() {
                for r in 0..4 * hsz {
                    let d = dz[r];
                    let row = &mut g[lay.w_off + r * cols..lay.w_off + (r + 1) * cols];
                    axpy(d, xt, &mut row[..nin]);
                    if let Some(hp) = h_prev {
                        axpy(d, hp, &mut row[nin..]);
                    }
                    g[lay.b_off + r] += d;
                }
            }
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            let dxt = &mut dx[t * nin..(t + 1) * nin];
            for r in 0..4 * hsz {
                let d = dz[r];
                let row = &w[r * cols..(r + 1) * cols];
                axpy(d, &row[..nin], dxt);
                axpy(d, &row[nin..], dh_next);
            }
        }
    }

    /// Gradient of the network output with respect to its input window.
    pub fn input_gradient(&self, input: &[f64], tape: &mut Tape) -> Result<(f64, Vec<f64>)> {
        self.check_input(input)?;
        let y = self.forward_tape(input, tape);
        let mut d = vec![0.0; input.len()];
        self.backward(tape, 1.0, None, Some(&mut d));
        Ok((y, d))
    }

    /// Mean squared error over the selected samples.
    pub fn mse(&self, data: &WindowedDataset, idx: &[usize], exec: Execution) -> f64 {
        if idx.is_empty() {
            return 0.0;
        }
        let chunks = idx.chunks(CHUNK).collect::<Vec<_>>();
        let partial = map_range(exec, chunks.len(), |c| {
            let mut tape = Tape::default();
            chunks[c]
                .iter()
                .map(|&i| {
                    let e = self.forward_tape(data.input(i), &mut tape) - data.targets[i];
                    e * e
                })
                .sum::<f64>()
        });
        partial.iter().sum::<f64>() / idx.len() as f64
    }

    /// Mean squared error over `idx` and its exact gradient. Per-chunk sums
    /// are reduced in chunk order, so the result does not depend on `exec`.
    pub fn loss_and_gradient(&self, data: &WindowedDataset, idx: &[usize], exec: Execution) -> Result<(f64, Vec<f64>)> {
        if idx.is_empty() {
            return Err(Error::Length { needed: 1, got: 0 });
        }
        if data.sample_width() != self.input_len() {
            return Err(Error::Shape(format!(
                "samples have {} values, network expects {}",
                data.sample_width(),
                self.input_len()
            )));
        }
        let scale = 1.0 / idx.len() as f64;
        let chunks = idx.chunks(CHUNK).collect::<Vec<_>>();
        let partial = map_range(exec, chunks.len(), |c| {
            let mut tape = Tape::default();
            let mut grad = vec![0.0; self.params.len()];
            let mut loss = 0.0;
            for &i in chunks[c] {
                let e = self.forward_tape(data.input(i), &mut tape) - data.targets[i];
                loss += e * e;
                self.backward(&mut tape, 2.0 * e * scale, Some(&mut grad), None);
            }
            (loss, grad)
        });
        let mut total = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (l, g) in &partial {
            loss += l;
            for (t, v) in total.iter_mut().zip(g) {
                *t += v;
            }
        }
        Ok((loss * scale, total))
    }
}

impl LayerLayout {
    fn weight_shape(&self) -> (usize, usize) {
        match self.kind {
            LayerKind::Lstm => (4 * self.outputs, self.inputs + self.outputs),
            LayerKind::Dense => (self.outputs, self.inputs),
        }
    }
}

/// Samples per gradient chunk; fixed so reductions are reproducible.
const CHUNK: usize = 8;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four accumulators so the loop vectorizes
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

/// Largest relative error `|a - fd| / (|a| + 1e-8)` between the analytic
/// loss gradient over `idx` and central differences with step `h`.
pub fn gradient_check(net: &Network, data: &WindowedDataset, idx: &[usize], h: f64) -> Result<f64> {
    let (_, analytic) = net.loss_and_gradient(data, idx, Execution::Sequential)?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for j in 0..net.n_params() {
        let p0 = net.params[j];
        probe.params[j] = p0 + h;
        let up = probe.mse(data, idx, Execution::Sequential);
        probe.params[j] = p0 - h;
        let down = probe.mse(data, idx, Execution::Sequential);
        probe.params[j] = p0;
        let fd = (up - down) / (2.0 * h);
        worst = worst.max((analytic[j] - fd).abs() / (analytic[j].abs() + 1e-8));
    }
    Ok(worst)
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Trailing fraction of the samples held out for model selection.
    pub validation_split: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            validation_split: 0.1,
            grad_clip: 1.0,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && (0.0..=0.5).contains(&self.validation_split)
            && self.grad_clip >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Entry 0 holds the losses of the initial parameters.
    pub history: Vec<EpochLoss>,
    pub best_epoch: usize,
}

impl TrainReport {
    pub fn best(&self) -> EpochLoss {
        self.history[self.best_epoch]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_mse", "validation_mse"])?;
        for e in &self.history {
            w.write_record(&[e.epoch.to_string(), e.train.to_string(), e.validation.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k];
            self.m[k] = cfg.beta1 * self.m[k] + (1.0 - cfg.beta1) * g;
            self.v[k] = cfg.beta2 * self.v[k] + (1.0 - cfg.beta2) * g * g;
            let mh = self.m[k] / c1;
            let vh = self.v[k] / c2;
            params[k] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
        }
    }
}

/// Adam over shuffled mini-batches. The network ends up holding the
/// parameters with the lowest validation loss seen (initial ones included).
pub fn train(net: &mut Network, data: &WindowedDataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Length { needed: 1, got: 0 });
    }
    let n = data.len();
    let n_val = ((n as f64) * cfg.validation_split).round() as usize;
    let n_val = n_val.min(n - 1);
    let train_idx: Vec<usize> = (0..n - n_val).collect();
    let val_idx: Vec<usize> = (n - n_val..n).collect();
    let selection_idx = if val_idx.is_empty() { &train_idx } else { &val_idx };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(net.n_params());
    let mut order = train_idx.clone();

    let initial_val = net.mse(data, selection_idx, cfg.execution);
    let initial_train = net.mse(data, &train_idx, cfg.execution);
    let mut history = vec![EpochLoss {
        epoch: 0,
        train: initial_train,
        validation: initial_val,
    }];
    let mut best = (0usize, initial_val, net.params.clone());

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, mut grad) = net.loss_and_gradient(data, batch, cfg.execution)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            adam.step(&mut net.params, &grad, cfg);
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_loss = net.mse(data, selection_idx, cfg.execution);
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        debug!("epoch {epoch}: train {train_loss:.3e} validation {val_loss:.3e}");
        history.push(EpochLoss {
            epoch,
            train: train_loss,
            validation: val_loss,
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, net.params.clone());
        }
    }
    net.params = best.2;
    Ok(TrainReport {
        history,
        best_epoch: best.0,
    })
}

const MAGIC: &[u8; 4] = b"IRNN";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Contents of a model file: the network plus the scaling it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub label: String,
    pub network: Network,
    pub scaler: Option<ScalingSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    label: String,
    spec: NetworkSpec,
    scaler: Option<ScalingSpec>,
    n_params: usize,
}

/// Binary layout: magic `IRNN`, `u32` version, `u64` header length, TOML
/// header, raw little-endian `f64` parameters, SHA-256 of everything before.
pub fn save_model(path: &Path, model: &ModelFile) -> Result<()> {
    let header = ModelHeader {
        label: model.label.clone(),
        spec: model.network.spec.clone(),
        scaler: model.scaler,
        n_params: model.network.n_params(),
    };
    let header = toml::to_string(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * model.network.n_params() + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for p in &model.network.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelFile> {
    let buf = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingInput(format!("model {}", path.display())),
        _ => Error::io(path, e),
    })?;
    decode_model(&buf)
}

pub fn decode_model(buf: &[u8]) -> Result<ModelFile> {
    let corrupt = |m: &str| Error::CorruptModel(m.to_string());
    if buf.len() < 16 + 32 || &buf[0..4] != MAGIC {
        return Err(corrupt("bad magic or truncated header"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let body_end = buf.len() - 32;
    if Sha256::digest(&buf[..body_end]).as_slice() != &buf[body_end..] {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    if 16 + hlen > body_end {
        return Err(corrupt("header length past end of file"));
    }
    let header = std::str::from_utf8(&buf[16..16 + hlen]).map_err(|_| corrupt("header is not UTF-8"))?;
    let header: ModelHeader = toml::from_str(header).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let mut network = Network::zeros(header.spec)?;
    if network.n_params() != header.n_params || body_end - (16 + hlen) != 8 * header.n_params {
        return Err(corrupt("parameter count does not match the network spec"));
    }
    for (k, chunk) in buf[16 + hlen..body_end].chunks_exact(8).enumerate() {
        network.params[k] = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(ModelFile {
        label: header.label,
        network,
        scaler: header.scaler,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-0.9..0.9)).collect()
    }

    fn toy_data(net: &Network, n: usize, seed: u64) -> WindowedDataset {
        let w = net.input_len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        WindowedDataset {
            p: net.spec.p,
            channels: net.spec.channels,
            inputs: (0..n * w).map(|_| rng.gen_range(-0.9..0.9)).collect(),
            targets: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }

    #[test]
    fn zero_network_outputs() {
        let spec = NetworkSpec::sequence_model(5, 2, 1, 4, Activation::Tanh, Activation::Tanh);
        let net = Network::zeros(spec).unwrap();
        assert_eq!(net.forward(&random_input(10, 1)).unwrap(), 0.0);
        let spec = NetworkSpec::sequence_model(5, 2, 1, 4, Activation::Tanh, Activation::Sigmoid);
        let net = Network::zeros(spec).unwrap();
        assert_eq!(net.forward(&random_input(10, 1)).unwrap(), 0.5);
    }

    #[test]
    fn forward_is_deterministic_and_checks_shape() {
        let spec = NetworkSpec::sequence_model(6, 2, 2, 5, Activation::Tanh, Activation::Tanh);
        let net = Network::new(spec, 3).unwrap();
        let x = random_input(12, 4);
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(matches!(net.forward(&x[..11]), Err(Error::Shape(_))));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = NetworkSpec {
            p: 3,
            channels: 2,
            layers: vec![
                LayerSpec::Dense { units: 4, activation: Activation::Tanh },
                LayerSpec::Lstm { hidden: 3, activation: Activation::Tanh },
                LayerSpec::Dense { units: 1, activation: Activation::Tanh },
            ],
        };
        assert!(Network::zeros(bad).is_err());
        let no_scalar = NetworkSpec {
            p: 3,
            channels: 2,
            layers: vec![LayerSpec::Dense { units: 2, activation: Activation::Tanh }],
        };
        assert!(Network::zeros(no_scalar).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let spec = NetworkSpec::sequence_model(4, 2, 1, 3, Activation::Tanh, Activation::Tanh);
        let net = Network::new(spec, 8).unwrap();
        let mut data = toy_data(&net, 3, 2);
        for i in 0..3 {
            data.targets[i] = net.forward(data.input(i)).unwrap();
        }
        let (loss, g) = net.loss_and_gradient(&data, &[0, 1, 2], Execution::Sequential).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_keeps_mean_gradient() {
        let spec = NetworkSpec::sequence_model(4, 2, 1, 3, Activation::Tanh, Activation::Tanh);
        let net = Network::new(spec, 8).unwrap();
        let data = toy_data(&net, 1, 2);
        let (_, g1) = net.loss_and_gradient(&data, &[0], Execution::Sequential).unwrap();
        let (_, g2) = net.loss_and_gradient(&data, &[0, 0], Execution::Sequential).unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_independent_of_execution_mode() {
        let spec = NetworkSpec::sequence_model(5, 2, 2, 4, Activation::Tanh, Activation::Tanh);
        let net = Network::new(spec, 1).unwrap();
        let data = toy_data(&net, 37, 5);
        let idx: Vec<usize> = (0..37).collect();
        let a = net.loss_and_gradient(&data, &idx, Execution::Sequential).unwrap();
        let b = net.loss_and_gradient(&data, &idx, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let spec = NetworkSpec::sequence_model(5, 2, 2, 4, Activation::Tanh, Activation::Tanh);
        let net = Network::new(spec, 11).unwrap();
        let x = random_input(10, 3);
        let mut tape = Tape::default();
        let (_, d) = net.input_gradient(&x, &mut tape).unwrap();
        for k in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / 2e-6;
            assert!((fd - d[k]).abs() < 1e-7 * (1.0 + fd.abs()), "k {k}: {fd} vs {}", d[k]);
        }
    }

    #[test]
    fn save_load_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.irnn");
        let spec = NetworkSpec::sequence_model(4, 2, 1, 3, Activation::Tanh, Activation::Tanh);
        let net = Network::new(spec, 21).unwrap();
        let model = ModelFile {
            label: "m1".into(),
            network: net.clone(),
            scaler: Some(ScalingSpec::from_ranges(3e-7, 0.12, 0.4).unwrap()),
        };
        save_model(&path, &model).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        let x = random_input(8, 9);
        assert_eq!(back.network.forward(&x).unwrap().to_bits(), net.forward(&x).unwrap().to_bits());

        let bytes = fs::read(&path).unwrap();
        assert!(matches!(decode_model(&bytes[..bytes.len() - 10]), Err(Error::CorruptModel(_))));
        assert!(matches!(decode_model(&bytes[..12]), Err(Error::CorruptModel(_))));
        let mut flipped = bytes.clone();
        flipped[40] ^= 0x55;
        assert!(matches!(decode_model(&flipped), Err(Error::CorruptModel(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(decode_model(&wrong_version), Err(Error::VersionMismatch { found: 7, .. })));
    }
}
