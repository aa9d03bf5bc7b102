//! Multi-horizon anomaly detector with hand-written backpropagation.
//!
//! A `tanh` encoder summarizes the flattened lookback window into a hidden
//! state `h`. A shared recurrent cell then emits one probability per horizon
//! step, fed by `h` and the previous step's label:
//!
//! ```text
//! g_k = tanh(W_d [h; y_{k-1}] + b_d),   p_k = sigmoid(w_o . g_k + b_o),   y_0 = 0
//! ```
//!
//! With teacher forcing `y_{k-1}` is the true previous label, otherwise the
//! model's own previous output. Training minimizes class-weighted binary
//! cross-entropy with mini-batch gradient descent.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::windowing::WindowSample;

/// Probability clamp applied before taking logs.
pub const PROB_EPS: f64 = 1e-7;
pub const FD_STEP: f64 = 1e-5;

const CHECKPOINT_MAGIC: &[u8; 8] = b"TADCKPT\n";
const CHECKPOINT_VERSION: u32 = 1;

/// All weights in one flat buffer: `W_e` (`d x n`, row-major), `b_e`,
/// `W_d` (`d x (d+1)`), `b_d`, `w_o`, `b_o`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub input_dim: usize,
    pub hidden: usize,
    pub horizon: usize,
    values: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Layout {
    w_e: Range<usize>,
    b_e: Range<usize>,
    w_d: Range<usize>,
    b_d: Range<usize>,
    w_o: Range<usize>,
    b_o: usize,
}

impl Layout {
    fn new(n: usize, d: usize) -> Self {
        let w_e = 0..d * n;
        let b_e = w_e.end..w_e.end + d;
        let w_d = b_e.end..b_e.end + d * (d + 1);
        let b_d = w_d.end..w_d.end + d;
        let w_o = b_d.end..b_d.end + d;
        let b_o = w_o.end;
        Self {
            w_e,
            b_e,
            w_d,
            b_d,
            w_o,
            b_o,
        }
    }

    fn len(&self) -> usize {
        self.b_o + 1
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Activations of one forward pass, kept for backpropagation.
struct Trace {
    h: Vec<f64>,
    /// Decoder feedback input per step.
    prev: Vec<f64>,
    /// Decoder states, `horizon x hidden`.
    g: Vec<f64>,
    p: Vec<f64>,
}

impl DetectorParams {
    pub fn zeros(input_dim: usize, hidden: usize, horizon: usize) -> Self {
        let len = Layout::new(input_dim, hidden).len();
        Self {
            input_dim,
            hidden,
            horizon,
            values: vec![0.0; len],
        }
    }

    /// Xavier-uniform weights and zero biases.
    pub fn init<R: Rng>(input_dim: usize, hidden: usize, horizon: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(input_dim, hidden, horizon);
        let l = p.layout();
        let mut fill = |range: Range<usize>, fan_in: usize, fan_out: usize| {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in &mut p.values[range] {
                *v = rng.random_range(-r..r);
            }
        };
        fill(l.w_e, input_dim, hidden);
        fill(l.w_d, hidden + 1, hidden);
        fill(l.w_o, hidden, 1);
        p
    }

    pub fn from_values(input_dim: usize, hidden: usize, horizon: usize, values: Vec<f64>) -> Result<Self> {
        let len = Layout::new(input_dim, hidden).len();
        if values.len() != len {
            return Err(Error::Shape(format!("{} parameter values, expected {len}", values.len())));
        }
        Ok(Self {
            input_dim,
            hidden,
            horizon,
            values,
        })
    }

    fn layout(&self) -> Layout {
        Layout::new(self.input_dim, self.hidden)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn w_e(&self) -> &[f64] {
        &self.values[self.layout().w_e]
    }

    pub fn b_e(&self) -> &[f64] {
        &self.values[self.layout().b_e]
    }

    pub fn w_d(&self) -> &[f64] {
        &self.values[self.layout().w_d]
    }

    pub fn b_d(&self) -> &[f64] {
        &self.values[self.layout().b_d]
    }

    pub fn w_o(&self) -> &[f64] {
        &self.values[self.layout().w_o]
    }

    pub fn b_o(&self) -> f64 {
        self.values[self.layout().b_o]
    }

    /// Euclidean norms of encoder, decoder and head parameters.
    pub fn norms(&self) -> (f64, f64, f64) {
        let l = self.layout();
        (
            norm(&self.values[l.w_e.start..l.b_e.end]),
            norm(&self.values[l.w_d.start..l.b_d.end]),
            norm(&self.values[l.w_o.start..=l.b_o]),
        )
    }

    fn non_finite(&self, stage: &'static str) -> Error {
        let (enc_norm, dec_norm, head_norm) = self.norms();
        Error::NonFinite {
            stage,
            enc_norm,
            dec_norm,
            head_norm,
        }
    }

    fn check_input(&self, input: &[f64], teacher: Option<&[f64]>) -> Result<()> {
        if input.len() != self.input_dim {
            return Err(Error::Shape(format!("input of length {}, expected {}", input.len(), self.input_dim)));
        }
        if let Some(t) = teacher {
            if t.len() != self.horizon {
                return Err(Error::Shape(format!("teacher of length {}, expected {}", t.len(), self.horizon)));
            }
        }
        Ok(())
    }

    fn run(&self, x: &[f64], teacher: Option<&[f64]>) -> Trace {
        let (n, d, hz) = (self.input_dim, self.hidden, self.horizon);
        let l = self.layout();
        let v = &self.values;
        let h: Vec<f64> = (0..d)
            .map(|i| (v[l.b_e.start + i] + dot(&v[l.w_e.start + i * n..l.w_e.start + (i + 1) * n], x)).tanh())
            .collect();
        // The hidden-state part of the decoder pre-activation is shared by all steps.
        let base: Vec<f64> = (0..d)
            .map(|i| {
                let row = l.w_d.start + i * (d + 1);
                v[l.b_d.start + i] + dot(&v[row..row + d], &h)
            })
            .collect();
        let w_o = &v[l.w_o.clone()];
        let mut prev = vec![0.0; hz];
        let mut g = vec![0.0; hz * d];
        let mut p = vec![0.0; hz];
        for k in 0..hz {
            let y_prev = match (k, teacher) {
                (0, _) => 0.0,
                (_, Some(t)) => t[k - 1],
                (_, None) => p[k - 1],
            };
            prev[k] = y_prev;
            let gk = &mut g[k * d..(k + 1) * d];
            for (i, gi) in gk.iter_mut().enumerate() {
                *gi = (base[i] + v[l.w_d.start + i * (d + 1) + d] * y_prev).tanh();
            }
            p[k] = sigmoid(v[l.b_o] + dot(w_o, gk));
        }
        Trace { h, prev, g, p }
    }

    /// Horizon probabilities for one flattened window.
    pub fn forward(&self, input: &[f64], teacher: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_input(input, teacher)?;
        let t = self.run(input, teacher);
        if t.p.iter().any(|p| !p.is_finite()) {
            return Err(self.non_finite("forward"));
        }
        Ok(t.p)
    }

    /// Self-fed predictions for every sample.
    pub fn predict(&self, samples: &[WindowSample]) -> Result<Vec<Vec<f64>>> {
        samples.iter().map(|s| self.forward(s.input, None)).collect()
    }

    /// Adds `scale * dLoss/dparams` of one sample to `grad` and returns the
    /// sample's unscaled loss summed over steps.
    fn backward(&self, x: &[f64], tr: &Trace, target: &[f64], w_ano: f64, self_feed: bool, scale: f64, grad: &mut [f64]) -> f64 {
        let (n, d, hz) = (self.input_dim, self.hidden, self.horizon);
        let l = self.layout();
        let v = &self.values;
        let mut loss = 0.0;
        let mut dz_sum = vec![0.0; d];
        let mut dz = vec![0.0; d];
        // Gradient reaching p_k through the next step's feedback input.
        let mut dp_feedback = 0.0;
        for k in (0..hz).rev() {
            let p = tr.p[k];
            let y = target[k];
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            loss -= w_ano * y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            let mut da = dp_feedback * p * (1.0 - p);
            if p > PROB_EPS && p < 1.0 - PROB_EPS {
                da += scale * ((1.0 - y) * p - w_ano * y * (1.0 - p));
            }
            let gk = &tr.g[k * d..(k + 1) * d];
            for i in 0..d {
                grad[l.w_o.start + i] += da * gk[i];
            }
            grad[l.b_o] += da;
            let mut d_prev = 0.0;
            for i in 0..d {
                dz[i] = da * v[l.w_o.start + i] * (1.0 - gk[i] * gk[i]);
                dz_sum[i] += dz[i];
                let col = l.w_d.start + i * (d + 1) + d;
                grad[col] += dz[i] * tr.prev[k];
                d_prev += v[col] * dz[i];
            }
            dp_feedback = if self_feed && k > 0 { d_prev } else { 0.0 };
        }
        let mut dh = vec![0.0; d];
        for i in 0..d {
            let row = l.w_d.start + i * (d + 1);
            grad[l.b_d.start + i] += dz_sum[i];
            for j in 0..d {
                grad[row + j] += dz_sum[i] * tr.h[j];
                dh[j] += v[row + j] * dz_sum[i];
            }
        }
        for i in 0..d {
            let de = dh[i] * (1.0 - tr.h[i] * tr.h[i]);
            if de == 0.0 {
                continue;
            }
            grad[l.b_e.start + i] += de;
            let row = &mut grad[l.w_e.start + i * n..l.w_e.start + (i + 1) * n];
            for (gw, xj) in row.iter_mut().zip(x) {
                *gw += de * xj;
            }
        }
        loss
    }

    /// Mean loss and its gradient over a batch of `(input, target)` pairs.
    pub fn loss_and_grad(&self, batch: &[(&[f64], &[f64])], w_ano: f64, teacher_forcing: bool) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; self.len()];
        let loss = self.accumulate(batch, w_ano, teacher_forcing, &mut grad)?;
        Ok((loss, grad))
    }

    fn accumulate(&self, batch: &[(&[f64], &[f64])], w_ano: f64, teacher_forcing: bool, grad: &mut [f64]) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        let scale = 1.0 / (batch.len() * self.horizon) as f64;
        let mut total = 0.0;
        for &(x, y) in batch {
            self.check_input(x, Some(y))?;
            let tr = self.run(x, teacher_forcing.then_some(y));
            total += self.backward(x, &tr, y, w_ano, !teacher_forcing, scale, grad);
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(self.non_finite("backward"));
        }
        Ok(loss)
    }

    /// Mean weighted loss over a batch without gradients.
    pub fn loss(&self, batch: &[(&[f64], &[f64])], w_ano: f64, teacher_forcing: bool) -> Result<f64> {
        let mut probs = Vec::with_capacity(batch.len() * self.horizon);
        let mut targets = Vec::with_capacity(batch.len() * self.horizon);
        for &(x, y) in batch {
            probs.extend(self.forward(x, teacher_forcing.then_some(y))?);
            targets.extend_from_slice(y);
        }
        Ok(wbce(&probs, &targets, w_ano))
    }
}

/// Mean class-weighted binary cross-entropy over all entries.
pub fn wbce(probs: &[f64], targets: &[f64], w_ano: f64) -> f64 {
    assert_eq!(probs.len(), targets.len(), "probabilities and targets differ in length");
    if probs.is_empty() {
        return 0.0;
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(w_ano * y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    total / probs.len() as f64
}

/// Ratio of negative to positive step targets.
pub fn default_anomaly_weight(samples: &[WindowSample]) -> Result<f64> {
    let ones = samples.iter().flat_map(|s| &s.target).filter(|&&y| y > 0.5).count();
    let total: usize = samples.iter().map(|s| s.target.len()).sum();
    if ones == 0 {
        return Err(Error::NoPositives);
    }
    Ok((total - ones) as f64 / ones as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub teacher_forcing: bool,
    /// Overrides the negative-to-positive ratio when set.
    pub w_ano: Option<f64>,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            lr: 0.01,
            epochs: 30,
            batch_size: 64,
            seed: 0,
            teacher_forcing: true,
            w_ano: None,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter("hidden, epochs and batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be nonnegative", self.lr)));
        }
        if let Some(w) = self.w_ano {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidParameter(format!("w_ano {w} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub w_ano: f64,
    pub initial: DetectorParams,
    /// Parameters after each epoch.
    pub snapshots: Vec<DetectorParams>,
    /// Mean mini-batch loss seen during each epoch.
    pub epoch_losses: Vec<f64>,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains from a seeded initialization and returns one snapshot per epoch.
pub fn train(samples: &[WindowSample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let first = samples.first().ok_or(Error::EmptySeries("training samples"))?;
    let (input_dim, horizon) = (first.input.len(), first.target.len());
    let default_w = default_anomaly_weight(samples)?;
    let w_ano = config.w_ano.unwrap_or(default_w);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = DetectorParams::init(input_dim, config.hidden, horizon, &mut rng);
    let initial = params.clone();
    let mut adam = Adam {
        m: vec![0.0; params.len()],
        v: vec![0.0; params.len()],
        t: 0,
    };
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut grad = vec![0.0; params.len()];
    let mut snapshots = Vec::with_capacity(config.epochs);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&[f64], &[f64])> = chunk
                .iter()
                .map(|&i| (samples[i].input, samples[i].target.as_slice()))
                .collect();
            grad.fill(0.0);
            loss_sum += params.accumulate(&batch, w_ano, config.teacher_forcing, &mut grad)?;
            batches += 1;
            match config.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in params.values.iter_mut().zip(&grad) {
                        *p -= config.lr * g;
                    }
                }
                Optimizer::Adam => adam.step(&mut params.values, &grad, config.lr),
            }
            if params.values.iter().any(|v| !v.is_finite()) {
                return Err(params.non_finite("update"));
            }
        }
        let mean = loss_sum / batches as f64;
        log::debug!("epoch {}: loss {mean:.5}", epoch + 1);
        epoch_losses.push(mean);
        snapshots.push(params.clone());
    }
    Ok(TrainOutcome {
        w_ano,
        initial,
        snapshots,
        epoch_losses,
    })
}

/// Analytic and central-difference gradients of the single-sample loss.
pub fn numeric_and_analytic(params: &DetectorParams, input: &[f64], target: &[f64], w_ano: f64, teacher_forcing: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let batch = [(input, target)];
    let (_, analytic) = params.loss_and_grad(&batch, w_ano, teacher_forcing)?;
    let mut probe = params.clone();
    let mut numeric = vec![0.0; params.len()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let orig = probe.values[i];
        probe.values[i] = orig + FD_STEP;
        let up = probe.loss(&batch, w_ano, teacher_forcing)?;
        probe.values[i] = orig - FD_STEP;
        let down = probe.loss(&batch, w_ano, teacher_forcing)?;
        probe.values[i] = orig;
        *slot = (up - down) / (2.0 * FD_STEP);
    }
    Ok((analytic, numeric))
}

/// `max |a - f| / max(max |a|, max |f|, 1e-8)` over all parameters.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let diff = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
    diff / max_abs(analytic).max(max_abs(numeric)).max(1e-8)
}

/// Compares backpropagation with finite differences on one sample.
pub fn grad_check(params: &DetectorParams, input: &[f64], target: &[f64], w_ano: f64, teacher_forcing: bool) -> Result<f64> {
    let (a, f) = numeric_and_analytic(params, input, target, w_ano, teacher_forcing)?;
    Ok(relative_error(&a, &f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub input_dim: usize,
    pub hidden: usize,
    pub horizon: usize,
    pub n_values: usize,
    pub seed: u64,
    /// Free-form configuration echo.
    pub config: serde_json::Value,
}

/// Writes magic bytes, a length-prefixed JSON header and little-endian values.
pub fn write_checkpoint(path: &Path, params: &DetectorParams, seed: u64, config: serde_json::Value) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        input_dim: params.input_dim,
        hidden: params.hidden,
        horizon: params.horizon,
        n_values: params.len(),
        seed,
        config,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + params.len() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for v in &params.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, DetectorParams)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if buf.len() < 12 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a detector checkpoint"));
    }
    let hlen = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
    let body = buf.get(12..12 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    let data = &buf[12 + hlen..];
    if data.len() != header.n_values * 8 {
        return Err(bad("parameter block length does not match header"));
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = DetectorParams::from_values(header.input_dim, header.hidden, header.horizon, values)?;
    Ok((header, params))
}
