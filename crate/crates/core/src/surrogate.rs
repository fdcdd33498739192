//! Learned one-step predictors of the root-zone water content and their
//! multi-step use: the two-layer framework (three range-specialised
//! sub-models combined by a dense aggregator) and the single-LSTM baseline.

use std::fmt::Write as _;
use std::path::Path;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::{AffineMap, Dataset, ScalingSpec, WindowedDataset};
use crate::exec::{map_range, Execution};
use crate::mismatch::CorrectionState;
use crate::nn::{load_model, save_model, ModelFile, Network, Tape};

/// Output interval the scalers map onto `[-0.9, 0.9]` [m³/m³].
pub const OUTPUT_RANGE: (f64, f64) = (0.12, 0.40);
/// Operating ranges of the three sub-models [m³/m³].
pub const SUB_MODEL_RANGES: [(f64, f64); 3] = [(0.12, 0.27), (0.21, 0.32), (0.29, 0.40)];
/// Predictions are clipped to `[theta_r, theta_s]` of the default soil.
pub const DEFAULT_CLIP: (f64, f64) = (0.065, 0.41);

/// A one-step-ahead predictor over a `(u, y)` history of `window()` rows,
/// in physical units.
pub trait StepModel: Send + Sync {
    fn window(&self) -> usize;

    /// Unclipped prediction of the next output.
    fn predict(&self, u: &[f64], y: &[f64]) -> Result<f64>;

    /// Prediction and its partial derivatives with respect to each `u` and
    /// `y` history entry.
    fn predict_with_gradient(&self, u: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)>;

    fn clip_bounds(&self) -> (f64, f64) {
        DEFAULT_CLIP
    }
}

fn check_history(p: usize, u: &[f64], y: &[f64]) -> Result<()> {
    if u.len() != p || y.len() != p {
        return Err(Error::Shape(format!(
            "history must have {p} rows of (u, y), got {} and {}",
            u.len(),
            y.len()
        )));
    }
    Ok(())
}

/// A recurrent network together with the scaling it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledNet {
    pub label: String,
    pub network: Network,
    pub scaler: ScalingSpec,
}

impl ScaledNet {
    pub fn from_model(model: ModelFile) -> Result<Self> {
        let scaler = model
            .scaler
            .ok_or_else(|| Error::CorruptModel(format!("model '{}' carries no scaler", model.label)))?;
        if model.network.spec().channels != 2 {
            return Err(Error::Shape(format!("model '{}' is not a (u, y) sequence model", model.label)));
        }
        Ok(Self {
            label: model.label,
            network: model.network,
            scaler,
        })
    }

    pub fn to_model(&self) -> ModelFile {
        ModelFile {
            label: self.label.clone(),
            network: self.network.clone(),
            scaler: Some(self.scaler),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_model(load_model(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(path, &self.to_model())
    }

    fn scaled_input(&self, u: &[f64], y: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        for (&uj, &yj) in u.iter().zip(y) {
            buf.push(self.scaler.u.scale(uj));
            buf.push(self.scaler.y.scale(yj));
        }
    }

    /// Scaled output, recording into `tape`.
    fn forward_scaled(&self, u: &[f64], y: &[f64], tape: &mut Tape, buf: &mut Vec<f64>) -> f64 {
        self.scaled_input(u, y, buf);
        self.network.forward_tape(buf, tape)
    }

    /// Gradient of the scaled output, seeded with `seed`, with respect to the
    /// physical history; added into `du`, `dy`.
    fn backward_physical(&self, tape: &mut Tape, seed: f64, du: &mut [f64], dy: &mut [f64]) {
        let mut d = vec![0.0; 2 * du.len()];
        self.network.backward(tape, seed, None, Some(&mut d));
        for j in 0..du.len() {
            du[j] += d[2 * j] * self.scaler.u.gain;
            dy[j] += d[2 * j + 1] * self.scaler.y.gain;
        }
    }
}

impl StepModel for ScaledNet {
    fn window(&self) -> usize {
        self.network.spec().p
    }

    fn predict(&self, u: &[f64], y: &[f64]) -> Result<f64> {
        check_history(self.window(), u, y)?;
        let mut tape = Tape::default();
        let mut buf = Vec::new();
        Ok(self.scaler.y.unscale(self.forward_scaled(u, y, &mut tape, &mut buf)))
    }

    fn predict_with_gradient(&self, u: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        check_history(self.window(), u, y)?;
        let mut tape = Tape::default();
        let mut buf = Vec::new();
        let s = self.forward_scaled(u, y, &mut tape, &mut buf);
        let mut du = vec![0.0; u.len()];
        let mut dy = vec![0.0; y.len()];
        self.backward_physical(&mut tape, 1.0 / self.scaler.y.gain, &mut du, &mut dy);
        Ok((self.scaler.y.unscale(s), du, dy))
    }
}

/// Sub-models `M1..M3` feeding the aggregator `M_A`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerSurrogate {
    pub subs: Vec<ScaledNet>,
    pub aggregator: Network,
    /// Output scaling shared by the sub-model outputs and the aggregator.
    pub y_map: AffineMap,
}

pub const SUB_MODEL_FILES: [&str; 3] = ["m1.irnn", "m2.irnn", "m3.irnn"];
pub const AGGREGATOR_FILE: &str = "agg.irnn";
pub const BASELINE_FILE: &str = "baseline.irnn";

impl TwoLayerSurrogate {
    pub fn new(subs: Vec<ScaledNet>, aggregator: Network) -> Result<Self> {
        if subs.is_empty() {
            return Err(Error::Shape("two-layer surrogate needs sub-models".into()));
        }
        if aggregator.input_len() != subs.len() {
            return Err(Error::Shape(format!(
                "aggregator takes {} inputs but there are {} sub-models",
                aggregator.input_len(),
                subs.len()
            )));
        }
        let y_map = subs[0].scaler.y;
        let p = subs[0].window();
        for s in &subs[1..] {
            if s.scaler.y != y_map || s.window() != p {
                return Err(Error::Shape(format!("sub-model '{}' uses a different window or output scaling", s.label)));
            }
        }
        Ok(Self {
            subs,
            aggregator,
            y_map,
        })
    }

    /// Sub-model outputs (scaled) for one history.
    pub fn sub_outputs(&self, u: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        check_history(self.window(), u, y)?;
        let mut tape = Tape::default();
        let mut buf = Vec::new();
        Ok(self
            .subs
            .iter()
            .map(|s| s.forward_scaled(u, y, &mut tape, &mut buf))
            .collect())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut subs = Vec::new();
        for name in SUB_MODEL_FILES {
            let path = dir.join(name);
            if !path.exists() {
                return Err(Error::MissingDependency(format!("sub-model {}", path.display())));
            }
            subs.push(ScaledNet::load(&path)?);
        }
        let agg_path = dir.join(AGGREGATOR_FILE);
        if !agg_path.exists() {
            return Err(Error::MissingDependency(format!("aggregator {}", agg_path.display())));
        }
        Self::new(subs, load_model(&agg_path)?.network)
    }

    pub fn aggregator_model(&self) -> ModelFile {
        ModelFile {
            label: "agg".into(),
            network: self.aggregator.clone(),
            scaler: None,
        }
    }
}

impl StepModel for TwoLayerSurrogate {
    fn window(&self) -> usize {
        self.subs[0].window()
    }

    fn predict(&self, u: &[f64], y: &[f64]) -> Result<f64> {
        let s = self.sub_outputs(u, y)?;
        Ok(self.y_map.unscale(self.aggregator.forward(&s)?))
    }

    fn predict_with_gradient(&self, u: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        check_history(self.window(), u, y)?;
        let mut buf = Vec::new();
        let mut tapes: Vec<Tape> = vec![Tape::default(); self.subs.len()];
        let s: Vec<f64> = self
            .subs
            .iter()
            .zip(tapes.iter_mut())
            .map(|(m, t)| m.forward_scaled(u, y, t, &mut buf))
            .collect();
        let mut agg_tape = Tape::default();
        let out = self.aggregator.forward_tape(&s, &mut agg_tape);
        let mut ds = vec![0.0; s.len()];
        let seed = 1.0 / self.y_map.gain;
        self.aggregator.backward(&mut agg_tape, seed, None, Some(&mut ds));
        let mut du = vec![0.0; u.len()];
        let mut dy = vec![0.0; y.len()];
        for ((m, t), &d) in self.subs.iter().zip(tapes.iter_mut()).zip(&ds) {
            m.backward_physical(t, d, &mut du, &mut dy);
        }
        Ok((self.y_map.unscale(out), du, dy))
    }
}

/// History ending at the current time `t`: outputs `y(t-p+1..=t)` and the
/// inputs already applied, `u(t-p+1..t)` (one fewer than `y`).
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
}

impl History {
    /// Constant history at output `y0` with zero input.
    pub fn constant(p: usize, y0: f64) -> Self {
        Self {
            u: vec![0.0; p - 1],
            y: vec![y0; p],
        }
    }

    /// History of a dataset at index `t` (needs `t + 1 >= p`), using the
    /// noisy output channel.
    pub fn from_dataset(data: &Dataset, t: usize, p: usize) -> Result<Self> {
        if t + 1 < p || t >= data.len() {
            return Err(Error::Length { needed: p, got: t + 1 });
        }
        Ok(Self {
            u: data.u[t + 1 - p..t].to_vec(),
            y: data.y_noisy[t + 1 - p..=t].to_vec(),
        })
    }

    pub fn p(&self) -> usize {
        self.y.len()
    }

    fn check(&self) -> Result<()> {
        if self.y.is_empty() || self.u.len() + 1 != self.y.len() {
            return Err(Error::Shape(format!(
                "history needs p outputs and p-1 inputs, got {} and {}",
                self.y.len(),
                self.u.len()
            )));
        }
        Ok(())
    }

    /// Drop the oldest row and append `(u_now, y_next)`: `u_now` was applied
    /// at the current time and `y_next` is the new output.
    pub fn push(&mut self, u_now: f64, y_next: f64) {
        self.u.push(u_now);
        self.u.remove(0);
        self.y.push(y_next);
        self.y.remove(0);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    /// Corrected, clipped predictions `ŷ(t+1..=t+N)`.
    pub predictions: Vec<f64>,
    /// Raw model outputs before correction and clipping.
    pub raw: Vec<f64>,
    /// Outputs written back into the history after each step.
    pub fed_back: Vec<f64>,
    pub clipped: usize,
    /// NRMSE against the supplied truth, when its range is nondegenerate.
    pub nrmse: Option<f64>,
}

/// Autoregressive `n`-step prediction with inputs `future_u[0..n]`.
///
/// With a correction state, every raw prediction passes through it; if
/// `truth` is also given, the state is updated against it step by step.
/// The corrected prediction is what enters the history.
pub fn rollout(
    model: &dyn StepModel,
    history: &History,
    future_u: &[f64],
    n: usize,
    mut correction: Option<&mut CorrectionState>,
    truth: Option<&[f64]>,
) -> Result<RolloutResult> {
    history.check()?;
    let p = model.window();
    if history.p() != p {
        return Err(Error::Shape(format!("model window is {p}, history has {} rows", history.p())));
    }
    if n == 0 {
        return Err(Error::Length { needed: 1, got: 0 });
    }
    if future_u.len() < n {
        return Err(Error::Length {
            needed: n,
            got: future_u.len(),
        });
    }
    if let Some(t) = truth {
        if t.len() < n {
            return Err(Error::Length { needed: n, got: t.len() });
        }
    }
    let (lo, hi) = model.clip_bounds();
    let mut u: Vec<f64> = history.u.clone();
    let mut y: Vec<f64> = history.y.clone();
    u.push(future_u[0]);
    let mut out = RolloutResult {
        predictions: Vec::with_capacity(n),
        raw: Vec::with_capacity(n),
        fed_back: Vec::with_capacity(n),
        clipped: 0,
        nrmse: None,
    };
    for k in 0..n {
        let raw = model.predict(&u[u.len() - p..], &y[y.len() - p..])?;
        let mut pred = match correction.as_deref() {
            Some(c) => c.apply(raw),
            None => raw,
        };
        if !(lo..=hi).contains(&pred) {
            out.clipped += 1;
            pred = pred.clamp(lo, hi);
        }
        if let (Some(c), Some(t)) = (correction.as_deref_mut(), truth) {
            c.record_and_maybe_update(k + 1, t[k], raw);
        }
        out.raw.push(raw);
        out.predictions.push(pred);
        out.fed_back.push(pred);
        y.push(pred);
        if k + 1 < n {
            u.push(future_u[k + 1]);
        }
    }
    if out.clipped > 0 {
        debug!("rollout clipped {} of {n} predictions to [{lo}, {hi}]", out.clipped);
    }
    if let Some(t) = truth {
        out.nrmse = nrmse(&t[..n], &out.predictions).ok();
    }
    Ok(out)
}

/// Root-mean-square error normalised by the range of `actual`.
pub fn nrmse(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return Err(Error::Length {
            needed: actual.len().max(1),
            got: predicted.len(),
        });
    }
    let (lo, hi) = crate::excitation::min_max(actual);
    if !(hi > lo) {
        return Err(Error::DegenerateRange(format!("actual sequence is constant at {lo}")));
    }
    let mse = actual
        .iter()
        .zip(predicted)
        .map(|(a, p)| (a - p).powi(2))
        .sum::<f64>()
        / actual.len() as f64;
    Ok(mse.sqrt() / (hi - lo))
}

/// Predictions of every start time of a validation set, `steps` ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonPredictions {
    pub starts: Vec<usize>,
    /// `predictions[s][k]`: start `starts[k]`, `s + 1` steps ahead.
    pub predictions: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
}

/// Roll the model out from every admissible start of `data` (noisy history
/// in, clean truth out) for `horizon` steps.
pub fn horizon_predictions(model: &dyn StepModel, data: &Dataset, horizon: usize, exec: Execution) -> Result<HorizonPredictions> {
    let p = model.window();
    if data.len() < p + horizon {
        return Err(Error::Length {
            needed: p + horizon,
            got: data.len(),
        });
    }
    let starts: Vec<usize> = (p - 1..data.len() - horizon).collect();
    let runs = map_range(exec, starts.len(), |k| {
        let t = starts[k];
        let hist = History::from_dataset(data, t, p)?;
        rollout(model, &hist, &data.u[t..t + horizon], horizon, None, None).map(|r| r.predictions)
    });
    let mut predictions = vec![Vec::with_capacity(starts.len()); horizon];
    let mut truth = vec![Vec::with_capacity(starts.len()); horizon];
    for (k, run) in runs.into_iter().enumerate() {
        let run = run?;
        let t = starts[k];
        for s in 0..horizon {
            predictions[s].push(run[s]);
            truth[s].push(data.y_clean[t + s + 1]);
        }
    }
    Ok(HorizonPredictions {
        starts,
        predictions,
        truth,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NrmseRow {
    pub model: String,
    pub steps: usize,
    pub nrmse: f64,
}

/// NRMSE at each requested prediction step over the whole validation set.
pub fn validate_model(label: &str, model: &dyn StepModel, data: &Dataset, steps: &[usize], exec: Execution) -> Result<Vec<NrmseRow>> {
    let horizon = steps.iter().copied().max().unwrap_or(0);
    if horizon == 0 {
        return Err(Error::Config("at least one prediction step is required".into()));
    }
    let h = horizon_predictions(model, data, horizon, exec)?;
    let (lo, hi) = data.operating_range();
    let out_of_range = data.y_noisy.iter().any(|&y| y < OUTPUT_RANGE.0 || y > OUTPUT_RANGE.1);
    if out_of_range {
        warn!("{label}: validation outputs leave the scaled range [{lo:.3}, {hi:.3}]");
    }
    steps
        .iter()
        .map(|&s| {
            Ok(NrmseRow {
                model: label.to_string(),
                steps: s,
                nrmse: nrmse(&h.truth[s - 1], &h.predictions[s - 1])?,
            })
        })
        .collect()
}

pub fn write_nrmse_csv(path: &Path, rows: &[NrmseRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["model", "steps", "nrmse"])?;
    for r in rows {
        w.write_record(&[r.model.clone(), r.steps.to_string(), format!("{:.6}", r.nrmse)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Aggregator training samples: sub-model outputs on each window of `data`
/// against the scaled next output.
pub fn aggregator_dataset(subs: &[ScaledNet], data: &Dataset, exec: Execution) -> Result<WindowedDataset> {
    let p = subs.first().map(|s| s.window()).ok_or_else(|| Error::Shape("no sub-models".into()))?;
    if data.len() < p + 1 {
        return Err(Error::Length {
            needed: p + 1,
            got: data.len(),
        });
    }
    let count = data.len() - p;
    let y_map = subs[0].scaler.y;
    let rows = map_range(exec, count, |k| {
        let mut tape = Tape::default();
        let mut buf = Vec::new();
        let u = &data.u[k..k + p];
        let y = &data.y_noisy[k..k + p];
        subs.iter()
            .map(|s| s.forward_scaled(u, y, &mut tape, &mut buf))
            .collect::<Vec<f64>>()
    });
    Ok(WindowedDataset {
        p: 1,
        channels: subs.len(),
        inputs: rows.into_iter().flatten().collect(),
        targets: (0..count).map(|k| y_map.scale(data.y_noisy[k + p])).collect(),
    })
}

/// Percentage improvement of `ours` over `reference`.
pub fn percent_diff(reference: f64, ours: f64) -> f64 {
    (reference - ours) / reference * 100.0
}

/// Markdown table of NRMSE rows grouped by step.
pub fn nrmse_markdown(rows: &[NrmseRow]) -> String {
    let mut s = String::from("| model | steps | NRMSE |\n|---|---|---|\n");
    for r in rows {
        let _ = writeln!(s, "| {} | {} | {:.4} |", r.model, r.steps, r.nrmse);
    }
    s
}
