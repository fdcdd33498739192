//! Online plant-model-mismatch correction: a single additive bias or a
//! box-constrained affine map, refitted every `f` prediction steps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::Dataset;
use crate::exec::{map_range, Execution};
use crate::surrogate::{rollout, History, StepModel};

/// Box for the affine gain.
pub const A_BOX: (f64, f64) = (0.8, 1.5);
/// Box for the affine offset [m³/m³].
pub const B_BOX: (f64, f64) = (-0.2, 0.3);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionKind {
    #[default]
    None,
    #[serde(alias = "bias")]
    SingleBias,
    Linear,
}

impl std::str::FromStr for CorrectionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "bias" | "single_bias" => Ok(Self::SingleBias),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown correction kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionState {
    pub kind: CorrectionKind,
    pub f: usize,
    pub b1: f64,
    pub a: f64,
    pub b2: f64,
    /// (y_act, y_pred) pairs since the last update.
    buffer: Vec<(f64, f64)>,
}

impl CorrectionState {
    /// `f` must divide the horizon; the affine map needs at least two points.
    pub fn new(kind: CorrectionKind, f: usize, horizon: usize) -> Result<Self> {
        if f == 0 || horizon == 0 || !horizon.is_multiple_of(f) {
            return Err(Error::InvalidFrequency {
                f,
                reason: format!("must be a divisor of the horizon {horizon}"),
            });
        }
        if kind == CorrectionKind::Linear && f < 2 {
            return Err(Error::InvalidFrequency {
                f,
                reason: "the linear correction needs at least two points per update".into(),
            });
        }
        Ok(Self {
            kind,
            f,
            b1: 0.0,
            a: 1.0,
            b2: 0.0,
            buffer: Vec::with_capacity(f),
        })
    }

    pub fn none() -> Self {
        Self {
            kind: CorrectionKind::None,
            f: 1,
            b1: 0.0,
            a: 1.0,
            b2: 0.0,
            buffer: Vec::new(),
        }
    }

    /// Back to the initial guess (`b1 = 0`, `a = 1`, `b2 = 0`).
    pub fn reset(&mut self) {
        self.b1 = 0.0;
        self.a = 1.0;
        self.b2 = 0.0;
        self.buffer.clear();
    }

    #[inline]
    pub fn apply(&self, y_pred: f64) -> f64 {
        match self.kind {
            CorrectionKind::None => y_pred,
            CorrectionKind::SingleBias => y_pred + self.b1,
            CorrectionKind::Linear => self.a * y_pred + self.b2,
        }
    }

    /// d apply / d y_pred.
    #[inline]
    pub fn gain(&self) -> f64 {
        match self.kind {
            CorrectionKind::Linear => self.a,
            _ => 1.0,
        }
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Record the error of prediction step `i` (1-based) and refit when `f`
    /// divides `i`. `y_pred` is the uncorrected model output.
    pub fn record_and_maybe_update(&mut self, i: usize, y_act: f64, y_pred: f64) {
        if self.kind == CorrectionKind::None {
            return;
        }
        self.buffer.push((y_act, y_pred));
        if !i.is_multiple_of(self.f) {
            return;
        }
        match self.kind {
            CorrectionKind::SingleBias => {
                self.b1 = self.buffer.iter().map(|(ya, yp)| ya - yp).sum::<f64>() / self.buffer.len() as f64;
            }
            CorrectionKind::Linear => {
                let (a, b) = fit_affine_boxed(&self.buffer, A_BOX, B_BOX);
                self.a = a;
                self.b2 = b;
            }
            CorrectionKind::None => {}
        }
        self.buffer.clear();
    }
}

/// Sum of squared residuals of `y_act ≈ a·y_pred + b`.
pub fn affine_objective(pairs: &[(f64, f64)], a: f64, b: f64) -> f64 {
    pairs.iter().map(|(ya, yp)| (a * yp + b - ya).powi(2)).sum()
}

/// Exact minimizer of [`affine_objective`] over the box `a_box × b_box`.
///
/// The objective is a convex quadratic, so the minimum is either the
/// unconstrained one or lies on an edge, where it is the clipped 1-D
/// minimizer; all candidates are compared.
pub fn fit_affine_boxed(pairs: &[(f64, f64)], a_box: (f64, f64), b_box: (f64, f64)) -> (f64, f64) {
    if pairs.is_empty() {
        return (1.0f64.clamp(a_box.0, a_box.1), 0.0f64.clamp(b_box.0, b_box.1));
    }
    let n = pairs.len() as f64;
    let sx: f64 = pairs.iter().map(|p| p.1).sum();
    let sy: f64 = pairs.iter().map(|p| p.0).sum();
    let sxx: f64 = pairs.iter().map(|p| p.1 * p.1).sum();
    let sxy: f64 = pairs.iter().map(|p| p.1 * p.0).sum();

    let best_b = |a: f64| ((sy - a * sx) / n).clamp(b_box.0, b_box.1);
    let best_a = |b: f64| {
        if sxx > 0.0 {
            ((sxy - b * sx) / sxx).clamp(a_box.0, a_box.1)
        } else {
            a_box.0.max(1.0f64.min(a_box.1))
        }
    };

    let mut candidates = Vec::with_capacity(9);
    let det = n * sxx - sx * sx;
    if det > 1e-14 * (n * sxx).max(f64::MIN_POSITIVE) {
        let a = (n * sxy - sx * sy) / det;
        let b = (sy - a * sx) / n;
        if (a_box.0..=a_box.1).contains(&a) && (b_box.0..=b_box.1).contains(&b) {
            candidates.push((a, b));
        }
    }
    for a in [a_box.0, a_box.1] {
        candidates.push((a, best_b(a)));
    }
    for b in [b_box.0, b_box.1] {
        candidates.push((best_a(b), b));
    }
    let mut best = candidates[0];
    let mut best_obj = affine_objective(pairs, best.0, best.1);
    for &c in &candidates[1..] {
        let obj = affine_objective(pairs, c.0, c.1);
        if obj < best_obj {
            best = c;
            best_obj = obj;
        }
    }
    best
}

/// Mean absolute `n`-step prediction error over every start of `data`,
/// with the correction re-initialised at each start and updated against
/// the clean output as the rollout proceeds.
pub fn evaluate_correction(
    model: &dyn StepModel,
    data: &Dataset,
    kind: CorrectionKind,
    f: usize,
    n: usize,
    exec: Execution,
) -> Result<f64> {
    let template = CorrectionState::new(kind, f, n)?;
    let p = model.window();
    if data.len() < p + n {
        return Err(Error::Length { needed: p + n, got: data.len() });
    }
    let starts: Vec<usize> = (p - 1..data.len() - n).collect();
    let sums = map_range(exec, starts.len(), |k| -> Result<f64> {
        let t = starts[k];
        let hist = History::from_dataset(data, t, p)?;
        let truth = &data.y_clean[t + 1..=t + n];
        let mut state = template.clone();
        let r = rollout(model, &hist, &data.u[t..t + n], n, Some(&mut state), Some(truth))?;
        Ok(r.predictions.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum())
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / (starts.len() * n) as f64)
}
