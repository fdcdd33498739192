//! Zone-tracking MPC with an exponentially shrinking target zone.
//!
//! The slack variable of the zone constraint is eliminated analytically: its
//! optimum is the projection of the prediction onto the zone, so the tracking
//! term becomes the squared distance to the interval. The box on the scaled
//! input is handled exactly by projection.

use std::time::Instant;

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{map_range, Execution};
use crate::mismatch::CorrectionState;
use crate::soil::{IntegratorConfig, RichardsModel, SoilColumnState, WeatherSample};
use crate::surrogate::{History, StepModel};
use crate::excitation::SAMPLE_DT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZmpcConfig {
    pub q: f64,
    pub r: f64,
    pub horizon: usize,
    pub mu: f64,
    pub zone_init_lo: f64,
    pub zone_init_hi: f64,
    pub zone_term_lo: f64,
    pub zone_term_hi: f64,
    /// Irrigation rate of a scaled input of 1 [m/s].
    pub u_max_mps: f64,
    /// Extra cold starts: zero, maximum, then random inputs.
    pub restarts: usize,
    pub iters: usize,
    /// Admissible output set; leaving it costs `output_penalty · q · dist²`.
    pub output_lo: f64,
    pub output_hi: f64,
    pub output_penalty: f64,
    /// Relative objective decrease below which the descent stops.
    pub tol: f64,
    /// Fixed sub-step of the Richards prediction model [s].
    pub richards_substep: f64,
    pub warm_start: bool,
}

impl Default for ZmpcConfig {
    fn default() -> Self {
        Self {
            q: 4000.0,
            r: 100.0,
            horizon: 20,
            mu: 0.0,
            zone_init_lo: 0.18,
            zone_init_hi: 0.23,
            zone_term_lo: 0.20,
            zone_term_hi: 0.21,
            u_max_mps: 1e-6,
            restarts: 3,
            iters: 500,
            output_lo: 0.12,
            output_hi: 0.40,
            output_penalty: 100.0,
            tol: 1e-9,
            richards_substep: 1800.0,
            warm_start: true,
        }
    }
}

impl ZmpcConfig {
    pub fn validate(&self) -> Result<()> {
        self.zone().validate()?;
        let ok = self.q >= 0.0
            && self.r >= 0.0
            && self.horizon >= 1
            && self.u_max_mps > 0.0
            && self.iters >= 1
            && self.output_lo < self.output_hi
            && self.output_penalty >= 0.0
            && self.tol >= 0.0
            && self.richards_substep > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid zmpc settings: {self:?}")))
        }
    }

    pub fn zone(&self) -> ZoneSpec {
        ZoneSpec {
            y_lo_init: self.zone_init_lo,
            y_hi_init: self.zone_init_hi,
            y_lo_term: self.zone_term_lo,
            y_hi_term: self.zone_term_hi,
            mu: self.mu,
            horizon: self.horizon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZoneSpec {
    pub y_lo_init: f64,
    pub y_hi_init: f64,
    pub y_lo_term: f64,
    pub y_hi_term: f64,
    pub mu: f64,
    pub horizon: usize,
}

impl ZoneSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.y_lo_init <= self.y_hi_init
            && self.y_lo_term <= self.y_hi_term
            && self.y_lo_init <= self.y_lo_term
            && self.y_hi_term <= self.y_hi_init
            && self.mu >= 0.0
            && self.horizon >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "zone must satisfy lo_init <= lo_term <= hi_term <= hi_init and mu >= 0, got {self:?}"
            )))
        }
    }
}

/// Zone `offset` steps after the current time.
pub fn zone_bounds(offset: usize, zone: &ZoneSpec) -> (f64, f64) {
    let x = zone.mu * offset as f64 / zone.horizon as f64;
    let lo = (zone.y_lo_init * x.exp()).min(zone.y_lo_term);
    let hi = (zone.y_hi_init * (-x).exp()).max(zone.y_hi_term);
    (lo, hi)
}

/// Signed distance outside `[lo, hi]` (0 inside).
#[inline]
pub fn interval_excess(y: f64, lo: f64, hi: f64) -> f64 {
    if y < lo {
        y - lo
    } else if y > hi {
        y - hi
    } else {
        0.0
    }
}

/// `Q·dist(ŷ, zone)² + R·u²` for a prediction `offset` steps ahead.
pub fn stage_cost(y: f64, offset: usize, u_scaled: f64, zone: &ZoneSpec, q: f64, r: f64) -> f64 {
    let (lo, hi) = zone_bounds(offset, zone);
    let d = interval_excess(y, lo, hi);
    q * d * d + r * u_scaled * u_scaled
}

/// Predicts the output after each of `N` effective surface inputs [m/s].
pub trait HorizonModel: Sync {
    fn horizon_predict(&self, u_eff: &[f64]) -> Result<Vec<f64>>;

    /// Predictions and `Σ_k w_k ∂ŷ_k/∂u_eff` where `w = weights(ŷ)`.
    fn horizon_vjp(&self, u_eff: &[f64], weights: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Network rollout from a measured history with a frozen correction.
pub struct NnHorizon<'a> {
    pub model: &'a dyn StepModel,
    pub history: &'a History,
    pub correction: &'a CorrectionState,
}

impl NnHorizon<'_> {
    fn check(&self, n: usize) -> Result<usize> {
        let p = self.model.window();
        if self.history.y.len() != p || self.history.u.len() + 1 != p {
            return Err(Error::Shape(format!("controller history must hold {p} outputs")));
        }
        if n == 0 {
            return Err(Error::Length { needed: 1, got: 0 });
        }
        Ok(p)
    }
}

impl HorizonModel for NnHorizon<'_> {
    fn horizon_predict(&self, u_eff: &[f64]) -> Result<Vec<f64>> {
        let p = self.check(u_eff.len())?;
        let (lo, hi) = self.model.clip_bounds();
        let mut u = self.history.u.clone();
        u.extend_from_slice(u_eff);
        let mut y = self.history.y.clone();
        let mut out = Vec::with_capacity(u_eff.len());
        for k in 0..u_eff.len() {
            let raw = self.model.predict(&u[k..k + p], &y[k..k + p])?;
            let v = self.correction.apply(raw).clamp(lo, hi);
            y.push(v);
            out.push(v);
        }
        Ok(out)
    }

    fn horizon_vjp(&self, u_eff: &[f64], weights: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let p = self.check(u_eff.len())?;
        let n = u_eff.len();
        let (lo, hi) = self.model.clip_bounds();
        let gain = self.correction.gain();
        let mut u = self.history.u.clone();
        u.extend_from_slice(u_eff);
        let mut y = self.history.y.clone();
        let mut local = Vec::with_capacity(n);
        let mut steps = Vec::with_capacity(n);
        for k in 0..n {
            let (raw, du, dy) = self.model.predict_with_gradient(&u[k..k + p], &y[k..k + p])?;
            let c = self.correction.apply(raw);
            let inside = (lo..=hi).contains(&c);
            y.push(c.clamp(lo, hi));
            local.push(if inside { gain } else { 0.0 });
            steps.push((du, dy));
        }
        let preds = y[p..].to_vec();
        let w = weights(&preds);
        // adjoints of every history entry; predictions sit at y[p + k]
        let mut lam_y = vec![0.0; p + n];
        let mut lam_u = vec![0.0; p - 1 + n];
        lam_y[p..].copy_from_slice(&w);
        for k in (0..n).rev() {
            let a = lam_y[p + k] * local[k];
            if a == 0.0 {
                continue;
            }
            let (du, dy) = &steps[k];
            for j in 0..p {
                lam_u[k + j] += a * du[j];
                lam_y[k + j] += a * dy[j];
            }
        }
        Ok((preds, lam_u[p - 1..].to_vec()))
    }
}

/// The discretized Richards equation as prediction model, started from the
/// full column state; gradients by forward finite differences that reuse the
/// nominal trajectory up to the perturbed step.
pub struct RichardsHorizon<'a> {
    pub model: RichardsModel,
    pub state: &'a SoilColumnState,
    /// ET forcing per step (precipitation is part of `u_eff`).
    pub weather: &'a [WeatherSample],
    pub fd_step: f64,
}

impl<'a> RichardsHorizon<'a> {
    pub fn new(plant: &RichardsModel, state: &'a SoilColumnState, weather: &'a [WeatherSample], substep: f64, fd_step: f64) -> Self {
        let integrator = IntegratorConfig {
            newton_tol: 1e-11,
            ..IntegratorConfig::fixed(substep)
        };
        Self {
            model: plant.with_integrator(integrator),
            state,
            weather,
            fd_step,
        }
    }

    fn trajectory(&self, start: &SoilColumnState, from: usize, u_eff: &[f64], keep_states: bool) -> Result<(Vec<f64>, Vec<SoilColumnState>)> {
        let mut s = start.clone();
        let mut ys = Vec::with_capacity(u_eff.len() - from);
        let mut states = Vec::new();
        for k in from..u_eff.len() {
            if keep_states {
                states.push(s.clone());
            }
            let w = self.weather.get(k).copied().unwrap_or_else(WeatherSample::dry);
            let w = WeatherSample { precipitation: 0.0, ..w };
            s = self.model.step(&s, u_eff[k], &w, SAMPLE_DT)?;
            ys.push(self.model.measure_output(&s));
        }
        Ok((ys, states))
    }
}

impl HorizonModel for RichardsHorizon<'_> {
    fn horizon_predict(&self, u_eff: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trajectory(self.state, 0, u_eff, false)?.0)
    }

    fn horizon_vjp(&self, u_eff: &[f64], weights: &dyn Fn(&[f64]) -> Vec<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = u_eff.len();
        let (base, states) = self.trajectory(self.state, 0, u_eff, true)?;
        let w = weights(&base);
        let mut grad = vec![0.0; n];
        for j in 0..n {
            if w[j..].iter().all(|&v| v == 0.0) {
                continue;
            }
            let mut pert = u_eff.to_vec();
            pert[j] += self.fd_step;
            let (ys, _) = self.trajectory(&states[j], j, &pert, false)?;
            grad[j] = ys
                .iter()
                .zip(&base[j..])
                .zip(&w[j..])
                .map(|((a, b), wk)| wk * (a - b) / self.fd_step)
                .sum();
        }
        Ok((base, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OcpSolution {
    /// Scaled inputs in `[0, 1]`.
    pub u: Vec<f64>,
    pub predicted: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// Starting points tried (warm start included).
    pub candidates: usize,
    /// Index of the winning start.
    pub best_candidate: usize,
    pub converged: bool,
    /// Objective after every iteration of the winning start.
    pub trace: Vec<f64>,
    pub solve_seconds: f64,
}

/// The optimal-control problem at one sampling instant.
pub struct Ocp<'a> {
    pub model: &'a dyn HorizonModel,
    /// Forecast precipitation per step [m/s].
    pub precipitation: &'a [f64],
    pub cfg: &'a ZmpcConfig,
}

impl Ocp<'_> {
    fn n(&self) -> usize {
        self.cfg.horizon
    }

    fn effective(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(k, &v)| v * self.cfg.u_max_mps + self.precipitation.get(k).copied().unwrap_or(0.0))
            .collect()
    }

    fn output_cost(&self, y: &[f64], u: &[f64]) -> f64 {
        let zone = self.cfg.zone();
        let qy = self.cfg.output_penalty * self.cfg.q;
        let mut j = 0.0;
        for k in 0..y.len() {
            // prediction k is k + 1 steps ahead
            j += stage_cost(y[k], k + 1, u[k], &zone, self.cfg.q, self.cfg.r);
            let e = interval_excess(y[k], self.cfg.output_lo, self.cfg.output_hi);
            j += qy * e * e;
        }
        j
    }

    fn output_weights(&self, y: &[f64]) -> Vec<f64> {
        let zone = self.cfg.zone();
        let qy = self.cfg.output_penalty * self.cfg.q;
        y.iter()
            .enumerate()
            .map(|(k, &v)| {
                let (lo, hi) = zone_bounds(k + 1, &zone);
                2.0 * self.cfg.q * interval_excess(v, lo, hi)
                    + 2.0 * qy * interval_excess(v, self.cfg.output_lo, self.cfg.output_hi)
            })
            .collect()
    }

    pub fn objective(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let y = self.model.horizon_predict(&self.effective(u))?;
        Ok((self.output_cost(&y, u), y))
    }

    /// Objective, predictions and gradient with respect to the scaled inputs.
    pub fn objective_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let weights = |y: &[f64]| self.output_weights(y);
        let (y, g_eff) = self.model.horizon_vjp(&self.effective(u), &weights)?;
        let grad = u
            .iter()
            .zip(&g_eff)
            .map(|(&v, &g)| 2.0 * self.cfg.r * v + self.cfg.u_max_mps * g)
            .collect();
        Ok((self.output_cost(&y, u), y, grad))
    }

    /// Projected gradient descent from `x0` with Barzilai–Borwein steps and
    /// Armijo backtracking along the projection arc.
    pub fn descend(&self, x0: &[f64]) -> Result<Descent> {
        let n = self.n();
        let mut x: Vec<f64> = x0.iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (mut f, mut y, mut g) = self.objective_and_gradient(&x)?;
        let mut trace = Vec::with_capacity(self.cfg.iters);
        let mut step = initial_step(&g);
        let mut converged = false;
        let mut iterations = 0;
        let mut stalled = 0;
        for _ in 0..self.cfg.iters {
            iterations += 1;
            let pg_norm = x
                .iter()
                .zip(&g)
                .map(|(xi, gi)| (xi - (xi - gi).clamp(0.0, 1.0)).abs())
                .fold(0.0, f64::max);
            if pg_norm <= 1e-12 {
                converged = true;
                trace.push(f);
                break;
            }
            let mut alpha = step;
            let mut accepted = None;
            for _ in 0..40 {
                let xn: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| (xi - alpha * gi).clamp(0.0, 1.0)).collect();
                let decrease: f64 = x.iter().zip(&xn).zip(&g).map(|((a, b), gi)| gi * (a - b)).sum();
                let (fn_, _) = self.objective(&xn)?;
                if fn_ <= f - 1e-4 * decrease {
                    accepted = Some(xn);
                    break;
                }
                alpha *= 0.5;
            }
            let Some(xn) = accepted else {
                converged = true;
                trace.push(f);
                break;
            };
            let (fn_, yn, gn) = self.objective_and_gradient(&xn)?;
            let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(gn.iter().zip(&g)).map(|(si, (a, b))| si * (a - b)).sum();
            let ss: f64 = s.iter().map(|v| v * v).sum();
            step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e6) } else { (alpha * 4.0).min(1e6) };
            let rel = (f - fn_) / f.abs().max(1e-12);
            x = xn;
            f = fn_;
            y = yn;
            g = gn;
            trace.push(f);
            if rel <= self.cfg.tol {
                stalled += 1;
                if stalled >= 3 {
                    converged = true;
                    break;
                }
            } else {
                stalled = 0;
            }
        }
        debug_assert_eq!(x.len(), n);
        Ok(Descent {
            u: x,
            predicted: y,
            objective: f,
            iterations,
            converged,
            trace,
        })
    }

    /// Best of the warm start (if any) and the configured cold starts.
    pub fn solve(&self, warm: Option<&[f64]>, seed: u64, exec: Execution) -> Result<OcpSolution> {
        let n = self.n();
        if self.precipitation.len() < n {
            return Err(Error::Length {
                needed: n,
                got: self.precipitation.len(),
            });
        }
        let started = Instant::now();
        let mut starts: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = warm {
            if w.len() != n {
                return Err(Error::Shape(format!("warm start has {} inputs, horizon is {n}", w.len())));
            }
            starts.push(w.to_vec());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for r in 0..self.cfg.restarts {
            starts.push(match r {
                0 => vec![0.0; n],
                1 => vec![1.0; n],
                _ => (0..n).map(|_| rng.gen::<f64>()).collect(),
            });
        }
        if starts.is_empty() {
            starts.push(vec![0.0; n]);
        }
        let runs = map_range(exec, starts.len(), |i| self.descend(&starts[i]));
        let mut best: Option<(usize, Descent)> = None;
        let mut iterations = 0;
        for (i, run) in runs.into_iter().enumerate() {
            let run = run?;
            iterations += run.iterations;
            // strict improvement only: lowest index wins ties
            if best.as_ref().is_none_or(|(_, b)| run.objective < b.objective) {
                best = Some((i, run));
            }
        }
        let (idx, d) = best.expect("at least one start");
        debug!("ocp: objective {:.6e} from start {idx} after {iterations} iterations", d.objective);
        Ok(OcpSolution {
            u: d.u,
            predicted: d.predicted,
            objective: d.objective,
            iterations,
            candidates: starts.len(),
            best_candidate: idx,
            converged: d.converged,
            trace: d.trace,
            solve_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub u: Vec<f64>,
    pub predicted: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

fn initial_step(g: &[f64]) -> f64 {
    let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if gmax > 0.0 {
        (0.1 / gmax).min(1e6)
    } else {
        1.0
    }
}

/// Previous plan moved one step forward, repeating its last element.
pub fn shift_warm_start(u: &[f64]) -> Vec<f64> {
    let mut w = u[1..].to_vec();
    w.push(*u.last().unwrap_or(&0.0));
    w
}

/// Receding-horizon controller over a learned model. It keeps the `(u, y)`
/// history, the online correction and the previous plan.
#[derive(Debug, Clone)]
pub struct NnController {
    pub cfg: ZmpcConfig,
    pub history: History,
    pub correction: CorrectionState,
    warm: Option<Vec<f64>>,
    /// Effective input applied last and the raw one-step prediction for it.
    pending: Option<(f64, f64)>,
    step: usize,
    seed: u64,
}

impl NnController {
    /// History filled with zero input at the first measurement `y0`.
    pub fn new(cfg: ZmpcConfig, p: usize, y0: f64, correction: CorrectionState, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            history: History::constant(p, y0),
            correction,
            warm: None,
            pending: None,
            step: 0,
            seed,
        })
    }

    /// Solve at the new measurement and return the irrigation rate [m/s].
    /// `precipitation[0]` is the forecast for the interval about to start.
    pub fn receding_step(&mut self, model: &dyn StepModel, y_meas: f64, precipitation: &[f64]) -> Result<(f64, OcpSolution)> {
        if let Some((u_eff, raw)) = self.pending.take() {
            self.history.push(u_eff, y_meas);
            self.correction.record_and_maybe_update(self.step, y_meas, raw);
        } else {
            let last = self.history.y.len() - 1;
            self.history.y[last] = y_meas;
        }
        self.step += 1;
        let horizon = NnHorizon {
            model,
            history: &self.history,
            correction: &self.correction,
        };
        let ocp = Ocp {
            model: &horizon,
            precipitation,
            cfg: &self.cfg,
        };
        let warm = if self.cfg.warm_start { self.warm.as_deref() } else { None };
        let seed = self.seed.wrapping_add(self.step as u64);
        let sol = ocp.solve(warm, seed, Execution::Sequential)?;
        let u = sol.u[0] * self.cfg.u_max_mps;
        let u_eff = u + precipitation[0];
        let mut uu = self.history.u.clone();
        uu.push(u_eff);
        let raw = model.predict(&uu, &self.history.y)?;
        self.pending = Some((u_eff, raw));
        self.warm = Some(shift_warm_start(&sol.u));
        Ok((u, sol))
    }
}

/// Receding-horizon controller over the Richards model with full state.
#[derive(Debug, Clone)]
pub struct RichardsController {
    pub cfg: ZmpcConfig,
    pub model: RichardsModel,
    warm: Option<Vec<f64>>,
    step: usize,
    seed: u64,
}

impl RichardsController {
    pub fn new(cfg: ZmpcConfig, model: RichardsModel, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            model,
            warm: None,
            step: 0,
            seed,
        })
    }

    pub fn receding_step(&mut self, state: &SoilColumnState, forecast: &[WeatherSample]) -> Result<(f64, OcpSolution)> {
        self.step += 1;
        let horizon = RichardsHorizon::new(&self.model, state, forecast, self.cfg.richards_substep, 1e-3 * self.cfg.u_max_mps);
        let precipitation: Vec<f64> = forecast.iter().map(|w| w.precipitation).collect();
        let ocp = Ocp {
            model: &horizon,
            precipitation: &precipitation,
            cfg: &self.cfg,
        };
        let warm = if self.cfg.warm_start { self.warm.as_deref() } else { None };
        let sol = ocp.solve(warm, self.seed.wrapping_add(self.step as u64), Execution::Sequential)?;
        self.warm = Some(shift_warm_start(&sol.u));
        Ok((sol.u[0] * self.cfg.u_max_mps, sol))
    }
}
