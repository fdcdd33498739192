//! Plant-in-the-loop experiments: the Richards column driven by a zone MPC,
//! with process and measurement noise, forecast errors and the scenario
//! battery built on top.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::excitation::{draw_noise, NoiseKind, SAMPLE_DT};
use crate::exec::{map_slice, Execution};
use crate::mismatch::CorrectionState;
use crate::soil::{RichardsModel, SoilColumnState, WeatherSample};
use crate::surrogate::{percent_diff, StepModel};
use crate::zmpc::{interval_excess, zone_bounds, NnController, RichardsController, ZmpcConfig};

/// Zone every run is scored against, whatever its controller uses.
pub const BASE_ZONE: (f64, f64) = (0.18, 0.23);

/// RNG streams of one seed; separate streams keep draws aligned across
/// configurations that consume different amounts of randomness.
const STREAM_PROCESS: u64 = 1;
const STREAM_MEASUREMENT: u64 = 2;
const STREAM_FORECAST: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub process_frac: f64,
    pub measurement_frac: f64,
    pub kind: NoiseKind,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.process_frac >= 0.0 && self.measurement_frac >= 0.0) {
            return Err(Error::Config(format!("noise fractions must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// True weather and the forecast the controller sees, both covering the
/// run plus one prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherScenario {
    pub truth: Vec<WeatherSample>,
    pub forecast: Vec<WeatherSample>,
}

impl WeatherScenario {
    pub fn new(truth: Vec<WeatherSample>, error_frac: f64, seed: u64) -> Self {
        let forecast = make_forecast(&truth, error_frac, seed);
        Self { truth, forecast }
    }

    pub fn perfect(truth: Vec<WeatherSample>) -> Self {
        Self {
            forecast: truth.clone(),
            truth,
        }
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Steps of the committed rain events.
pub const RAIN_STEPS: [std::ops::RangeInclusive<usize>; 2] = [18..=22, 40..=43];
const RAIN_PEAK: f64 = 6e-7;
const ET0_PEAK: f64 = 5e-8;

/// Diurnal reference ET (zero at night) with optional rain events.
pub fn default_weather(len: usize, rain: bool) -> Vec<WeatherSample> {
    (0..len)
        .map(|k| {
            let hour = (k as f64 * SAMPLE_DT / 3600.0 + 1.0) % 24.0;
            let et0 = ET0_PEAK * ((hour - 6.0) / 12.0 * std::f64::consts::PI).sin().max(0.0);
            let mut precipitation = 0.0;
            if rain {
                for ev in &RAIN_STEPS {
                    if ev.contains(&k) {
                        // half-sine burst over the event
                        let n = (ev.end() - ev.start() + 2) as f64;
                        let x = (k - ev.start() + 1) as f64 / n;
                        precipitation = RAIN_PEAK * (x * std::f64::consts::PI).sin();
                    }
                }
            }
            WeatherSample {
                precipitation,
                et0,
                kc: 1.0,
            }
        })
        .collect()
}

/// Per-sample multiplicative forecast error, uniform in `1 ± error_frac`.
pub fn make_forecast(truth: &[WeatherSample], error_frac: f64, seed: u64) -> Vec<WeatherSample> {
    let mut rng = stream(seed, STREAM_FORECAST);
    truth
        .iter()
        .map(|w| {
            let mut f = *w;
            if error_frac > 0.0 {
                let ep: f64 = rng.gen_range(-error_frac..=error_frac);
                let ee: f64 = rng.gen_range(-error_frac..=error_frac);
                f.precipitation = (w.precipitation * (1.0 + ep)).max(0.0);
                f.et0 = (w.et0 * (1.0 + ee)).max(0.0);
            }
            f
        })
        .collect()
}

pub const WEATHER_HEADER: [&str; 4] = ["t_s", "P_mps", "ET0_mps", "Kc"];

pub fn write_weather_csv(path: &Path, weather: &[WeatherSample], dt: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::from)?;
    w.write_record(WEATHER_HEADER)?;
    for (k, s) in weather.iter().enumerate() {
        w.write_record(&[
            format!("{}", k as f64 * dt),
            format!("{:e}", s.precipitation),
            format!("{:e}", s.et0),
            format!("{}", s.kc),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_weather_csv(path: &Path) -> Result<Vec<WeatherSample>> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("weather file {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut cols = [0usize; 4];
    for (i, name) in WEATHER_HEADER.iter().enumerate() {
        cols[i] = headers
            .iter()
            .position(|h| h.trim() == *name)
            .ok_or_else(|| Error::Shape(format!("{}: missing column '{name}'", path.display())))?;
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<f64> {
            let s = rec.get(cols[i]).unwrap_or("");
            s.trim()
                .parse()
                .map_err(|_| Error::Shape(format!("{}: bad value '{s}' in column {}", path.display(), WEATHER_HEADER[i])))
        };
        let s = WeatherSample {
            precipitation: get(1)?,
            et0: get(2)?,
            kc: get(3)?,
        };
        s.validate()?;
        out.push(s);
    }
    Ok(out)
}

/// `I_T = Σ u·Δ·1000` [mm].
pub fn total_irrigation(u: &[f64], dt: f64) -> f64 {
    u.iter().map(|v| v * dt * 1000.0).sum()
}

/// Mean distance of the trajectory to `zone`.
pub fn zone_violation(y: &[f64], zone: (f64, f64)) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    y.iter().map(|&v| interval_excess(v, zone.0, zone.1).abs()).sum::<f64>() / y.len() as f64
}

/// Which model the controller optimizes over.
#[derive(Clone)]
pub enum ControllerSpec<'a> {
    Richards(RichardsModel),
    Learned {
        model: &'a dyn StepModel,
        correction: CorrectionState,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub label: String,
    pub n_sim: usize,
    pub dt: f64,
    pub initial_h: f64,
    pub zmpc: ZmpcConfig,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl RunConfig {
    pub fn new(label: &str, zmpc: ZmpcConfig) -> Self {
        Self {
            label: label.to_string(),
            n_sim: 60,
            dt: SAMPLE_DT,
            initial_h: -0.2,
            zmpc,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }

    /// Weather samples the run reads (the run plus one horizon).
    pub fn weather_len(&self) -> usize {
        self.n_sim + self.zmpc.horizon
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub t_s: f64,
    pub u_mps: f64,
    pub y_true: f64,
    pub y_meas: f64,
    pub zone_lo: f64,
    pub zone_hi: f64,
    pub p_mps: f64,
    pub et0_mps: f64,
    pub objective: f64,
    pub iterations: usize,
    pub solve_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub label: String,
    pub total_irrigation_mm: f64,
    pub zone_violation: f64,
    pub mean_solve_seconds: f64,
    pub steps: Vec<StepLog>,
    /// Output after the last step.
    pub y_final: f64,
    /// Largest per-step plant water-balance residual relative to the gross
    /// boundary flux (noise injection excluded).
    pub max_balance_error: f64,
    pub failure: Option<String>,
}

impl RunMetrics {
    pub fn u(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.u_mps).collect()
    }

    /// Outputs the control produced, `y(1..=n)`.
    pub fn controlled_outputs(&self) -> Vec<f64> {
        let mut y: Vec<f64> = self.steps.iter().skip(1).map(|s| s.y_true).collect();
        if !self.steps.is_empty() {
            y.push(self.y_final);
        }
        y
    }

    pub fn write_trajectory(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t_s", "u_mps", "y_true", "y_meas", "zone_lo", "zone_hi", "P_mps", "ET0_mps"])?;
        for s in &self.steps {
            w.write_record(&[
                format!("{}", s.t_s),
                format!("{:e}", s.u_mps),
                format!("{}", s.y_true),
                format!("{}", s.y_meas),
                format!("{}", s.zone_lo),
                format!("{}", s.zone_hi),
                format!("{:e}", s.p_mps),
                format!("{:e}", s.et0_mps),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_metrics(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["label", "I_T_mm", "zone_violation", "mean_solve_s", "max_balance_error", "status"])?;
        w.write_record(&[
            self.label.clone(),
            format!("{}", self.total_irrigation_mm),
            format!("{}", self.zone_violation),
            format!("{}", self.mean_solve_seconds),
            format!("{:e}", self.max_balance_error),
            self.failure.clone().unwrap_or_else(|| "ok".into()),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

enum Driver<'a> {
    Richards(RichardsController),
    Learned(&'a dyn StepModel, NnController),
}

/// Simulate `cfg.n_sim` control intervals. A plant failure stops the run
/// and is reported in `failure` with the steps completed so far.
pub fn run_closed_loop(plant: &RichardsModel, cfg: &RunConfig, controller: ControllerSpec<'_>, weather: &WeatherScenario) -> Result<RunMetrics> {
    cfg.noise.validate()?;
    cfg.zmpc.validate()?;
    if cfg.n_sim == 0 {
        return Err(Error::Config("n_sim must be >= 1".into()));
    }
    if weather.truth.len() < cfg.weather_len() || weather.forecast.len() < cfg.weather_len() {
        return Err(Error::Length {
            needed: cfg.weather_len(),
            got: weather.truth.len().min(weather.forecast.len()),
        });
    }
    let mut proc_rng = stream(cfg.seed, STREAM_PROCESS);
    let mut meas_rng = stream(cfg.seed, STREAM_MEASUREMENT);
    let mut state = SoilColumnState::uniform(cfg.initial_h, plant.n_nodes());
    let y0 = plant.measure_output(&state);
    let n = cfg.zmpc.horizon;
    let mut driver = match controller {
        ControllerSpec::Richards(model) => Driver::Richards(RichardsController::new(cfg.zmpc, model, cfg.seed)?),
        ControllerSpec::Learned { model, correction } => Driver::Learned(
            model,
            NnController::new(cfg.zmpc, model.window(), y0, correction, cfg.seed)?,
        ),
    };
    let (zone_lo, zone_hi) = zone_bounds(0, &cfg.zmpc.zone());
    let root = plant.geometry.root_node_index();
    let mut steps = Vec::with_capacity(cfg.n_sim);
    let mut max_balance_error: f64 = 0.0;
    let mut failure = None;
    for k in 0..cfg.n_sim {
        let y_true = plant.measure_output(&state);
        let y_meas = y_true * (1.0 + draw_noise(&mut meas_rng, cfg.noise.kind, cfg.noise.measurement_frac));
        let process = draw_noise(&mut proc_rng, cfg.noise.kind, cfg.noise.process_frac);
        let forecast = &weather.forecast[k..k + n];
        let started = Instant::now();
        let solved = match &mut driver {
            Driver::Richards(c) => c.receding_step(&state, forecast),
            Driver::Learned(model, c) => {
                let p: Vec<f64> = forecast.iter().map(|w| w.precipitation).collect();
                c.receding_step(*model, y_meas, &p)
            }
        };
        let (u, sol) = match solved {
            Ok(v) => v,
            Err(e) => {
                failure = Some(format!("step {k}: controller failed: {e}"));
                break;
            }
        };
        let solve_seconds = started.elapsed().as_secs_f64();
        let truth = weather.truth[k];
        steps.push(StepLog {
            t_s: k as f64 * cfg.dt,
            u_mps: u,
            y_true,
            y_meas,
            zone_lo,
            zone_hi,
            p_mps: truth.precipitation,
            et0_mps: truth.et0,
            objective: sol.objective,
            iterations: sol.iterations,
            solve_seconds,
        });
        let storage_before = plant.storage(&state);
        match plant.step_with_report(&state, u, &truth, cfg.dt) {
            Ok((next, report)) => {
                let residual = plant.storage(&next) - storage_before - report.fluxes.net();
                let scale = report.fluxes.gross().max(1e-12);
                max_balance_error = max_balance_error.max(residual.abs() / scale);
                state = next;
            }
            Err(e) => {
                failure = Some(format!("step {k}: plant integration failed: {e}"));
                break;
            }
        }
        if process != 0.0 {
            let theta = plant.soil.theta_unchecked(state.h[root]) * (1.0 + process);
            let theta = theta.clamp(plant.soil.theta_r + 1e-6, plant.soil.theta_s - 1e-9);
            state.h[root] = plant.soil.potential_from_water_content(theta)?;
        }
    }
    if let Some(f) = &failure {
        warn!("{}: {f}", cfg.label);
    }
    let u: Vec<f64> = steps.iter().map(|s| s.u_mps).collect();
    let mut metrics = RunMetrics {
        label: cfg.label.clone(),
        total_irrigation_mm: total_irrigation(&u, cfg.dt),
        zone_violation: 0.0,
        mean_solve_seconds: if steps.is_empty() {
            0.0
        } else {
            steps.iter().map(|s| s.solve_seconds).sum::<f64>() / steps.len() as f64
        },
        steps,
        y_final: plant.measure_output(&state),
        max_balance_error,
        failure,
    };
    metrics.zone_violation = zone_violation(&metrics.controlled_outputs(), BASE_ZONE);
    info!(
        "{}: I_T {:.2} mm, violation {:.3e}, mean solve {:.3} s",
        metrics.label, metrics.total_irrigation_mm, metrics.zone_violation, metrics.mean_solve_seconds
    );
    Ok(metrics)
}

/// One battery entry: a run and the controller it uses.
pub struct BatteryEntry<'a> {
    pub config: RunConfig,
    pub controller: ControllerSpec<'a>,
    pub weather: WeatherScenario,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryRow {
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub mu: f64,
    pub zone_term_lo: f64,
    pub zone_term_hi: f64,
    pub total_irrigation_mm: f64,
    pub zone_violation: f64,
    pub mean_solve_seconds: f64,
    /// `(I_bench - I) / I_bench · 100`.
    pub irrigation_diff_pct: f64,
    /// `(v_bench - v) / v_bench · 100`, positive for a reduction.
    pub violation_reduction_pct: f64,
    pub status: String,
}

/// Run every entry (in parallel when allowed) and compare against the row
/// at `benchmark`. Failed runs are kept with their status.
pub fn scenario_battery(plant: &RichardsModel, entries: &[BatteryEntry<'_>], benchmark: usize, exec: Execution) -> Result<Vec<(BatteryRow, Option<RunMetrics>)>> {
    if benchmark >= entries.len() {
        return Err(Error::MissingInput("battery has no benchmark entry".into()));
    }
    let results = map_slice(exec, entries, |e| {
        let run = run_closed_loop(plant, &e.config, e.controller.clone(), &e.weather);
        (e.config.clone(), e.config_hash.clone(), run)
    });
    let bench = match &results[benchmark].2 {
        Ok(m) if m.failure.is_none() => Some((m.total_irrigation_mm, m.zone_violation)),
        _ => None,
    };
    let mut out = Vec::with_capacity(results.len());
    for (cfg, hash, run) in results {
        let mut row = BatteryRow {
            label: cfg.label.clone(),
            config_hash: hash,
            seed: cfg.seed,
            mu: cfg.zmpc.mu,
            zone_term_lo: cfg.zmpc.zone_term_lo,
            zone_term_hi: cfg.zmpc.zone_term_hi,
            total_irrigation_mm: f64::NAN,
            zone_violation: f64::NAN,
            mean_solve_seconds: f64::NAN,
            irrigation_diff_pct: f64::NAN,
            violation_reduction_pct: f64::NAN,
            status: "ok".into(),
        };
        let metrics = match run {
            Ok(m) => {
                row.total_irrigation_mm = m.total_irrigation_mm;
                row.zone_violation = m.zone_violation;
                row.mean_solve_seconds = m.mean_solve_seconds;
                if let Some(f) = &m.failure {
                    row.status = f.clone();
                }
                if let Some((bi, bv)) = bench {
                    if bi != 0.0 {
                        row.irrigation_diff_pct = percent_diff(bi, m.total_irrigation_mm);
                    }
                    if bv != 0.0 {
                        row.violation_reduction_pct = percent_diff(bv, m.zone_violation);
                    }
                }
                Some(m)
            }
            Err(e) => {
                row.status = format!("error: {e}");
                None
            }
        };
        out.push((row, metrics));
    }
    Ok(out)
}

pub fn write_battery_csv(path: &Path, rows: &[BatteryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_battery_csv(path: &Path) -> Result<Vec<BatteryRow>> {
    if !path.exists() {
        return Err(Error::MissingInput(format!("battery report {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec?);
    }
    Ok(rows)
}

/// Markdown table of a battery report.
pub fn battery_markdown(rows: &[BatteryRow]) -> String {
    let mut s = String::from("| run | μ | I_T [mm] | ΔI_T [%] | zone violation | reduction [%] | mean solve [s] | status |\n|---|---|---|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {} | {:.2} | {:.1} | {:.3e} | {:.1} | {:.3} | {} |\n",
            r.label, r.mu, r.total_irrigation_mm, r.irrigation_diff_pct, r.zone_violation, r.violation_reduction_pct, r.mean_solve_seconds, r.status
        ));
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
