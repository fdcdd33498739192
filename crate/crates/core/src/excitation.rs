//! Training and validation data: pseudorandom irrigation signals, open-loop
//! plant runs with output noise, scaling, and windowing into network inputs.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::soil::{RichardsModel, SoilColumnState, WeatherSample};

/// Sample interval of every dataset [s].
pub const SAMPLE_DT: f64 = 7200.0;
/// Past (u, y) rows fed to the networks.
pub const WINDOW: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrsMode {
    /// Hold each drawn level for the drawn duration.
    #[default]
    HeldLevels,
    /// Emit the drawn level for one sample, then zero for the rest of the hold.
    Impulse,
}

/// Multi-level pseudorandom signal description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrsSpec {
    /// Irrigation rates [m/s].
    pub levels: Vec<f64>,
    pub min_hold: usize,
    pub max_hold: usize,
    pub length: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: PrsMode,
}

impl PrsSpec {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Config("PRS levels must be a nonempty list of finite rates >= 0".into()));
        }
        if self.min_hold < 1 || self.min_hold > self.max_hold {
            return Err(Error::Config(format!(
                "PRS holds must satisfy 1 <= min_hold <= max_hold, got {}..{}",
                self.min_hold, self.max_hold
            )));
        }
        if self.length == 0 {
            return Err(Error::Config("PRS length must be > 0".into()));
        }
        Ok(())
    }
}

/// Generate the input sequence described by `spec`. Deterministic in the seed.
pub fn gen_prs(spec: &PrsSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.length);
    while out.len() < spec.length {
        let level = spec.levels[rng.gen_range(0..spec.levels.len())];
        let hold = rng.gen_range(spec.min_hold..=spec.max_hold);
        for k in 0..hold {
            if out.len() == spec.length {
                break;
            }
            out.push(match spec.mode {
                PrsMode::HeldLevels => level,
                PrsMode::Impulse if k == 0 => level,
                PrsMode::Impulse => 0.0,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    #[default]
    Uniform,
    /// Gaussian with standard deviation `eps_max / 2`, truncated at `eps_max`.
    Gaussian,
}

/// Draw one noise value bounded by `eps_max` in magnitude.
pub fn draw_noise(rng: &mut impl Rng, kind: NoiseKind, eps_max: f64) -> f64 {
    if eps_max <= 0.0 {
        return 0.0;
    }
    match kind {
        NoiseKind::Uniform => rng.gen_range(-eps_max..=eps_max),
        NoiseKind::Gaussian => loop {
            // Box-Muller, rejecting draws past the bound
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            let v = 0.5 * eps_max * z;
            if v.abs() <= eps_max {
                break v;
            }
        },
    }
}

/// Open-loop trajectory sampled every [`SAMPLE_DT`] seconds.
///
/// `y_*[k]` is the output at sample `k` and `u[k]` the input held over
/// `[k, k + 1)`, so `(u[k], y[k])` is one row of a network window.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u: Vec<f64>,
    pub y_clean: Vec<f64>,
    pub y_noisy: Vec<f64>,
    pub dt: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    /// (min, max) of the clean output.
    pub fn operating_range(&self) -> (f64, f64) {
        min_max(&self.y_clean)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["t_s", "u_mps", "y_clean", "y_noisy"])?;
        for k in 0..self.len() {
            w.write_record(&[
                format!("{}", k as f64 * self.dt),
                format!("{:e}", self.u[k]),
                format!("{}", self.y_clean[k]),
                format!("{}", self.y_noisy[k]),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::MissingInput(format!("dataset {}", path.display())),
            _ => Error::Csv(e),
        })?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["t_s", "u_mps", "y_clean", "y_noisy"] {
            return Err(Error::Shape(format!(
                "{}: expected header t_s,u_mps,y_clean,y_noisy",
                path.display()
            )));
        }
        let mut t = Vec::new();
        let mut ds = Dataset {
            u: Vec::new(),
            y_clean: Vec::new(),
            y_noisy: Vec::new(),
            dt: SAMPLE_DT,
        };
        for rec in r.deserialize() {
            let (ts, u, yc, yn): (f64, f64, f64, f64) = rec?;
            t.push(ts);
            ds.u.push(u);
            ds.y_clean.push(yc);
            ds.y_noisy.push(yn);
        }
        if t.len() >= 2 {
            ds.dt = t[1] - t[0];
        }
        Ok(ds)
    }
}

pub(crate) fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSettings {
    /// `eps_max = frac * (y_max - y_min)` of the clean trajectory.
    pub frac: f64,
    #[serde(default)]
    pub kind: NoiseKind,
    pub seed: u64,
}

/// Run the plant open loop under `signal` and add bounded output noise.
pub fn simulate_dataset(
    signal: &[f64],
    plant: &RichardsModel,
    initial: &SoilColumnState,
    weather: &WeatherSample,
    noise: &NoiseSettings,
) -> Result<Dataset> {
    let mut state = initial.clone();
    let mut y_clean = Vec::with_capacity(signal.len());
    for &u in signal {
        y_clean.push(plant.measure_output(&state));
        state = plant.step(&state, u, weather, SAMPLE_DT)?;
    }
    let y_noisy = add_noise(&y_clean, noise);
    Ok(Dataset {
        u: signal.to_vec(),
        y_clean,
        y_noisy,
        dt: SAMPLE_DT,
    })
}

/// Add noise bounded by `frac * (max - min)` of `clean`.
pub fn add_noise(clean: &[f64], noise: &NoiseSettings) -> Vec<f64> {
    let (lo, hi) = min_max(clean);
    let eps_max = if clean.is_empty() { 0.0 } else { noise.frac * (hi - lo) };
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    rng.set_stream(1);
    clean
        .iter()
        .map(|&y| y + draw_noise(&mut rng, noise.kind, eps_max))
        .collect()
}

/// `scaled = (x - offset) * gain`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMap {
    pub offset: f64,
    pub gain: f64,
}

impl AffineMap {
    #[inline]
    pub fn scale(&self, x: f64) -> f64 {
        (x - self.offset) * self.gain
    }

    #[inline]
    pub fn unscale(&self, s: f64) -> f64 {
        s / self.gain + self.offset
    }
}

/// Channel scaling shared by windows and network outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSpec {
    pub u: AffineMap,
    pub y: AffineMap,
}

/// Half-width of the scaled output interval.
pub const Y_SCALED_HALF_WIDTH: f64 = 0.9;

impl ScalingSpec {
    /// `u -> u / u_max` and `[y_lo, y_hi] -> [-0.9, 0.9]`.
    pub fn from_ranges(u_max: f64, y_lo: f64, y_hi: f64) -> Result<Self> {
        if !(u_max > 0.0 && u_max.is_finite()) {
            return Err(Error::DegenerateRange(format!("u_max must be positive, got {u_max}")));
        }
        if !(y_hi > y_lo) {
            return Err(Error::DegenerateRange(format!("empty output range [{y_lo}, {y_hi}]")));
        }
        Ok(Self {
            u: AffineMap {
                offset: 0.0,
                gain: 1.0 / u_max,
            },
            y: AffineMap {
                offset: 0.5 * (y_lo + y_hi),
                gain: 2.0 * Y_SCALED_HALF_WIDTH / (y_hi - y_lo),
            },
        })
    }

    /// Input range from the data (largest rate times `headroom`), output
    /// range fixed by the caller.
    pub fn fit(dataset: &Dataset, y_range: (f64, f64), headroom: f64) -> Result<Self> {
        let u_max = dataset.u.iter().cloned().fold(0.0, f64::max) * headroom;
        Self::from_ranges(u_max, y_range.0, y_range.1)
    }

    pub fn u_max(&self) -> f64 {
        1.0 / self.u.gain
    }
}

/// Network-ready samples: `inputs` holds `len * p * 2` scaled values, time
/// major with `(u, y)` pairs; `targets` the scaled output one step ahead.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub p: usize,
    pub channels: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let w = self.p * self.channels;
        &self.inputs[i * w..(i + 1) * w]
    }

    pub fn sample_width(&self) -> usize {
        self.p * self.channels
    }

    pub fn subset(&self, idx: &[usize]) -> WindowedDataset {
        let mut out = WindowedDataset {
            p: self.p,
            channels: self.channels,
            inputs: Vec::with_capacity(idx.len() * self.sample_width()),
            targets: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            out.inputs.extend_from_slice(self.input(i));
            out.targets.push(self.targets[i]);
        }
        out
    }
}

/// Slide a window of `p` rows over `(u, y_noisy)`; the target of window `k`
/// is `y_noisy[k + p]`.
pub fn window(dataset: &Dataset, p: usize, scaler: &ScalingSpec) -> Result<WindowedDataset> {
    let n = dataset.len();
    if p == 0 || n < p + 1 {
        return Err(Error::Length { needed: p + 1, got: n });
    }
    let count = n - p;
    let mut inputs = Vec::with_capacity(count * p * 2);
    let mut targets = Vec::with_capacity(count);
    for k in 0..count {
        for j in k..k + p {
            inputs.push(scaler.u.scale(dataset.u[j]));
            inputs.push(scaler.y.scale(dataset.y_noisy[j]));
        }
        targets.push(scaler.y.scale(dataset.y_noisy[k + p]));
    }
    Ok(WindowedDataset {
        p,
        channels: 2,
        inputs,
        targets,
    })
}

/// Excitation rates that keep the output inside `band`: the gravity-drainage
/// equilibrium flux of each band edge (pulled inwards by `margin`), found by
/// bisection on the conductivity curve, spaced geometrically.
pub fn calibrate_levels(plant: &RichardsModel, band: (f64, f64), count: usize, margin: f64) -> Result<Vec<f64>> {
    let lo = plant.soil.potential_from_water_content(band.0 + margin)?;
    let hi = plant.soil.potential_from_water_content(band.1 - margin)?;
    let q_lo = plant.soil.hydraulic_conductivity(lo)?;
    let q_hi = plant.soil.hydraulic_conductivity(hi)?;
    if count < 2 {
        return Ok(vec![q_hi]);
    }
    let ratio = (q_hi / q_lo).ln();
    Ok((0..count)
        .map(|i| q_lo * (ratio * i as f64 / (count - 1) as f64).exp())
        .collect())
}

/// Metadata written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub name: String,
    pub prs: PrsSpec,
    pub noise: NoiseSettings,
    pub initial_theta: f64,
    pub scaler: ScalingSpec,
}

impl DatasetMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|_| Error::MissingInput(format!("metadata {}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
