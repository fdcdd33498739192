//! Pipeline configuration: one TOML file with the sections `soil`,
//! `geometry`, `excitation`, `train`, `surrogate`, `mismatch`, `zmpc` and
//! `run`. Every section must be present (it may be empty to take the
//! defaults); unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::excitation::{calibrate_levels, NoiseKind, PrsMode};
use crate::mismatch::CorrectionKind;
use crate::nn::{Activation, TrainConfig};
use crate::soil::{ColumnGeometry, RichardsModel, SoilParams};
use crate::zmpc::ZmpcConfig;

pub const SECTIONS: [&str; 8] = ["soil", "geometry", "excitation", "train", "surrogate", "mismatch", "zmpc", "run"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[derive(Default)]
pub struct PipelineConfig {
    pub soil: SoilParams,
    pub geometry: ColumnGeometry,
    pub excitation: ExcitationConfig,
    pub train: TrainConfig,
    pub surrogate: SurrogateConfig,
    pub mismatch: MismatchConfig,
    pub zmpc: ZmpcConfig,
    pub run: RunSettings,
}


/// Excitation amplitudes: an explicit list, a geometric ladder, or the
/// equilibrium fluxes spanning an output band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LevelSpec {
    Explicit(Vec<f64>),
    Geometric { from: f64, to: f64, count: usize },
    Calibrated { band: (f64, f64), count: usize, margin: f64 },
}

impl LevelSpec {
    pub fn resolve(&self, plant: &RichardsModel) -> Result<Vec<f64>> {
        match self {
            LevelSpec::Explicit(v) => Ok(v.clone()),
            LevelSpec::Geometric { from, to, count } => {
                if *count == 0 || !(*from > 0.0 && *to >= *from) {
                    return Err(Error::Config(format!("invalid geometric levels {from}..{to} x{count}")));
                }
                if *count == 1 {
                    return Ok(vec![*from]);
                }
                let r = (to / from).ln() / (*count - 1) as f64;
                Ok((0..*count).map(|i| from * (r * i as f64).exp()).collect())
            }
            LevelSpec::Calibrated { band, count, margin } => calibrate_levels(plant, *band, *count, *margin),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub levels: LevelSpec,
    pub min_hold: usize,
    pub max_hold: usize,
    /// Samples before `--scale` is applied.
    pub length: usize,
    #[serde(default)]
    pub mode: PrsMode,
    /// Uniform starting water content.
    pub initial_theta: f64,
    pub seed: u64,
    /// Training noise bound for this dataset; `excitation.noise_frac` when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExcitationConfig {
    /// Noise bound of training data as a fraction of the output range.
    pub noise_frac: f64,
    pub validation_noise_frac: f64,
    pub noise_kind: NoiseKind,
    /// Validation length relative to the training length of the same kind.
    pub validation_fraction: f64,
    pub m1: DatasetSpec,
    pub m2: DatasetSpec,
    pub m3: DatasetSpec,
    /// Full-range, impulse-driven data for the aggregator and the baseline.
    pub full: DatasetSpec,
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        let sub = |band: (f64, f64), min_hold, max_hold, theta, seed| DatasetSpec {
            levels: LevelSpec::Calibrated { band, count: 6, margin: 0.01 },
            min_hold,
            max_hold,
            length: 30_000,
            mode: PrsMode::HeldLevels,
            initial_theta: theta,
            seed,
            noise_frac: None,
        };
        Self {
            noise_frac: 0.1,
            validation_noise_frac: 0.2,
            noise_kind: NoiseKind::Uniform,
            validation_fraction: 0.1,
            m1: sub((0.12, 0.27), 10, 80, 0.2, 11),
            m2: sub((0.21, 0.32), 5, 40, 0.26, 12),
            m3: sub((0.29, 0.40), 5, 40, 0.34, 13),
            full: DatasetSpec {
                levels: LevelSpec::Calibrated {
                    band: (0.12, 0.40),
                    count: 12,
                    margin: 0.01,
                },
                min_hold: 5,
                max_hold: 40,
                length: 100_000,
                mode: PrsMode::HeldLevels,
                initial_theta: 0.25,
                seed: 14,
                noise_frac: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub window: usize,
    pub hidden: usize,
    /// LSTM layers of M1, M2, M3.
    pub sub_layers: [usize; 3],
    pub aggregator_hidden: Vec<usize>,
    pub baseline_layers: usize,
    pub baseline_hidden: usize,
    pub baseline_activation: Activation,
    /// Epoch budget of the aggregator (it trains on cached sub-model outputs).
    pub aggregator_epochs: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            window: 20,
            hidden: 32,
            sub_layers: [1, 1, 2],
            aggregator_hidden: vec![16, 16],
            baseline_layers: 2,
            baseline_hidden: 32,
            baseline_activation: Activation::Sigmoid,
            aggregator_epochs: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MismatchConfig {
    pub kind: CorrectionKind,
    pub f: usize,
}

impl Default for MismatchConfig {
    fn default() -> Self {
        Self {
            kind: CorrectionKind::SingleBias,
            f: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerModel {
    Richards,
    SingleLstm,
    #[default]
    TwoLayer,
}

impl ControllerModel {
    pub fn name(self) -> &'static str {
        match self {
            Self::Richards => "richards",
            Self::SingleLstm => "single_lstm",
            Self::TwoLayer => "two_layer",
        }
    }
}

impl std::str::FromStr for ControllerModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "richards" => Ok(Self::Richards),
            "single_lstm" | "baseline" => Ok(Self::SingleLstm),
            "two_layer" => Ok(Self::TwoLayer),
            other => Err(Error::Config(format!("unknown controller model '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum WeatherChoice {
    /// Two rain events and diurnal ET.
    #[default]
    Default,
    /// Diurnal ET only.
    NoRain,
    Dry,
    File(PathBuf),
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSettings {
    pub n_sim: usize,
    /// Uniform initial capillary potential [m].
    pub initial_h: f64,
    pub controller: ControllerModel,
    pub process_noise: f64,
    pub measurement_noise: f64,
    pub noise_kind: NoiseKind,
    pub forecast_error: f64,
    pub weather: WeatherChoice,
    pub seed: u64,
    /// Directory holding the trained models (needed by learned controllers).
    pub model_dir: Option<PathBuf>,
    pub label: Option<String>,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            n_sim: 60,
            initial_h: -0.2,
            controller: ControllerModel::TwoLayer,
            process_noise: 0.0,
            measurement_noise: 0.0,
            noise_kind: NoiseKind::Uniform,
            forecast_error: 0.2,
            weather: WeatherChoice::Default,
            seed: 0,
            model_dir: None,
            label: None,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Value = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let table = value
            .as_table()
            .ok_or_else(|| Error::Config("config must be a table of sections".into()))?;
        for s in SECTIONS {
            if !table.contains_key(s) {
                return Err(Error::Config(format!("missing section [{s}]")));
            }
        }
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse and validate a file; relative paths inside are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Config(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let WeatherChoice::File(p) = &cfg.run.weather {
            if p.is_relative() {
                cfg.run.weather = WeatherChoice::File(base.join(p));
            }
        }
        if let Some(d) = &cfg.run.model_dir {
            if d.is_relative() {
                cfg.run.model_dir = Some(base.join(d));
            }
        }
        cfg.check_files()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.soil.validate()?;
        self.geometry.validate()?;
        self.train.validate()?;
        self.zmpc.validate()?;
        let e = &self.excitation;
        if !(e.noise_frac >= 0.0 && e.validation_noise_frac >= 0.0 && e.validation_fraction > 0.0) {
            return Err(Error::Config("excitation noise fractions must be >= 0".into()));
        }
        for (name, d) in [("m1", &e.m1), ("m2", &e.m2), ("m3", &e.m3), ("full", &e.full)] {
            if d.min_hold == 0 || d.min_hold > d.max_hold || d.length == 0 {
                return Err(Error::Config(format!("excitation.{name}: need 1 <= min_hold <= max_hold and length > 0")));
            }
            if !(d.initial_theta > self.soil.theta_r && d.initial_theta < self.soil.theta_s) {
                return Err(Error::Config(format!("excitation.{name}: initial_theta outside the retention range")));
            }
        }
        let s = &self.surrogate;
        if s.window == 0 || s.hidden == 0 || s.sub_layers.contains(&0) || s.baseline_layers == 0 || s.baseline_hidden == 0 {
            return Err(Error::Config("surrogate sizes must be positive".into()));
        }
        if !self.zmpc.horizon.is_multiple_of(self.mismatch.f) || (self.mismatch.kind == CorrectionKind::Linear && self.mismatch.f < 2) {
            return Err(Error::Config(format!(
                "mismatch.f = {} must divide the horizon {} (and be >= 2 for the linear correction)",
                self.mismatch.f, self.zmpc.horizon
            )));
        }
        let r = &self.run;
        if r.n_sim == 0 || r.initial_h >= 0.0 || r.process_noise < 0.0 || r.measurement_noise < 0.0 || r.forecast_error < 0.0 {
            return Err(Error::Config(format!("invalid run settings: {r:?}")));
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        if let WeatherChoice::File(p) = &self.run.weather {
            if !p.exists() {
                return Err(Error::Config(format!("weather file {} does not exist", p.display())));
            }
        }
        if let Some(d) = &self.run.model_dir {
            if !d.is_dir() {
                return Err(Error::Config(format!("model directory {} does not exist", d.display())));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn plant(&self) -> RichardsModel {
        RichardsModel::new(self.soil, self.geometry)
    }
}
