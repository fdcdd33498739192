//! End-to-end steps shared by the command line and the acceptance suite:
//! dataset generation, model training and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use crate::closedloop::{default_weather, read_weather_csv, ControllerSpec, NoiseSpec, RunConfig, WeatherScenario};
use crate::config::{ControllerModel, DatasetSpec, PipelineConfig, WeatherChoice};
use crate::mismatch::CorrectionState;
use crate::error::{Error, Result};
use crate::excitation::{
    SAMPLE_DT, gen_prs, simulate_dataset, window, Dataset, DatasetMeta, NoiseSettings, PrsSpec, ScalingSpec,
};
use crate::exec::{map_slice, Execution};
use crate::nn::{save_model, train, ModelFile, Network, NetworkSpec, TrainConfig, TrainReport, Activation};
use crate::soil::WeatherSample;
use crate::surrogate::{
    aggregator_dataset, ScaledNet, StepModel, TwoLayerSurrogate, AGGREGATOR_FILE, BASELINE_FILE, OUTPUT_RANGE, SUB_MODEL_FILES,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Shortest dataset kept after scaling.
const MIN_SAMPLES: usize = 200;

/// Combine a configured seed with the global `--seed`.
pub fn mix_seed(base: u64, global: u64) -> u64 {
    base ^ global.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    M1,
    M2,
    M3,
    Full,
}

impl DataKind {
    pub const ALL: [DataKind; 4] = [DataKind::M1, DataKind::M2, DataKind::M3, DataKind::Full];

    pub fn name(self) -> &'static str {
        match self {
            DataKind::M1 => "m1",
            DataKind::M2 => "m2",
            DataKind::M3 => "m3",
            DataKind::Full => "full",
        }
    }

    fn spec(self, cfg: &PipelineConfig) -> &DatasetSpec {
        match self {
            DataKind::M1 => &cfg.excitation.m1,
            DataKind::M2 => &cfg.excitation.m2,
            DataKind::M3 => &cfg.excitation.m3,
            DataKind::Full => &cfg.excitation.full,
        }
    }

    pub fn file(self, validation: bool) -> String {
        if validation {
            format!("val_{}.csv", self.name())
        } else {
            format!("{}.csv", self.name())
        }
    }
}

pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.toml")
}

/// Simulate one training (or validation) dataset.
pub fn generate_dataset(cfg: &PipelineConfig, kind: DataKind, validation: bool, scale: usize, seed: u64) -> Result<(Dataset, DatasetMeta)> {
    let spec = kind.spec(cfg);
    let plant = cfg.plant();
    let scale = scale.max(1);
    let full_len = if validation {
        (spec.length as f64 * cfg.excitation.validation_fraction).round() as usize
    } else {
        spec.length
    };
    let length = (full_len / scale).max(MIN_SAMPLES);
    let base = spec.seed + if validation { 1000 } else { 0 };
    let prs = PrsSpec {
        levels: spec.levels.resolve(&plant)?,
        min_hold: spec.min_hold,
        max_hold: spec.max_hold,
        length,
        seed: mix_seed(base, seed),
        mode: spec.mode,
    };
    let signal = gen_prs(&prs)?;
    let noise = NoiseSettings {
        frac: if validation {
            cfg.excitation.validation_noise_frac
        } else {
            spec.noise_frac.unwrap_or(cfg.excitation.noise_frac)
        },
        kind: cfg.excitation.noise_kind,
        seed: prs.seed,
    };
    let initial = plant.state_from_water_content(spec.initial_theta)?;
    let data = simulate_dataset(&signal, &plant, &initial, &WeatherSample::dry(), &noise)?;
    let scaler = ScalingSpec::fit(&data, OUTPUT_RANGE, 1.0)?;
    let meta = DatasetMeta {
        name: kind.file(validation).trim_end_matches(".csv").to_string(),
        prs,
        noise,
        initial_theta: spec.initial_theta,
        scaler,
    };
    Ok((data, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub scale: usize,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &PipelineConfig, seed: u64, scale: usize) -> Self {
        Self {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed,
            scale,
            artifacts: Vec::new(),
            tool_version: TOOL_VERSION.to_string(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    pub fn write(mut self, dir: &Path) -> Result<PathBuf> {
        self.finished_unix = unix_now();
        let path = dir.join(format!("{}.manifest.toml", self.command.replace(' ', "_")));
        let text = toml::to_string_pretty(&self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write the four training datasets and their validation counterparts.
pub fn datagen(cfg: &PipelineConfig, scale: usize, seed: u64, out: &Path, exec: Execution) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let mut manifest = RunManifest::new("datagen", cfg, seed, scale);
    let jobs: Vec<(DataKind, bool)> = DataKind::ALL
        .iter()
        .flat_map(|&k| [(k, false), (k, true)])
        .collect();
    let results = map_slice(exec, &jobs, |&(kind, validation)| -> Result<PathBuf> {
        let started = Instant::now();
        let (data, meta) = generate_dataset(cfg, kind, validation, scale, seed)?;
        let path = out.join(kind.file(validation));
        data.write_csv(&path)?;
        meta.write(&meta_path(&path))?;
        let (lo, hi) = data.operating_range();
        info!(
            "{}: {} samples, output {lo:.3}..{hi:.3}, {:.1} s",
            path.display(),
            data.len(),
            started.elapsed().as_secs_f64()
        );
        Ok(path)
    });
    for r in results {
        manifest.artifacts.push(r?);
    }
    let artifacts = manifest.artifacts.clone();
    manifest.write(out)?;
    Ok(artifacts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    M1,
    M2,
    M3,
    Agg,
    Baseline,
}

impl Which {
    pub const ALL: [Which; 5] = [Which::M1, Which::M2, Which::M3, Which::Agg, Which::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Which::M1 => "m1",
            Which::M2 => "m2",
            Which::M3 => "m3",
            Which::Agg => "agg",
            Which::Baseline => "baseline",
        }
    }

    pub fn file(self) -> &'static str {
        match self {
            Which::M1 => SUB_MODEL_FILES[0],
            Which::M2 => SUB_MODEL_FILES[1],
            Which::M3 => SUB_MODEL_FILES[2],
            Which::Agg => AGGREGATOR_FILE,
            Which::Baseline => BASELINE_FILE,
        }
    }

    fn seed_offset(self) -> u64 {
        match self {
            Which::M1 => 101,
            Which::M2 => 102,
            Which::M3 => 103,
            Which::Agg => 104,
            Which::Baseline => 105,
        }
    }
}

impl std::str::FromStr for Which {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Which::ALL
            .into_iter()
            .find(|w| w.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model '{s}' (m1, m2, m3, agg, baseline)")))
    }
}

pub fn load_dataset(dir: &Path, kind: DataKind, validation: bool) -> Result<(Dataset, DatasetMeta)> {
    let path = dir.join(kind.file(validation));
    if !path.exists() {
        return Err(Error::MissingInput(format!("dataset {} (run datagen first)", path.display())));
    }
    Ok((Dataset::read_csv(&path)?, DatasetMeta::read(&meta_path(&path))?))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PathBuf,
    pub history: PathBuf,
    pub report: TrainReport,
    pub seconds: f64,
}

/// Train one model from the datasets in `data_dir` into `model_dir`.
pub fn train_one(cfg: &PipelineConfig, which: Which, data_dir: &Path, model_dir: &Path, seed: u64) -> Result<TrainOutcome> {
    create_dir(model_dir)?;
    let started = Instant::now();
    let s = &cfg.surrogate;
    let p = s.window;
    let train_cfg = TrainConfig {
        seed: mix_seed(cfg.train.seed + which.seed_offset(), seed),
        ..cfg.train
    };
    let init_seed = train_cfg.seed.wrapping_add(7);
    let (model, report) = match which {
        Which::M1 | Which::M2 | Which::M3 => {
            let (kind, layers) = match which {
                Which::M1 => (DataKind::M1, s.sub_layers[0]),
                Which::M2 => (DataKind::M2, s.sub_layers[1]),
                _ => (DataKind::M3, s.sub_layers[2]),
            };
            let (data, meta) = load_dataset(data_dir, kind, false)?;
            let windows = window(&data, p, &meta.scaler)?;
            let spec = NetworkSpec::sequence_model(p, 2, layers, s.hidden, Activation::Tanh, Activation::Tanh);
            let mut net = Network::new(spec, init_seed)?;
            let report = train(&mut net, &windows, &train_cfg)?;
            (
                ModelFile {
                    label: which.name().into(),
                    network: net,
                    scaler: Some(meta.scaler),
                },
                report,
            )
        }
        Which::Baseline => {
            let (data, meta) = load_dataset(data_dir, DataKind::Full, false)?;
            let windows = window(&data, p, &meta.scaler)?;
            let spec = NetworkSpec::sequence_model(p, 2, s.baseline_layers, s.baseline_hidden, s.baseline_activation, Activation::Tanh);
            let mut net = Network::new(spec, init_seed)?;
            let report = train(&mut net, &windows, &train_cfg)?;
            (
                ModelFile {
                    label: "baseline".into(),
                    network: net,
                    scaler: Some(meta.scaler),
                },
                report,
            )
        }
        Which::Agg => {
            let mut subs = Vec::new();
            for name in SUB_MODEL_FILES {
                let path = model_dir.join(name);
                if !path.exists() {
                    return Err(Error::MissingDependency(format!(
                        "the aggregator needs trained sub-models; {} is missing",
                        path.display()
                    )));
                }
                subs.push(ScaledNet::load(&path)?);
            }
            let (data, _) = load_dataset(data_dir, DataKind::Full, false)?;
            let samples = aggregator_dataset(&subs, &data, train_cfg.execution)?;
            let spec = NetworkSpec::dense_model(subs.len(), &s.aggregator_hidden, Activation::Sigmoid, Activation::Identity);
            let mut net = Network::new(spec, init_seed)?;
            let agg_cfg = TrainConfig {
                epochs: s.aggregator_epochs,
                ..train_cfg
            };
            let report = train(&mut net, &samples, &agg_cfg)?;
            (
                ModelFile {
                    label: "agg".into(),
                    network: net,
                    scaler: None,
                },
                report,
            )
        }
    };
    let path = model_dir.join(which.file());
    save_model(&path, &model)?;
    let history = model_dir.join(format!("{}_loss.csv", which.name()));
    report.write_csv(&history)?;
    let seconds = started.elapsed().as_secs_f64();
    info!(
        "trained {}: best validation MSE {:.3e} at epoch {} ({seconds:.1} s)",
        which.name(),
        report.best().validation,
        report.best_epoch
    );
    Ok(TrainOutcome {
        model: path,
        history,
        report,
        seconds,
    })
}

/// Trained networks of one model directory.
pub struct TrainedModels {
    pub two_layer: TwoLayerSurrogate,
    pub baseline: ScaledNet,
}

impl TrainedModels {
    pub fn load(dir: &Path) -> Result<Self> {
        let baseline_path = dir.join(BASELINE_FILE);
        if !baseline_path.exists() {
            return Err(Error::MissingDependency(format!("baseline {}", baseline_path.display())));
        }
        Ok(Self {
            two_layer: TwoLayerSurrogate::load_dir(dir)?,
            baseline: ScaledNet::load(&baseline_path)?,
        })
    }
}

/// Data and model directories of a prepared workspace.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub train_seconds: f64,
}

/// Generate whatever datasets and models are missing under `root`.
pub fn prepare(cfg: &PipelineConfig, scale: usize, seed: u64, root: &Path, exec: Execution) -> Result<Prepared> {
    let data_dir = root.join("data");
    let model_dir = root.join("models");
    let have_data = DataKind::ALL
        .iter()
        .all(|k| data_dir.join(k.file(false)).exists() && data_dir.join(k.file(true)).exists());
    if !have_data {
        datagen(cfg, scale, seed, &data_dir, exec)?;
    }
    let mut train_seconds = 0.0;
    for which in Which::ALL {
        if !model_dir.join(which.file()).exists() {
            train_seconds += train_one(cfg, which, &data_dir, &model_dir, seed)?.seconds;
        }
    }
    Ok(Prepared {
        data_dir,
        model_dir,
        train_seconds,
    })
}

/// Closed-loop settings of a config; `seed` overrides `run.seed` when set.
pub fn run_config(cfg: &PipelineConfig, seed: Option<u64>) -> RunConfig {
    let r = &cfg.run;
    RunConfig {
        label: r.label.clone().unwrap_or_else(|| r.controller.name().to_string()),
        n_sim: r.n_sim,
        dt: SAMPLE_DT,
        initial_h: r.initial_h,
        zmpc: cfg.zmpc,
        noise: NoiseSpec {
            process_frac: r.process_noise,
            measurement_frac: r.measurement_noise,
            kind: r.noise_kind,
        },
        seed: seed.unwrap_or(r.seed),
    }
}

/// True weather of the configured scenario and its forecast.
pub fn weather_scenario(cfg: &PipelineConfig, run: &RunConfig) -> Result<WeatherScenario> {
    let len = run.weather_len();
    let truth = match &cfg.run.weather {
        WeatherChoice::Default => default_weather(len, true),
        WeatherChoice::NoRain => default_weather(len, false),
        WeatherChoice::Dry => vec![WeatherSample::dry(); len],
        WeatherChoice::File(path) => {
            let w = read_weather_csv(path)?;
            if w.len() < len {
                return Err(Error::Length { needed: len, got: w.len() });
            }
            w
        }
    };
    Ok(WeatherScenario::new(truth, cfg.run.forecast_error, run.seed))
}

/// Controller of `cfg.run.controller`; learned ones borrow from `models`.
pub fn controller_spec<'a>(cfg: &PipelineConfig, models: Option<&'a TrainedModels>) -> Result<ControllerSpec<'a>> {
    let learned = |model: &'a dyn StepModel| -> Result<ControllerSpec<'a>> {
        Ok(ControllerSpec::Learned {
            model,
            correction: CorrectionState::new(cfg.mismatch.kind, cfg.mismatch.f, cfg.zmpc.horizon)?,
        })
    };
    match (cfg.run.controller, models) {
        (ControllerModel::Richards, _) => Ok(ControllerSpec::Richards(cfg.plant())),
        (ControllerModel::TwoLayer, Some(m)) => learned(&m.two_layer),
        (ControllerModel::SingleLstm, Some(m)) => learned(&m.baseline),
        (c, None) => Err(Error::MissingDependency(format!("controller '{}' needs trained models", c.name()))),
    }
}
