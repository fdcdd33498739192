use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use log::info;

use irriloop::closedloop::{battery_markdown, read_battery_csv, run_closed_loop, scenario_battery, write_battery_csv, write_text, write_weather_csv, BatteryEntry, BatteryRow};
use irriloop::config::{ControllerModel, PipelineConfig};
use irriloop::exec::Execution;
use irriloop::mismatch::{evaluate_correction, CorrectionKind};
use irriloop::pipeline::{self, controller_spec, run_config, weather_scenario, DataKind, RunManifest, TrainedModels, Which};
use irriloop::surrogate::{nrmse_markdown, percent_diff, validate_model, write_nrmse_csv, StepModel};
use irriloop::Error;

#[derive(Parser, Debug)]
#[command(name = "irriloop", version, about = "Soil-moisture zone MPC with learned surrogates")]
struct Cli {
    /// Pipeline config (TOML); built-in defaults when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed, mixed into every configured seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Divide dataset lengths by this factor
    #[arg(long, global = true, default_value_t = 1)]
    scale: usize,
    /// Run sequentially instead of on the thread pool
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the sub-model, full-range and validation datasets
    Datagen,
    /// Train one model: m1, m2, m3, agg (needs m1-m3) or baseline
    Train {
        which: Which,
        /// Dataset directory [default: <out>/data]
        #[arg(long)]
        data: Option<PathBuf>,
        /// Model directory [default: <out>/models]
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Multi-step NRMSE of every trained model on the validation sets
    Validate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Prediction horizons to report
        #[arg(long, value_delimiter = ',', default_value = "1,5,10,15,20")]
        steps: Vec<usize>,
    },
    /// Mean absolute prediction error with online mismatch correction
    CorrectEval {
        /// none, bias or linear
        #[arg(long)]
        kind: CorrectionKind,
        /// Update frequency (a divisor of the horizon)
        #[arg(long)]
        f: usize,
        /// two_layer or single_lstm
        #[arg(long, default_value = "two_layer")]
        model: ControllerModel,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// One closed-loop run of the configured controller
    ZmpcRun {
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Run every config of a directory with common random numbers
    Battery {
        /// Directory of run configs (*.toml), run in file-name order
        #[arg(long)]
        configs: PathBuf,
        /// Label of the reference row [default: first config]
        #[arg(long)]
        benchmark: Option<String>,
        #[arg(long)]
        models: Option<PathBuf>,
    },
    /// Summary tables from battery outputs
    Report {
        /// Battery CSV or a directory of them
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let help = format!(
        "Config keys and their defaults (every section must be present; keys may be omitted):\n\n{}",
        PipelineConfig::default().to_toml().unwrap_or_default()
    );
    let matches = Cli::command().after_long_help(help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::InvalidFrequency { .. }) => 2,
        _ => 3,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    Ok(match path {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    })
}

fn exec(cli: &Cli) -> Execution {
    if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: &Cli) -> Result<()> {
    if cli.scale == 0 {
        return Err(Error::Config("--scale must be >= 1".into()).into());
    }
    let cfg = load_config(&cli.config)?;
    let seed = cli.seed.unwrap_or(0);
    let data_dir = |d: &Option<PathBuf>| d.clone().unwrap_or_else(|| cli.out.join("data"));
    let model_dir = |d: &Option<PathBuf>| {
        d.clone()
            .or_else(|| cfg.run.model_dir.clone())
            .unwrap_or_else(|| cli.out.join("models"))
    };
    match &cli.command {
        Command::Datagen => {
            let dir = cli.out.join("data");
            let files = pipeline::datagen(&cfg, cli.scale, seed, &dir, exec(cli))?;
            info!("wrote {} datasets to {}", files.len(), dir.display());
        }
        Command::Train { which, data, models } => {
            let dir = model_dir(models);
            let mut manifest = RunManifest::new(&format!("train_{}", which.name()), &cfg, seed, cli.scale);
            let outcome = pipeline::train_one(&cfg, *which, &data_dir(data), &dir, seed)?;
            manifest.artifacts = vec![outcome.model, outcome.history];
            manifest.write(&dir)?;
        }
        Command::Validate { data, models, steps } => {
            let (data, models) = (data_dir(data), model_dir(models));
            let trained = TrainedModels::load(&models)?;
            let mut rows = Vec::new();
            for (i, kind) in [DataKind::M1, DataKind::M2, DataKind::M3].into_iter().enumerate() {
                let (set, _) = pipeline::load_dataset(&data, kind, true)?;
                rows.extend(validate_model(kind.name(), &trained.two_layer.subs[i], &set, steps, exec(cli))?);
            }
            let (full, _) = pipeline::load_dataset(&data, DataKind::Full, true)?;
            let two = validate_model("two_layer", &trained.two_layer, &full, steps, exec(cli))?;
            let single = validate_model("single_lstm", &trained.baseline, &full, steps, exec(cli))?;
            let mut table = nrmse_markdown(&rows);
            table.push_str("\n| steps | single LSTM | two-layer | Δ [%] |\n|---|---|---|---|\n");
            for (a, b) in single.iter().zip(&two) {
                table.push_str(&format!("| {} | {:.4} | {:.4} | {:.1} |\n", a.steps, a.nrmse, b.nrmse, percent_diff(a.nrmse, b.nrmse)));
            }
            rows.extend(two);
            rows.extend(single);
            ensure_dir(&cli.out)?;
            let csv = cli.out.join("validation.csv");
            write_nrmse_csv(&csv, &rows)?;
            let md = cli.out.join("validation.md");
            write_text(&md, &table)?;
            print!("{table}");
            let mut manifest = RunManifest::new("validate", &cfg, seed, cli.scale);
            manifest.artifacts = vec![csv, md];
            manifest.write(&cli.out)?;
        }
        Command::CorrectEval { kind, f, model, data, models } => {
            let trained = TrainedModels::load(&model_dir(models))?;
            let net: &dyn StepModel = match model {
                ControllerModel::TwoLayer => &trained.two_layer,
                ControllerModel::SingleLstm => &trained.baseline,
                ControllerModel::Richards => return Err(Error::Config("correct-eval needs a learned model".into()).into()),
            };
            let (full, _) = pipeline::load_dataset(&data_dir(data), DataKind::Full, true)?;
            let n = cfg.zmpc.horizon;
            let with = evaluate_correction(net, &full, *kind, *f, n, exec(cli))?;
            let without = evaluate_correction(net, &full, CorrectionKind::None, 1, n, exec(cli))?;
            ensure_dir(&cli.out)?;
            let path = cli.out.join("correction.csv");
            let text = format!(
                "model,kind,f,horizon,upsilon_mm,upsilon_none\n{},{},{f},{n},{with},{without}\n",
                model.name(),
                kind_name(*kind)
            );
            write_text(&path, &text)?;
            println!("{} {} f={f}: {with:.5} (no correction {without:.5})", model.name(), kind_name(*kind));
            let mut manifest = RunManifest::new("correct-eval", &cfg, seed, cli.scale);
            manifest.artifacts = vec![path];
            manifest.write(&cli.out)?;
        }
        Command::ZmpcRun { models } => {
            let run = run_config(&cfg, cli.seed);
            let weather = weather_scenario(&cfg, &run)?;
            let trained = match cfg.run.controller {
                ControllerModel::Richards => None,
                _ => Some(TrainedModels::load(&model_dir(models))?),
            };
            let metrics = run_closed_loop(&cfg.plant(), &run, controller_spec(&cfg, trained.as_ref())?, &weather)?;
            ensure_dir(&cli.out)?;
            let traj = cli.out.join("trajectory.csv");
            let met = cli.out.join("metrics.csv");
            let wx = cli.out.join("weather.csv");
            metrics.write_trajectory(&traj)?;
            metrics.write_metrics(&met)?;
            write_weather_csv(&wx, &weather.truth, run.dt)?;
            let mut manifest = RunManifest::new("zmpc-run", &cfg, run.seed, cli.scale);
            manifest.artifacts = vec![traj, met, wx];
            manifest.write(&cli.out)?;
            println!(
                "{}: I_T {:.3} mm, zone violation {:.4e}, mean solve {:.3} s",
                metrics.label, metrics.total_irrigation_mm, metrics.zone_violation, metrics.mean_solve_seconds
            );
            if let Some(f) = metrics.failure {
                return Err(anyhow::anyhow!(f));
            }
        }
        Command::Battery { configs, benchmark, models } => battery(cli, &cfg, configs, benchmark.as_deref(), models.clone())?,
        Command::Report { input } => report(cli, &cfg, input)?,
    }
    Ok(())
}

fn kind_name(k: CorrectionKind) -> &'static str {
    match k {
        CorrectionKind::None => "none",
        CorrectionKind::SingleBias => "single_bias",
        CorrectionKind::Linear => "linear",
    }
}

fn toml_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingInput(format!("{} is not a directory", dir.display())).into());
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::MissingInput(format!("no *.{ext} files in {}", dir.display())).into());
    }
    Ok(files)
}

fn battery(cli: &Cli, base: &PipelineConfig, dir: &Path, benchmark: Option<&str>, models: Option<PathBuf>) -> Result<()> {
    let files = toml_files(dir, "toml")?;
    let mut configs = Vec::new();
    for f in &files {
        let mut c = PipelineConfig::load(f)?;
        if c.run.label.is_none() {
            c.run.label = f.file_stem().map(|s| s.to_string_lossy().into_owned());
        }
        configs.push(c);
    }
    // learned controllers share one set of models per directory
    let mut dirs: Vec<PathBuf> = Vec::new();
    for c in &configs {
        if c.run.controller != ControllerModel::Richards {
            let d = models
                .clone()
                .or_else(|| c.run.model_dir.clone())
                .or_else(|| base.run.model_dir.clone())
                .unwrap_or_else(|| cli.out.join("models"));
            if !dirs.contains(&d) {
                dirs.push(d);
            }
        }
    }
    let loaded: Vec<TrainedModels> = dirs.iter().map(|d| TrainedModels::load(d)).collect::<irriloop::Result<_>>()?;
    let mut entries = Vec::new();
    for c in &configs {
        let run = run_config(c, cli.seed);
        let trained = if c.run.controller == ControllerModel::Richards {
            None
        } else {
            let d = models
                .clone()
                .or_else(|| c.run.model_dir.clone())
                .or_else(|| base.run.model_dir.clone())
                .unwrap_or_else(|| cli.out.join("models"));
            dirs.iter().position(|x| *x == d).map(|i| &loaded[i])
        };
        entries.push(BatteryEntry {
            weather: weather_scenario(c, &run)?,
            controller: controller_spec(c, trained)?,
            config_hash: c.hash(),
            config: run,
        });
    }
    let bench = match benchmark {
        Some(label) => entries
            .iter()
            .position(|e| e.config.label == label)
            .ok_or_else(|| Error::Config(format!("no battery entry labelled '{label}'")))?,
        None => 0,
    };
    let results = scenario_battery(&base.plant(), &entries, bench, exec(cli))?;
    let rows: Vec<BatteryRow> = results.iter().map(|(r, _)| r.clone()).collect();
    let (path, out_dir) = if cli.out.extension().is_some_and(|e| e == "csv") {
        (cli.out.clone(), cli.out.parent().map(Path::to_path_buf).unwrap_or_default())
    } else {
        (cli.out.join("battery.csv"), cli.out.clone())
    };
    if !out_dir.as_os_str().is_empty() {
        ensure_dir(&out_dir)?;
    }
    write_battery_csv(&path, &rows)?;
    let mut manifest = RunManifest::new("battery", base, cli.seed.unwrap_or(0), cli.scale);
    manifest.artifacts.push(path.clone());
    for (row, metrics) in &results {
        if let Some(m) = metrics {
            let t = out_dir.join(format!("{}_trajectory.csv", row.label));
            m.write_trajectory(&t)?;
            manifest.artifacts.push(t);
        }
    }
    manifest.write(if out_dir.as_os_str().is_empty() { Path::new(".") } else { &out_dir })?;
    print!("{}", battery_markdown(&rows));
    Ok(())
}

fn report(cli: &Cli, cfg: &PipelineConfig, input: &Path) -> Result<()> {
    let files = if input.is_dir() {
        toml_files(input, "csv")?
            .into_iter()
            .filter(|p| p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("battery")))
            .collect::<Vec<_>>()
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::MissingInput(format!("no battery reports in {}", input.display())).into());
    }
    let mut md = String::new();
    let mut all = Vec::new();
    for f in &files {
        let rows = read_battery_csv(f)?;
        if rows.is_empty() {
            return Err(Error::MissingInput(format!("{} has no rows", f.display())).into());
        }
        md.push_str(&format!("## {}\n\n", f.file_name().unwrap_or_default().to_string_lossy()));
        md.push_str(&battery_markdown(&rows));
        md.push('\n');
        all.extend(rows);
    }
    ensure_dir(&cli.out)?;
    let md_path = cli.out.join("report.md");
    let csv_path = cli.out.join("report.csv");
    write_text(&md_path, &md)?;
    write_battery_csv(&csv_path, &all)?;
    let mut manifest = RunManifest::new("report", cfg, cli.seed.unwrap_or(0), cli.scale);
    manifest.artifacts = vec![md_path, csv_path];
    manifest.write(&cli.out)?;
    print!("{md}");
    Ok(())
}
