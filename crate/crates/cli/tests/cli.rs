use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_irriloop"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn irriloop")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn dataset(levels: &str, length: usize, theta: f64, seed: u64) -> String {
    format!(
        "levels = {{ band = {levels}, count = 4, margin = 0.01 }}\n\
         min_hold = 5\nmax_hold = 20\nlength = {length}\nmode = \"held-levels\"\n\
         initial_theta = {theta}\nseed = {seed}\n"
    )
}

/// Small networks and short datasets so the whole pipeline runs in seconds.
fn tiny_config(run: &str) -> String {
    format!(
        "[soil]\n[geometry]\n\
         [excitation]\nvalidation_fraction = 0.25\n\
         [excitation.m1]\n{}\
         [excitation.m2]\n{}\
         [excitation.m3]\n{}\
         [excitation.full]\n{}\
         [train]\nepochs = 2\nbatch_size = 32\n\
         [surrogate]\nwindow = 5\nhidden = 4\nsub_layers = [1, 1, 1]\naggregator_hidden = [4]\n\
         baseline_layers = 1\nbaseline_hidden = 4\naggregator_epochs = 2\n\
         [mismatch]\n\
         [zmpc]\nhorizon = 4\nrestarts = 1\niters = 20\n\
         [run]\nn_sim = 3\n{run}",
        dataset("[0.12, 0.27]", 800, 0.2, 11),
        dataset("[0.21, 0.32]", 800, 0.26, 12),
        dataset("[0.29, 0.40]", 800, 0.34, 13),
        dataset("[0.12, 0.40]", 1600, 0.25, 14),
    )
}

fn write_config(dir: &Path, name: &str, run: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, tiny_config(run)).unwrap();
    p
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

fn ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", stderr(o));
}

#[test]
fn help_lists_config_keys_with_defaults() {
    let o = run(&["--help"]);
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in ["[soil]", "theta_s", "[zmpc]", "horizon = 20", "[run]", "noise_frac = 0.1", "--scale"] {
        assert!(text.contains(key), "help is missing {key}");
    }
}

#[test]
fn missing_section_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, tiny_config("").replace("[soil]\n", "")).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "datagen"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("[soil]"), "{}", stderr(&o));

    fs::write(&cfg, tiny_config("").replace("[mismatch]\n", "[mismatch]\nbogus = 1\n")).unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "datagen"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&["--config", "/nonexistent/x.toml", "datagen"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn scale_divides_dataset_lengths() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap(), "datagen"]));
    ok(&run(&["--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--scale", "4", "datagen"]));
    assert_eq!(rows(&a.join("data/m1.csv")), 800);
    assert_eq!(rows(&b.join("data/m1.csv")), 200);
    assert_eq!(rows(&a.join("data/full.csv")), 1600);
    assert_eq!(rows(&b.join("data/full.csv")), 400);
    for f in ["m1", "m2", "m3", "full"] {
        assert!(a.join(format!("data/{f}.csv")).exists() && a.join(format!("data/{f}.meta.toml")).exists());
        assert!(a.join(format!("data/val_{f}.csv")).exists());
    }
    assert!(a.join("data/datagen.manifest.toml").exists());
}

#[test]
fn aggregator_needs_the_sub_models() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let (c, out) = (cfg.to_str().unwrap(), dir.path().to_str().unwrap());
    ok(&run(&["--config", c, "--out", out, "datagen"]));
    let o = run(&["--config", c, "--out", out, "train", "agg"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("m1"), "{}", stderr(&o));
}

#[test]
fn training_is_byte_identical_for_a_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "");
    let c = cfg.to_str().unwrap();
    let out = dir.path().to_str().unwrap();
    ok(&run(&["--config", c, "--out", out, "datagen"]));
    let data = dir.path().join("data");
    let train = |models: &str, seed: &str| {
        let m = dir.path().join(models);
        ok(&run(&["--config", c, "--seed", seed, "--out", out, "train", "m1", "--data", data.to_str().unwrap(), "--models", m.to_str().unwrap()]));
        fs::read(m.join("m1.irnn")).unwrap()
    };
    let a = train("ma", "3");
    let b = train("mb", "3");
    let d = train("mc", "4");
    assert_eq!(a, b);
    assert_ne!(a, d);
    assert!(dir.path().join("ma/m1_loss.csv").exists());
    assert!(dir.path().join("ma/train_m1.manifest.toml").exists());
}

#[test]
fn end_to_end_pipeline() {
    let dir = TempDir::new().unwrap();
    let root = dir.path();
    let cfg = write_config(root, "c.toml", "");
    let (c, out) = (cfg.to_str().unwrap(), root.to_str().unwrap());
    ok(&run(&["--config", c, "--out", out, "datagen"]));
    for which in ["m1", "m2", "m3", "agg", "baseline"] {
        ok(&run(&["--config", c, "--out", out, "train", which]));
    }

    let v = root.join("val");
    ok(&run(&["--config", c, "--out", v.to_str().unwrap(), "validate", "--models", root.join("models").to_str().unwrap(), "--data", root.join("data").to_str().unwrap(), "--steps", "1,2"]));
    assert!(v.join("validation.csv").exists() && v.join("validation.md").exists());

    let ce = root.join("ce");
    let args = |f: &str| {
        vec![
            "--config".to_string(),
            c.to_string(),
            "--out".into(),
            ce.to_string_lossy().into_owned(),
            "correct-eval".into(),
            "--kind".into(),
            "single_bias".into(),
            "--f".into(),
            f.into(),
            "--data".into(),
            root.join("data").to_string_lossy().into_owned(),
            "--models".into(),
            root.join("models").to_string_lossy().into_owned(),
        ]
    };
    ok(&bin().args(args("2")).output().unwrap());
    assert!(fs::read_to_string(ce.join("correction.csv")).unwrap().starts_with("model,kind,f,horizon"));
    assert_eq!(code(&bin().args(args("3")).output().unwrap()), 2);

    let z = root.join("z");
    let o = run(&["--config", c, "--seed", "5", "--out", z.to_str().unwrap(), "zmpc-run", "--models", root.join("models").to_str().unwrap()]);
    ok(&o);
    let traj = fs::read_to_string(z.join("trajectory.csv")).unwrap();
    assert_eq!(traj.lines().next().unwrap(), "t_s,u_mps,y_true,y_meas,zone_lo,zone_hi,P_mps,ET0_mps");
    assert_eq!(traj.lines().count(), 4);
    assert!(z.join("metrics.csv").exists() && z.join("zmpc-run.manifest.toml").exists());
    let weather = fs::read_to_string(z.join("weather.csv")).unwrap();
    assert_eq!(weather.lines().next().unwrap(), "t_s,P_mps,ET0_mps,Kc");

    // battery: the same seed reproduces every row
    let confs = root.join("battery");
    fs::create_dir(&confs).unwrap();
    let models = root.join("models");
    let run_keys = |controller: &str| format!("controller = \"{controller}\"\nmodel_dir = \"{}\"\nprocess_noise = 0.02\n", models.display());
    write_config(&confs, "a_two.toml", &run_keys("two_layer"));
    write_config(&confs, "b_single.toml", &run_keys("single_lstm"));
    let report_a = root.join("ra/battery.csv");
    let report_b = root.join("rb/battery.csv");
    for r in [&report_a, &report_b] {
        ok(&run(&["--config", c, "--seed", "9", "--out", r.to_str().unwrap(), "battery", "--configs", confs.to_str().unwrap()]));
    }
    // everything but the wall-clock column
    let timeless = |p: &Path| -> Vec<String> {
        let text = fs::read_to_string(p).unwrap();
        let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
        let col = header.iter().position(|h| *h == "mean_solve_seconds").unwrap();
        text.lines()
            .map(|l| l.split(',').enumerate().filter(|(i, _)| *i != col).map(|(_, v)| v).collect::<Vec<_>>().join(","))
            .collect()
    };
    let a = fs::read_to_string(&report_a).unwrap();
    assert_eq!(timeless(&report_a), timeless(&report_b));
    assert_eq!(a.lines().count(), 3);
    assert!(root.join("ra/a_two_trajectory.csv").exists());

    let (ra, rb) = (root.join("rep_a"), root.join("rep_b"));
    ok(&run(&["--out", ra.to_str().unwrap(), "report", "--input", report_a.to_str().unwrap()]));
    ok(&run(&["--out", rb.to_str().unwrap(), "report", "--input", root.join("ra").to_str().unwrap()]));
    assert_eq!(fs::read(ra.join("report.md")).unwrap(), fs::read(rb.join("report.md")).unwrap());
    assert_eq!(fs::read(ra.join("report.csv")).unwrap(), fs::read(rb.join("report.csv")).unwrap());
}

#[test]
fn empty_inputs_are_missing_input_errors() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = dir.path().join("o");
    let o = run(&["--out", out.to_str().unwrap(), "battery", "--configs", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("no *.toml"), "{}", stderr(&o));
    let o = run(&["--out", out.to_str().unwrap(), "report", "--input", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let o = run(&["--out", out.to_str().unwrap(), "validate", "--models", empty.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}
