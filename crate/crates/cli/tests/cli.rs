use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_vsmd");

const SMALL: [&str; 16] = [
    "--override",
    "train.steps_per_stage=15",
    "--override",
    "train.log_every=5",
    "--override",
    "net.hidden=[16]",
    "--override",
    "sa.fk.samples_per_stage=32",
    "--override",
    "sampler.n_samples=200",
    "--override",
    "metrics.straightness_paths=20",
    "--override",
    "data.n_points=500",
    "--override",
    "diffusion.grid_size=40",
];

fn vsmd(out: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .output()
        .expect("run vsmd")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = vsmd(out, args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn table(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect();
    (head, rows)
}

fn significant_digits(s: &str) -> usize {
    let mantissa = s.split(['e', 'E']).next().unwrap();
    mantissa.trim_start_matches('-').trim_start_matches('0').chars().filter(char::is_ascii_digit).count()
}

#[test]
fn unconditional_pipeline_writes_documented_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["gen-data"]);
    ok(out, &["train", "--override", "train.stages=2"]);
    ok(out, &["sample", "--trajectory"]);
    let stdout = ok(out, &["eval", "--override", "train.stages=2"]);
    assert!(stdout.contains("pmf_rmse") && stdout.contains("straightness"));

    let (h, rows) = table(&out.join("data.csv"));
    assert_eq!(h, ["sample", "x0", "x1"]);
    assert_eq!(rows.len(), 500);
    let (h, rows) = table(&out.join("loss.csv"));
    assert_eq!(h, ["stage", "step", "loss"]);
    assert_eq!(rows.len(), 6);
    let (h, rows) = table(&out.join("schedule.csv"));
    assert_eq!(h, ["stage", "node", "coord", "a_x", "a_v", "eta"]);
    assert_eq!(rows.len(), 2 * 40 * 2);
    let (h, rows) = table(&out.join("samples.csv"));
    assert_eq!(h, ["sample", "x0", "x1"]);
    assert_eq!(rows.len(), 200);
    for v in rows.iter().flat_map(|r| &r[1..]) {
        assert!(v.parse::<f64>().unwrap().is_finite());
        assert_eq!(significant_digits(v), 17, "{v}");
    }
    let (h, rows) = table(&out.join("trajectory.csv"));
    assert_eq!(h, ["sample", "t", "x0", "x1", "v0", "v1"]);
    assert_eq!(rows.len(), 200 * 40);
    let (h, rows) = table(&out.join("metrics.csv"));
    assert_eq!(h, ["metric", "value", "n_samples", "seed", "config_hash", "wall_time_s"]);
    let metrics: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(metrics, ["pmf_rmse", "cov_rel_err", "straightness"]);
    for name in ["checkpoint.json", "config.train.toml", "run.train.json", "loss.svg", "schedule.svg", "scatter.svg", "curves.svg"] {
        assert!(out.join(name).exists(), "{name}");
    }
}

#[test]
fn cld_schedule_stays_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["train", "--override", "diffusion.mode=\"cld\"", "--override", "diffusion.damping_ratio=1.0", "--override", "train.stages=2"]);
    let (_, rows) = table(&out.join("schedule.csv"));
    assert!(!rows.is_empty());
    for r in &rows {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[5].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let full = tempfile::tempdir().unwrap();
    let part = tempfile::tempdir().unwrap();
    ok(full.path(), &["train", "--override", "train.stages=3"]);
    ok(part.path(), &["train", "--override", "train.stages=2"]);
    ok(part.path(), &["train", "--resume", "--override", "train.stages=3"]);
    for name in ["loss.csv", "schedule.csv", "checkpoint.json"] {
        let a = std::fs::read(full.path().join(name)).unwrap();
        let b = std::fs::read(part.path().join(name)).unwrap();
        assert!(a == b, "{name} differs after resume");
    }
}

#[test]
fn resume_refuses_changed_model_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train", "--override", "train.stages=1"]);
    let o = vsmd(dir.path(), &["train", "--resume", "--override", "train.stages=2", "--override", "diffusion.beta=7.0"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("hash mismatch"));
    let o = vsmd(dir.path(), &["sample", "--seed", "9"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    assert_eq!(code(&vsmd(out, &["train", "--config", "/definitely/missing.toml"])), 4);
    assert_eq!(code(&vsmd(out, &["train", "--override", "diffusion.beta=-1.0"])), 2);
    assert_eq!(code(&vsmd(out, &["train", "--override", "nosuch.key=1"])), 2);
    assert_eq!(code(&vsmd(out, &["frobnicate"])), 2);
    assert_eq!(code(&vsmd(out, &["eval"])), 4);
    assert_eq!(code(&vsmd(out, &["sample"])), 4);

    let bad = out.join("bad.toml");
    std::fs::write(&bad, "[diffusion\nmode = 1").unwrap();
    assert_eq!(code(&vsmd(out, &["gen-data", "--config", bad.to_str().unwrap()])), 2);
    let o = Command::new(BIN).arg("--version").output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn forecast_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/series_vsuld.toml");
    let series = [
        "--config",
        cfg,
        "--override",
        "train.stages=1",
        "--override",
        "forecast.n_paths=5",
        "--override",
        "forecast.n_origins=2",
        "--override",
        "data.length=400",
    ];
    let run = |cmd: &str| {
        let mut args = vec![cmd];
        args.extend(series);
        let o = Command::new(BIN)
            .args(&args)
            .arg("--out")
            .arg(out)
            .args(&SMALL[..8])
            .output()
            .unwrap();
        assert!(o.status.success() || cmd == "sample", "{}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run("train");
    run("forecast");
    let (h, rows) = table(&out.join("crps.csv"));
    assert_eq!(h, ["origin", "crps_sum", "climatology_crps_sum"]);
    assert_eq!(rows.len(), 2);
    let (h, rows) = table(&out.join("forecast.csv"));
    assert_eq!(h, ["origin", "path", "step", "y0", "y1", "y2", "y3"]);
    assert_eq!(rows.len(), 2 * 5 * 24);
    assert_eq!(code(&run("sample")), 2);
}

#[test]
fn sweep_runs_every_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(out, &["sweep", "--override", "train.stages=1", "--grid", "diffusion.beta=3.0,6.0", "--grid", "net.hidden=[8],[8,8]"]);
    let (h, rows) = table(&out.join("sweep.csv"));
    assert_eq!(h, ["run", "overrides", "metric", "value"]);
    let runs: std::collections::BTreeSet<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(runs.len(), 4);
    assert_eq!(rows[3][1], "diffusion.beta=3.0;net.hidden=[8,8]");
    assert!(out.join("run_003").join("metrics.csv").exists());

    let bad = tempfile::tempdir().unwrap();
    let o = vsmd(bad.path(), &["sweep", "--grid", "diffusion.beta=3.0,-1.0"]);
    assert_eq!(code(&o), 2);
    assert!(!bad.path().join("run_000").exists());
}
