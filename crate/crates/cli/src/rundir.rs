//! Run directory layout and CSV helpers.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ndarray::Array2;
use serde::Serialize;
use vsmd::config::RunConfig;
use vsmd::samplers::fmt_f64;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const DATA_FILE: &str = "data.csv";
pub const LOSS_FILE: &str = "loss.csv";
pub const SCHEDULE_FILE: &str = "schedule.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const METRICS_FILE: &str = "metrics.csv";

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("VSMD_GIT_DESCRIBE"), ")");

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    version: String,
    seed: u64,
    config_hash: String,
}

pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory and writes `config.<command>.toml` and
    /// `run.<command>.json`.
    pub fn init(cfg: &RunConfig, command: &str) -> Result<Self> {
        let root = cfg.out.clone();
        std::fs::create_dir_all(&root).map_err(vsmd::Error::Io).with_context(|| format!("creating run directory {}", root.display()))?;
        let dir = RunDir { root };
        std::fs::write(dir.path(&format!("config.{command}.toml")), cfg.to_toml()?).map_err(vsmd::Error::Io).context("writing config snapshot")?;
        let meta = RunMeta {
            command,
            version: VERSION.to_string(),
            seed: cfg.seed,
            config_hash: cfg.model_hash(),
        };
        let file = File::create(dir.path(&format!("run.{command}.json"))).map_err(vsmd::Error::Io).context("writing run metadata")?;
        serde_json::to_writer_pretty(file, &meta).context("writing run metadata")?;
        Ok(dir)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

pub fn create(path: &Path) -> Result<File> {
    File::create(path)
        .map_err(vsmd::Error::Io)
        .with_context(|| format!("creating {}", path.display()))
}

/// Matrix CSV with an optional leading integer index column.
pub fn write_matrix(path: &Path, header: &[String], rows: &Array2<f64>, index_col: Option<&str>) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut head: Vec<String> = index_col.map(|c| vec![c.to_string()]).unwrap_or_default();
    head.extend(header.iter().cloned());
    w.write_record(&head)?;
    for (i, row) in rows.rows().into_iter().enumerate() {
        let mut rec: Vec<String> = index_col.map(|_| vec![i.to_string()]).unwrap_or_default();
        rec.extend(row.iter().map(|v| fmt_f64(*v)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(vsmd::Error::Io)?;
    Ok(())
}

/// Reads the float columns of a CSV whose names start with `prefix`
/// (`x` for samples, data and references).
pub fn read_columns(path: &Path, prefix: &str) -> Result<Array2<f64>> {
    let file = File::open(path)
        .map_err(vsmd::Error::Io)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.clone();
    let cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with(prefix) && h[prefix.len()..].parse::<usize>().is_ok())
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(vsmd::Error::invalid(format!("{} has no {prefix}0.. columns", path.display())).into());
    }
    let mut data = Vec::new();
    let mut n = 0;
    for rec in r.records() {
        let rec = rec?;
        for &c in &cols {
            let v: f64 = rec
                .get(c)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| vsmd::Error::invalid(format!("{}: bad value in row {}", path.display(), n + 1)))?;
            data.push(v);
        }
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, cols.len()), data).expect("row-major shape"))
}

pub fn indexed(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Header and numeric rows of a CSV produced by this tool.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let file = File::open(path)
        .map_err(vsmd::Error::Io)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut r = csv::Reader::from_reader(file);
    let headers = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| vsmd::Error::invalid(format!("{}: {e}", path.display())))?;
        rows.push(row);
    }
    Ok((headers, rows))
}
