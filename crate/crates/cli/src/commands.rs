//! Subcommand implementations. Each returns the metric rows it produced so
//! `sweep` can collect them.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vsmd::analytic::GaussianData;
use vsmd::config::{DataConfig, RunConfig};
use vsmd::data::{gen_series, gen_toy, ToySpec};
use vsmd::eval::{pmf_rmse, straightness, MetricsReport, PmfGrid};
use vsmd::forecast::{evaluate, forecast_origins, ForecastSetup};
use vsmd::samplers::{fmt_f64, sample, sample_moments, SamplerKind, SamplerOptions};
use vsmd::scorenet::NetScore;
use vsmd::training::{load_training_data, split_series, Checkpoint, LossRecord, ScheduleRecord, Trainer};

use crate::plot::{self, Series};
use crate::rundir::*;

pub fn gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = RunDir::init(cfg, "gen-data")?;
    let path = dir.path(DATA_FILE);
    match &cfg.data {
        DataConfig::Series(spec) => {
            let y = gen_series(spec)?;
            write_matrix(&path, &indexed("y", y.ncols()), &y, Some("t"))?;
        }
        _ => {
            let x = load_training_data(cfg)?.x;
            write_matrix(&path, &indexed("x", x.ncols()), &x, Some("sample"))?;
            if x.ncols() >= 2 {
                let pts = x.rows().into_iter().map(|r| (r[0], r[1])).collect();
                plot::scatter(&dir.path("data.svg"), "training data", "x0", "x1", &[Series { label: "data", points: pts }])
                    .map_err(vsmd::Error::Io)?;
            }
        }
    }
    eprintln!("wrote {}", path.display());
    Ok(())
}

const LOSS_HEADER: [&str; 3] = ["stage", "step", "loss"];
const SCHEDULE_HEADER: [&str; 6] = ["stage", "node", "coord", "a_x", "a_v", "eta"];

/// Keeps only rows of stages a checkpoint already covers, so a resumed run
/// appends to a log that matches the uninterrupted one.
fn trim_log(path: &Path, header: &[&str], completed: usize) -> Result<()> {
    if !path.exists() {
        return write_header(path, header);
    }
    let (_, rows) = read_table(path)?;
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for row in rows.iter().filter(|r| r[0] as usize <= completed) {
        w.write_record(row_strings(row))?;
    }
    w.flush().map_err(vsmd::Error::Io)?;
    Ok(())
}

fn row_strings(row: &[f64]) -> Vec<String> {
    // Leading columns of the logs are integer counters.
    row.iter()
        .map(|v| if v.fract() == 0.0 && v.abs() < 1e15 { format!("{}", *v as i64) } else { fmt_f64(*v) })
        .collect()
}

fn write_header(path: &Path, header: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    w.flush().map_err(vsmd::Error::Io)?;
    Ok(())
}

fn append_csv(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    let file = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(vsmd::Error::Io)
        .with_context(|| format!("opening {}", path.display()))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn log_stage(dir: &RunDir, losses: &[LossRecord], schedule: &[ScheduleRecord]) -> Result<()> {
    let mut w = append_csv(&dir.path(LOSS_FILE))?;
    for r in losses {
        w.write_record([r.stage.to_string(), r.step.to_string(), fmt_f64(r.loss)])?;
    }
    w.flush().map_err(vsmd::Error::Io)?;
    let mut w = append_csv(&dir.path(SCHEDULE_FILE))?;
    for r in schedule {
        w.write_record([
            r.stage.to_string(),
            r.node.to_string(),
            r.coord.to_string(),
            fmt_f64(r.a_x),
            fmt_f64(r.a_v),
            fmt_f64(r.eta),
        ])?;
    }
    w.flush().map_err(vsmd::Error::Io)?;
    Ok(())
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<Vec<MetricsReport>> {
    let dir = RunDir::init(cfg, "train")?;
    let ck_path = dir.path(CHECKPOINT_FILE);
    let mut tr = if resume {
        let ck = Checkpoint::load(&ck_path).with_context(|| format!("resuming from {}", ck_path.display()))?;
        trim_log(&dir.path(LOSS_FILE), &LOSS_HEADER, ck.stage)?;
        trim_log(&dir.path(SCHEDULE_FILE), &SCHEDULE_HEADER, ck.stage)?;
        eprintln!("resuming after stage {}", ck.stage);
        Trainer::resume(cfg.clone(), ck)?
    } else {
        write_header(&dir.path(LOSS_FILE), &LOSS_HEADER)?;
        write_header(&dir.path(SCHEDULE_FILE), &SCHEDULE_HEADER)?;
        Trainer::new(cfg.clone())?
    };
    let start = Instant::now();
    while !tr.finished() {
        let stage = tr.stage + 1;
        let rep = tr.run_stage().with_context(|| format!("training stage {stage}"))?;
        log_stage(&dir, &rep.losses, &rep.schedule)?;
        tr.checkpoint().save(&ck_path).context("saving checkpoint")?;
        let last = rep.losses.last().map_or(f64::NAN, |r| r.loss);
        eprintln!("stage {stage}/{}: loss {last:.5}", cfg.train.stages);
    }
    plot_training(&dir)?;
    Ok(vec![MetricsReport {
        metric: "final_loss".into(),
        value: tr.state.recent_loss(cfg.train.log_every),
        n_samples: cfg.train.batch_size,
        seed: cfg.seed,
        config_hash: cfg.model_hash(),
        wall_time_s: start.elapsed().as_secs_f64(),
    }])
}

type Curve = Vec<(f64, f64)>;

/// Per-stage mean loss and per-coordinate mean `a_x` from the run logs.
fn stage_curves(dir: &RunDir) -> Result<Option<(Curve, Vec<Curve>)>> {
    let loss_path = dir.path(LOSS_FILE);
    if !loss_path.exists() {
        return Ok(None);
    }
    let (_, rows) = read_table(&loss_path)?;
    let mut loss: Vec<(f64, f64, usize)> = Vec::new();
    for r in &rows {
        match loss.last_mut() {
            Some(last) if last.0 == r[0] => {
                last.1 += r[2];
                last.2 += 1;
            }
            _ => loss.push((r[0], r[2], 1)),
        }
    }
    let loss = loss.into_iter().map(|(s, sum, n)| (s, sum / n as f64)).collect();
    let mut coords: Vec<Vec<(f64, f64)>> = Vec::new();
    let sched_path = dir.path(SCHEDULE_FILE);
    if sched_path.exists() {
        let (_, rows) = read_table(&sched_path)?;
        let dim = rows.iter().map(|r| r[2] as usize + 1).max().unwrap_or(0);
        coords = vec![Vec::new(); dim];
        let mut acc: Vec<(f64, f64, usize)> = vec![(f64::NAN, 0.0, 0); dim];
        for r in &rows {
            let c = r[2] as usize;
            if acc[c].0 != r[0] {
                if acc[c].2 > 0 {
                    coords[c].push((acc[c].0, acc[c].1 / acc[c].2 as f64));
                }
                acc[c] = (r[0], 0.0, 0);
            }
            acc[c].1 += r[3];
            acc[c].2 += 1;
        }
        for (c, a) in acc.iter().enumerate() {
            if a.2 > 0 {
                coords[c].push((a.0, a.1 / a.2 as f64));
            }
        }
    }
    Ok(Some((loss, coords)))
}

fn plot_training(dir: &RunDir) -> Result<()> {
    let (_, rows) = read_table(&dir.path(LOSS_FILE))?;
    let pts = rows.iter().map(|r| (r[1], r[2])).collect();
    plot::lines(&dir.path("loss.svg"), "score-matching loss", "step", "loss", &[Series { label: "loss", points: pts }])
        .map_err(vsmd::Error::Io)?;
    if let Some((_, coords)) = stage_curves(dir)? {
        let labels: Vec<String> = (0..coords.len()).map(|c| format!("a_x[{c}]")).collect();
        let series: Vec<Series> = coords
            .into_iter()
            .zip(&labels)
            .map(|(points, label)| Series { label, points })
            .collect();
        plot::lines(&dir.path("schedule.svg"), "mean a_x over nodes", "stage", "a_x", &series).map_err(vsmd::Error::Io)?;
    }
    Ok(())
}

struct Model {
    ck: Checkpoint,
    kernel: vsmd::processes::PerturbationKernel,
}

fn load_model(cfg: &RunConfig, dir: &RunDir, checkpoint: Option<&Path>) -> Result<Model> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.path(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ck.check_config(cfg)?;
    let kernel = ck.kernel(cfg)?;
    Ok(Model { ck, kernel })
}

fn unconditional(cfg: &RunConfig) -> Result<()> {
    if matches!(cfg.data, DataConfig::Series(_)) {
        return Err(vsmd::Error::Config("series models are conditional; use the forecast command".into()).into());
    }
    Ok(())
}

pub struct SampleArgs {
    pub checkpoint: Option<PathBuf>,
    pub kind: Option<SamplerKind>,
    pub n: Option<usize>,
    pub trajectory: bool,
}

pub fn sample_cmd(cfg: &RunConfig, args: &SampleArgs) -> Result<()> {
    unconditional(cfg)?;
    let dir = RunDir::init(cfg, "sample")?;
    let model = load_model(cfg, &dir, args.checkpoint.as_deref())?;
    let kind = args.kind.unwrap_or(cfg.sampler.kind);
    if kind == SamplerKind::Aboba && !cfg.diffusion.mode.has_momentum() {
        return Err(vsmd::Error::Config("aboba sampler needs a momentum mode".into()).into());
    }
    let n = args.n.unwrap_or(cfg.sampler.n_samples);
    let mut opts = cfg.sampler.options();
    if args.trajectory && opts.save_every == 0 {
        opts.save_every = 1;
    }
    let score = NetScore::new(&model.ck.net, &model.kernel, cfg.sampler.use_ema);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let traj = sample(kind, &score, &model.kernel, n, &opts, &mut rng).with_context(|| format!("sampling with {}", kind.name()))?;
    let x = traj.samples_x();
    let path = dir.path(SAMPLES_FILE);
    write_matrix(&path, &indexed("x", x.ncols()), &x, Some("sample"))?;
    if opts.save_every > 0 {
        traj.write_csv(create(&dir.path(TRAJECTORY_FILE))?)?;
    }
    if x.ncols() >= 2 {
        let pts = x.rows().into_iter().map(|r| (r[0], r[1])).collect();
        plot::scatter(&dir.path("samples.svg"), &format!("{} samples", kind.name()), "x0", "x1", &[Series { label: kind.name(), points: pts }])
            .map_err(vsmd::Error::Io)?;
    }
    eprintln!("wrote {} ({n} samples, {})", path.display(), kind.name());
    Ok(())
}

/// Held-out draw from the configured data source (data seed + 1).
fn default_reference(cfg: &RunConfig, n: usize) -> Result<Array2<f64>> {
    match &cfg.data {
        DataConfig::Toy(spec) => Ok(gen_toy(&ToySpec {
            n_points: n,
            seed: spec.seed + 1,
            ..spec.clone()
        })?
        .points),
        DataConfig::Gaussian { variances, seed, .. } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            Ok(GaussianData::diagonal(variances)?.sample(n, &mut rng)?)
        }
        DataConfig::Series(_) => Err(vsmd::Error::Config("series models are evaluated with the forecast command".into()).into()),
    }
}

pub struct EvalArgs {
    pub samples: Option<PathBuf>,
    pub reference: Option<PathBuf>,
}

pub fn eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Vec<MetricsReport>> {
    unconditional(cfg)?;
    let dir = RunDir::init(cfg, "eval")?;
    let start = Instant::now();
    let samples_path = args.samples.clone().unwrap_or_else(|| dir.path(SAMPLES_FILE));
    let generated = read_columns(&samples_path, "x")?;
    let reference = match &args.reference {
        Some(p) => read_columns(p, "x")?,
        None => default_reference(cfg, generated.nrows().max(1))?,
    };
    if generated.ncols() != reference.ncols() || generated.ncols() != cfg.data.dim() {
        return Err(vsmd::Error::invalid(format!(
            "shape mismatch: samples have {} columns, reference {}, data dimension {}",
            generated.ncols(),
            reference.ncols(),
            cfg.data.dim()
        ))
        .into());
    }
    if generated.nrows() < 2 || reference.nrows() < 2 {
        return Err(vsmd::Error::invalid("evaluation needs at least two samples and two reference points").into());
    }
    let mut values: Vec<(&str, f64, usize)> = Vec::new();
    if generated.ncols() == 2 {
        let grid = PmfGrid::covering(reference.view(), cfg.metrics.pmf_bins)?;
        values.push(("pmf_rmse", pmf_rmse(generated.view(), reference.view(), &grid)?, generated.nrows()));
    }
    let (_, cg) = sample_moments(generated.view());
    let (_, cr) = sample_moments(reference.view());
    let cov_err = (&cg - &cr).mapv(|v| v * v).sum().sqrt() / cr.mapv(|v| v * v).sum().sqrt();
    values.push(("cov_rel_err", cov_err, generated.nrows()));
    if dir.path(CHECKPOINT_FILE).exists() {
        let model = load_model(cfg, &dir, None)?;
        let score = NetScore::new(&model.ck.net, &model.kernel, cfg.sampler.use_ema);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let n = cfg.metrics.straightness_paths;
        let traj = sample(SamplerKind::OdeHeun, &score, &model.kernel, n, &SamplerOptions::with_trajectory(), &mut rng)
            .context("probability-flow paths for straightness")?;
        values.push(("straightness", straightness(&traj, cfg.metrics.straightness_axis)?, n));
    }
    let wall = start.elapsed().as_secs_f64();
    let reports: Vec<MetricsReport> = values
        .into_iter()
        .map(|(metric, value, n)| MetricsReport {
            metric: metric.into(),
            value,
            n_samples: n,
            seed: cfg.seed,
            config_hash: cfg.model_hash(),
            wall_time_s: wall,
        })
        .collect();
    write_metrics(&dir.path(METRICS_FILE), &reports)?;

    let pts = |m: &Array2<f64>| m.rows().into_iter().map(|r| (r[0], r[1 % m.ncols()])).collect::<Vec<_>>();
    plot::scatter(
        &dir.path("scatter.svg"),
        "generated vs reference",
        "x0",
        if generated.ncols() > 1 { "x1" } else { "x0" },
        &[Series { label: "reference", points: pts(&reference) }, Series { label: "generated", points: pts(&generated) }],
    )
    .map_err(vsmd::Error::Io)?;
    if let Some((loss, coords)) = stage_curves(&dir)? {
        let labels: Vec<String> = (0..coords.len()).map(|c| format!("mean a_x[{c}]")).collect();
        let mut series = vec![Series { label: "mean loss", points: loss }];
        series.extend(coords.into_iter().zip(&labels).map(|(points, label)| Series { label, points }));
        plot::lines(&dir.path("curves.svg"), "per-stage training curves", "stage", "value", &series).map_err(vsmd::Error::Io)?;
    }
    for r in &reports {
        println!("{}\t{}", r.metric, fmt_f64(r.value));
    }
    Ok(reports)
}

pub fn write_metrics(path: &Path, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["metric", "value", "n_samples", "seed", "config_hash", "wall_time_s"])?;
    for r in reports {
        w.write_record([
            r.metric.clone(),
            fmt_f64(r.value),
            r.n_samples.to_string(),
            r.seed.to_string(),
            r.config_hash.clone(),
            fmt_f64(r.wall_time_s),
        ])?;
    }
    w.flush().map_err(vsmd::Error::Io)?;
    Ok(())
}

pub fn forecast(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<MetricsReport>> {
    let DataConfig::Series(spec) = &cfg.data else {
        return Err(vsmd::Error::Config("forecast needs a series data source".into()).into());
    };
    let dir = RunDir::init(cfg, "forecast")?;
    let start = Instant::now();
    let model = load_model(cfg, &dir, checkpoint)?;
    let split = split_series(cfg)?;
    let origins = forecast_origins(split.series.nrows(), split.train_len, spec.context, spec.horizon, cfg.forecast.n_origins)?;
    let standardizer = model.ck.standardizer.clone().unwrap_or(split.standardizer);
    let setup = ForecastSetup {
        net: &model.ck.net,
        kernel: &model.kernel,
        standardizer: &standardizer,
        series: split.series.view(),
        train_len: split.train_len,
        context: spec.context,
        horizon: spec.horizon,
    };
    let f = &cfg.forecast;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (report, paths) = evaluate(&setup, &origins, f.n_paths, f.sampler, f.steps, &mut rng).context("forecast rollout")?;

    let mut w = csv::Writer::from_writer(create(&dir.path("forecast.csv"))?);
    let mut head = vec!["origin".to_string(), "path".into(), "step".into()];
    head.extend(indexed("y", spec.dims));
    w.write_record(&head)?;
    for (o, p) in origins.iter().zip(&paths) {
        for (path, sp) in p.outer_iter().enumerate() {
            for (step, row) in sp.outer_iter().enumerate() {
                let mut rec = vec![o.to_string(), path.to_string(), step.to_string()];
                rec.extend(row.iter().map(|v| fmt_f64(*v)));
                w.write_record(&rec)?;
            }
        }
    }
    w.flush().map_err(vsmd::Error::Io)?;

    let mut w = csv::Writer::from_writer(create(&dir.path("crps.csv"))?);
    w.write_record(["origin", "crps_sum", "climatology_crps_sum"])?;
    for o in &report.origins {
        w.write_record([o.origin.to_string(), fmt_f64(o.crps_sum), fmt_f64(o.climatology_crps_sum)])?;
    }
    w.flush().map_err(vsmd::Error::Io)?;
    let file = create(&dir.path("forecast.json"))?;
    serde_json::to_writer_pretty(file, &report).context("writing forecast report")?;

    if let (Some(&o), Some(p)) = (origins.first(), paths.first()) {
        let raw = standardizer.invert(split.series.view());
        let lo = o.saturating_sub(spec.context);
        let observed = raw.slice(s![lo..o + spec.horizon, 0]);
        let mut series = vec![Series {
            label: "observed",
            points: observed.iter().enumerate().map(|(i, v)| ((lo + i) as f64, *v)).collect(),
        }];
        for k in 0..p.shape()[0].min(5) {
            series.push(Series {
                label: if k == 0 { "sample paths" } else { "" },
                points: (0..spec.horizon).map(|h| ((o + h) as f64, p[[k, h, 0]])).collect(),
            });
        }
        plot::lines(&dir.path("forecast.svg"), &format!("forecast from t = {o}, y0"), "t", "y0", &series).map_err(vsmd::Error::Io)?;
    }
    println!("crps_sum\t{}", fmt_f64(report.crps_sum));
    println!("climatology_crps_sum\t{}", fmt_f64(report.climatology_crps_sum));
    let wall = start.elapsed().as_secs_f64();
    let rows = [("crps_sum", report.crps_sum), ("climatology_crps_sum", report.climatology_crps_sum)]
        .into_iter()
        .map(|(m, v)| MetricsReport {
            metric: m.into(),
            value: v,
            n_samples: f.n_paths,
            seed: cfg.seed,
            config_hash: cfg.model_hash(),
            wall_time_s: wall,
        })
        .collect::<Vec<_>>();
    write_metrics(&dir.path(METRICS_FILE), &rows)?;
    Ok(rows)
}

/// Splits `key=v1,v2,...` at top-level commas (brackets and quotes nest).
pub fn parse_grid(spec: &str) -> Result<(String, Vec<String>)> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| vsmd::Error::Config(format!("sweep grid `{spec}` is not key=v1,v2,...")))?;
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut quoted = false;
    let mut cur = String::new();
    for ch in values.chars() {
        match ch {
            '"' => quoted = !quoted,
            '[' | '{' if !quoted => depth += 1,
            ']' | '}' if !quoted => depth -= 1,
            ',' if depth == 0 && !quoted => {
                out.push(std::mem::take(&mut cur).trim().to_string());
                continue;
            }
            _ => {}
        }
        cur.push(ch);
    }
    out.push(cur.trim().to_string());
    if key.trim().is_empty() || out.iter().any(String::is_empty) {
        return Err(vsmd::Error::Config(format!("sweep grid `{spec}` has an empty key or value")).into());
    }
    Ok((key.trim().to_string(), out))
}

/// Cartesian product of the grids, each entry a list of `key=value`.
pub fn cartesian(grids: &[(String, Vec<String>)]) -> Vec<Vec<String>> {
    grids.iter().fold(vec![Vec::new()], |acc, (key, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut next = prefix.clone();
                    next.push(format!("{key}={v}"));
                    next
                })
            })
            .collect()
    })
}

/// Trains and evaluates one run per grid point under `<out>/run_NNN`.
pub fn sweep(base: &RunConfig, combos: &[Vec<String>], load: impl Fn(&[String]) -> Result<RunConfig>) -> Result<()> {
    std::fs::create_dir_all(&base.out).map_err(vsmd::Error::Io)?;
    let summary_path = base.out.join("sweep.csv");
    let mut w = csv::Writer::from_writer(create(&summary_path)?);
    w.write_record(["run", "overrides", "metric", "value"])?;
    let mut by_metric: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for (i, combo) in combos.iter().enumerate() {
        let mut cfg = load(combo)?;
        cfg.out = base.out.join(format!("run_{i:03}"));
        eprintln!("run {i}: {}", combo.join(" "));
        train(&cfg, false).with_context(|| format!("sweep run {i}"))?;
        let rows = if matches!(cfg.data, DataConfig::Series(_)) {
            forecast(&cfg, None)?
        } else {
            sample_cmd(&cfg, &SampleArgs { checkpoint: None, kind: None, n: None, trajectory: false })?;
            eval(&cfg, &EvalArgs { samples: None, reference: None })?
        };
        for r in rows {
            w.write_record([i.to_string(), combo.join(";"), r.metric.clone(), fmt_f64(r.value)])?;
            match by_metric.iter_mut().find(|(m, _)| *m == r.metric) {
                Some((_, pts)) => pts.push((i as f64, r.value)),
                None => by_metric.push((r.metric, vec![(i as f64, r.value)])),
            }
        }
        w.flush().map_err(vsmd::Error::Io)?;
    }
    let series: Vec<Series> = by_metric.iter().map(|(m, pts)| Series { label: m, points: pts.clone() }).collect();
    plot::lines(&base.out.join("sweep.svg"), "sweep metrics", "run", "value", &series).map_err(vsmd::Error::Io)?;
    let mut stderr = std::io::stderr();
    let _ = writeln!(stderr, "wrote {}", summary_path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_splits_at_top_level_commas() {
        let (k, v) = parse_grid("net.hidden=[8,8],[16], [4]").unwrap();
        assert_eq!(k, "net.hidden");
        assert_eq!(v, ["[8,8]", "[16]", "[4]"]);
        let (_, v) = parse_grid(r#"diffusion.mode="cld","vsuld""#).unwrap();
        assert_eq!(v.len(), 2);
        assert!(parse_grid("noequals").is_err());
        assert!(parse_grid("a=1,,2").is_err());
    }

    #[test]
    fn cartesian_product_order() {
        let g = vec![("a".to_string(), vec!["1".into(), "2".into()]), ("b".to_string(), vec!["x".into(), "y".into(), "z".into()])];
        let c = cartesian(&g);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], ["a=1", "b=x"]);
        assert_eq!(c[5], ["a=2", "b=z"]);
        assert_eq!(cartesian(&[]), vec![Vec::<String>::new()]);
    }
}
