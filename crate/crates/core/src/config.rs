//! Run configuration: one TOML file with a section per component, dotted
//! `key=value` overrides, validation and a content hash of the sections that
//! determine a trained model.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SeriesSpec, ToySpec};
use crate::error::{Error, Result};
use crate::processes::{DiffusionConfig, Mode};
use crate::samplers::{FinalStep, SamplerKind, SamplerOptions};
use crate::scorenet::NetConfig;
use crate::variational::SaConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataConfig {
    Toy(ToySpec),
    Series(SeriesSpec),
    /// Zero-mean Gaussian with diagonal covariance.
    Gaussian {
        variances: Vec<f64>,
        #[serde(default = "default_gaussian_points")]
        n_points: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_gaussian_points() -> usize {
    10_000
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Toy(ToySpec::default())
    }
}

impl DataConfig {
    /// Dimension of the data vectors the score model sees.
    pub fn dim(&self) -> usize {
        match self {
            DataConfig::Toy(_) => 2,
            DataConfig::Series(s) => s.dims,
            DataConfig::Gaussian { variances, .. } => variances.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Toy(t) => t.validate(),
            DataConfig::Series(s) => s.validate(),
            DataConfig::Gaussian { variances, n_points, .. } => {
                if variances.is_empty() || variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                    return Err(Error::Config("gaussian variances must be positive".into()));
                }
                if *n_points == 0 {
                    return Err(Error::Config("n_points must be positive".into()));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Score-network steps before the first SA stage and between stages.
    pub steps_per_stage: usize,
    /// Number of score/SA alternations. Non-variational modes run the same
    /// number of score epochs without SA.
    pub stages: usize,
    /// Loss-log granularity in steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-4,
            batch_size: 256,
            steps_per_stage: 1000,
            stages: 10,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub n_samples: usize,
    /// Integration steps; defaults to `grid_size - 1`.
    pub steps: Option<usize>,
    pub final_step: FinalStep,
    /// Save every k-th state for trajectory dumps (0 keeps endpoints only).
    pub save_every: usize,
    pub use_ema: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            kind: SamplerKind::Em,
            n_samples: 10_000,
            steps: None,
            final_step: FinalStep::Denoise,
            save_every: 0,
            use_ema: true,
        }
    }
}

impl SamplerConfig {
    pub fn options(&self) -> SamplerOptions {
        SamplerOptions {
            steps: self.steps,
            save_every: self.save_every,
            final_step: self.final_step,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub pmf_bins: usize,
    /// Axis for straightness (index into x).
    pub straightness_axis: usize,
    /// Paths integrated with the probability-flow ODE for straightness.
    pub straightness_paths: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            pmf_bins: 50,
            straightness_axis: 0,
            straightness_paths: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForecastConfig {
    /// Sample paths per forecast origin.
    pub n_paths: usize,
    /// Forecast origins taken from the held-out tail.
    pub n_origins: usize,
    /// Fraction of the series used for training.
    pub train_fraction: f64,
    pub sampler: SamplerKind,
    pub steps: Option<usize>,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            n_paths: 100,
            n_origins: 8,
            train_fraction: 0.8,
            sampler: SamplerKind::OdeHeun,
            steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub diffusion: DiffusionConfig,
    pub net: NetConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub sa: SaConfig,
    pub sampler: SamplerConfig,
    pub metrics: MetricsConfig,
    pub forecast: ForecastConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out: PathBuf::from("runs/default"),
            diffusion: DiffusionConfig::default(),
            net: NetConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            sa: SaConfig::default(),
            sampler: SamplerConfig::default(),
            metrics: MetricsConfig::default(),
            forecast: ForecastConfig::default(),
        }
    }
}

/// Subset of the config that fixes the trained model; hashed into
/// checkpoints.
#[derive(Serialize)]
struct ModelSections<'a> {
    diffusion: &'a DiffusionConfig,
    net: &'a NetConfig,
    data: &'a DataConfig,
    train: &'a TrainConfig,
    sa: &'a SaConfig,
    seed: u64,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, applies `key.path=value` overrides and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("config parse: {}", e.message())))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        // A partial `[data]` table without a tag means the default toy source.
        if let Some(toml::Value::Table(data)) = value.get_mut("data") {
            data.entry("source").or_insert_with(|| toml::Value::String("toy".into()));
        }
        let cfg: RunConfig = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.diffusion.validate()?;
        self.net.validate()?;
        self.data.validate()?;
        self.sa.validate()?;
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if t.log_every == 0 {
            return Err(Error::Config("train.log_every must be positive".into()));
        }
        if self.sampler.n_samples == 0 {
            return Err(Error::Config("sampler.n_samples must be positive".into()));
        }
        if self.sampler.steps == Some(0) {
            return Err(Error::Config("sampler.steps must be positive".into()));
        }
        if self.sampler.kind == SamplerKind::Aboba && !self.diffusion.mode.has_momentum() {
            return Err(Error::Config("aboba sampler needs a momentum mode".into()));
        }
        if self.metrics.pmf_bins == 0 {
            return Err(Error::Config("metrics.pmf_bins must be positive".into()));
        }
        if self.metrics.straightness_axis >= self.data.dim() {
            return Err(Error::Config(format!(
                "metrics.straightness_axis {} outside data dimension {}",
                self.metrics.straightness_axis,
                self.data.dim()
            )));
        }
        let f = &self.forecast;
        if !(f.train_fraction > 0.0 && f.train_fraction < 1.0) {
            return Err(Error::Config("forecast.train_fraction must lie in (0, 1)".into()));
        }
        if f.n_paths == 0 || f.n_origins == 0 {
            return Err(Error::Config("forecast.n_paths and n_origins must be positive".into()));
        }
        if f.sampler == SamplerKind::Aboba && self.diffusion.mode == Mode::VsdmOverdamped {
            return Err(Error::Config("aboba sampler needs a momentum mode".into()));
        }
        if matches!(self.data, DataConfig::Series(_)) && self.net.encoder.is_none() {
            return Err(Error::Config("series data needs net.encoder for the context window".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 over the model-defining sections. `train.stages` is left
    /// out so a finished run can be resumed with a larger stage count.
    pub fn model_hash(&self) -> String {
        let train = TrainConfig {
            stages: 0,
            ..self.train.clone()
        };
        let sections = ModelSections {
            diffusion: &self.diffusion,
            net: &self.net,
            data: &self.data,
            train: &train,
            sa: &self.sa,
            seed: self.seed,
        };
        let json = serde_json::to_string(&sections).expect("config sections serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Sets `a.b.c = value` in a TOML table. The value is parsed as a TOML
/// literal, falling back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let value = parse_literal(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::processes::BetaSchedule;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn scalar_beta_and_overrides() {
        let text = "seed = 3\n[diffusion]\nmode = \"cld\"\nbeta = 5\ndamping_ratio = 1.0\n";
        let c = RunConfig::from_toml_with_overrides(
            text,
            &["diffusion.beta=10".into(), "sampler.kind=\"ode_heun\"".into(), "train.stages=2".into()],
        )
        .unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.diffusion.beta, BetaSchedule::Constant { value: 10.0 });
        assert_eq!(c.sampler.kind, SamplerKind::OdeHeun);
        assert_eq!(c.train.stages, 2);
    }

    #[test]
    fn bare_string_override() {
        let c = RunConfig::from_toml_with_overrides("", &["sampler.kind=aboba".into()]).unwrap();
        assert_eq!(c.sampler.kind, SamplerKind::Aboba);
    }

    #[test]
    fn rejects_invalid() {
        assert!(RunConfig::from_toml_str("[sa]\nalpha = 0.5\n").is_err());
        assert!(RunConfig::from_toml_str("[diffusion]\nmode = \"cld\"\ndamping_ratio = 0.7\n").is_err());
        assert!(RunConfig::from_toml_str("unknown = 1\n").is_err());
        assert!(RunConfig::from_toml_with_overrides("", &["novalue".into()]).is_err());
    }

    #[test]
    fn hash_tracks_model_sections_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.sampler.n_samples = 7;
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.model_hash(), b.model_hash());
        b.diffusion.grid_size = 50;
        assert_ne!(a.model_hash(), b.model_hash());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig {
            data: DataConfig::Gaussian { variances: vec![1.0, 64.0], n_points: 100, seed: 2 },
            ..Default::default()
        };
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}
