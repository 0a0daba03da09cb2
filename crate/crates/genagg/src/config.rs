//! Experiment configuration files.
//!
//! Configs are TOML documents with a `schema_version` key. Every field has a
//! default, unknown keys are rejected, and `key.path=value` overrides are
//! layered over the file before validation (last one wins).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use genagg_core::autoencoder::{AutoencoderConfig, AutoencoderKind};
use genagg_core::client::LocalUpdateConfig;
use genagg_core::data::{BlobSpec, PartitionSpec};
use genagg_core::diffusion::DiffusionTrainConfig;
use genagg_core::estimator::{EstimatorArch, UNET_THRESHOLD};
use genagg_core::federated::{Aggregator, ServerConfig};
use genagg_core::guidance::{DeltaScale, GuidanceConfig};
use genagg_core::inversion::{InvertOptions, NoiseSign};
use genagg_core::optim::OptimizerKind;
use genagg_core::schedule::{NoiseSchedule, ScheduleKind};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    LocalOnly,
    Fedavg,
    FedavgFt,
    Pfedgpa,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::LocalOnly => "local-only",
            Method::Fedavg => "fedavg",
            Method::FedavgFt => "fedavg-ft",
            Method::Pfedgpa => "pfedgpa",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub method: Method,
    pub rounds: usize,
    pub n_clients: usize,
    pub participation: f64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub data: DataConfig,
    pub partition: PartitionSpec,
    pub model: ModelConfig,
    pub local: LocalUpdateConfig,
    pub diffusion: DiffusionSection,
    pub server: ServerSection,
    pub autoencoder: AutoencoderSection,
    pub guidance: GuidanceSection,
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            method: Method::Pfedgpa,
            rounds: 30,
            n_clients: 10,
            participation: 1.0,
            workers: 0,
            data: DataConfig::default(),
            partition: PartitionSpec::default(),
            model: ModelConfig::default(),
            local: LocalUpdateConfig::default(),
            diffusion: DiffusionSection::default(),
            server: ServerSection::default(),
            autoencoder: AutoencoderSection::default(),
            guidance: GuidanceSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Blobs,
    Idx,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Synthetic blobs.
    pub blobs: BlobSpec,
    /// IDX image file (`source = "idx"`).
    pub images: Option<PathBuf>,
    /// IDX label file (`source = "idx"`).
    pub labels: Option<PathBuf>,
    /// Labeled CSV file (`source = "csv"`).
    pub path: Option<PathBuf>,
    /// CSV label column name; defaults to the last column.
    pub label_column: Option<String>,
    /// `[channels, height, width]` for convolutional models on CSV data.
    pub image_shape: Option<[usize; 3]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Blobs,
            blobs: BlobSpec::default(),
            images: None,
            labels: None,
            path: None,
            label_column: None,
            image_shape: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `mlp-tiny`, `cnn-small` or `cnn-med`.
    pub name: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "mlp-tiny".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerName {
    Adam,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchName {
    Auto,
    Mlp,
    Unet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    /// diffusion_T
    pub steps: usize,
    pub schedule: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Multiply both betas by `1000 / steps`.
    pub rescale: bool,
    pub train_steps_per_round: usize,
    pub bootstrap_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerName,
    pub momentum: f64,
    pub arch: ArchName,
    pub width: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub levels: usize,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: 1000,
            schedule: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 0.02,
            rescale: false,
            train_steps_per_round: 200,
            bootstrap_steps: 2000,
            batch_size: 64,
            lr: 1e-4,
            optimizer: OptimizerName::Adam,
            momentum: 0.9,
            arch: ArchName::Auto,
            width: 128,
            depth: 3,
            base_channels: 16,
            levels: 2,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let k = if self.rescale && self.steps > 0 {
            1000.0 / self.steps as f64
        } else {
            1.0
        };
        let end = (self.beta_end * k).min(0.999);
        NoiseSchedule::new(self.steps, self.beta_start * k, end, self.schedule)
            .map_err(|e| Error::Config(format!("diffusion: {e}")))
    }

    pub fn train_config(&self) -> DiffusionTrainConfig {
        let optimizer = match self.optimizer {
            OptimizerName::Adam => OptimizerKind::adam(),
            OptimizerName::Momentum => OptimizerKind::Momentum {
                momentum: self.momentum,
            },
        };
        let arch = match self.arch {
            ArchName::Auto => None,
            ArchName::Mlp => Some(EstimatorArch::Mlp {
                width: self.width,
                depth: self.depth,
            }),
            ArchName::Unet => Some(EstimatorArch::Unet1d {
                base_channels: self.base_channels,
                levels: self.levels,
            }),
        };
        DiffusionTrainConfig {
            steps: self.train_steps_per_round,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer,
            arch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenerationMode {
    /// Personalized parameters are generated and dispatched every round.
    EveryRound,
    /// FedAvg dispatch until the last round, which dispatches generated
    /// parameters.
    FinalRound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSection {
    /// W, in rounds.
    pub window: usize,
    /// Rounds of FedAvg dispatch before generation starts; defaults to
    /// `max(5, window)`.
    pub warmup_rounds: Option<usize>,
    pub normalize: bool,
    pub std_floor: f64,
    /// Layer-name prefixes whose parameters the diffusion model generates.
    pub generate_layers: Vec<String>,
    pub aggregator: Aggregator,
    pub generation: GenerationMode,
    pub noise_sign: NoiseSign,
    pub suppress_sigma: bool,
}

impl Default for ServerSection {
    fn default() -> Self {
        Self {
            window: 20,
            warmup_rounds: None,
            normalize: true,
            std_floor: genagg_core::codec::DEFAULT_STD_FLOOR,
            generate_layers: vec!["fc1".into(), "fc2".into()],
            aggregator: Aggregator::Inversion,
            generation: GenerationMode::EveryRound,
            noise_sign: NoiseSign::Minus,
            suppress_sigma: false,
        }
    }
}

impl ServerSection {
    pub fn warmup(&self) -> usize {
        self.warmup_rounds.unwrap_or(self.window.max(5))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AeMode {
    /// On above 4096 generated dimensions.
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderSection {
    pub mode: AeMode,
    pub kind: AutoencoderKind,
    pub latent_dim: usize,
    pub channels: usize,
    pub augment_sigma_input: f64,
    pub augment_sigma_latent: f64,
    pub steps: usize,
    pub steps_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        let d = AutoencoderConfig::default();
        Self {
            mode: AeMode::Auto,
            kind: d.kind,
            latent_dim: d.latent_dim,
            channels: d.channels,
            augment_sigma_input: d.augment_sigma_input,
            augment_sigma_latent: d.augment_sigma_latent,
            steps: d.steps,
            steps_per_round: 100,
            batch_size: d.batch_size,
            lr: d.lr,
        }
    }
}

impl AutoencoderSection {
    pub fn enabled(&self, generated_dim: usize) -> bool {
        match self.mode {
            AeMode::On => true,
            AeMode::Off => false,
            AeMode::Auto => generated_dim > UNET_THRESHOLD,
        }
    }

    pub fn core_config(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            kind: self.kind,
            latent_dim: self.latent_dim,
            channels: self.channels,
            augment_sigma_input: self.augment_sigma_input,
            augment_sigma_latent: self.augment_sigma_latent,
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            ..AutoencoderConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSection {
    pub omega: f64,
    pub init_rounds: usize,
    pub denoise_steps: usize,
    pub start_step: Option<usize>,
    pub delta_scale: DeltaScale,
    /// Clients held out of the federation that join after the last round.
    pub new_clients: usize,
}

impl Default for GuidanceSection {
    fn default() -> Self {
        let d = GuidanceConfig::default();
        Self {
            omega: d.omega,
            init_rounds: d.init_rounds,
            denoise_steps: d.denoise_steps,
            start_step: d.start_step,
            delta_scale: d.delta_scale,
            new_clients: 0,
        }
    }
}

impl GuidanceSection {
    pub fn core_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            omega: self.omega,
            init_rounds: self.init_rounds,
            denoise_steps: self.denoise_steps,
            start_step: self.start_step,
            delta_scale: self.delta_scale,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Output root; falls back to `$GENAGG_OUT`, then `runs`.
    pub dir: Option<PathBuf>,
    /// Write a server checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    pub checkpoint_precision: Precision,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: None,
            checkpoint_every: 0,
            checkpoint_precision: Precision::F64,
        }
    }
}

impl ExperimentConfig {
    /// Parses a config document, applies `overrides` and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let cfg: Self = if overrides.is_empty() {
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            for o in overrides {
                apply_override(&mut table, o)?;
            }
            Self::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("`{field}`: {why}")));
        if self.schema_version != SCHEMA_VERSION {
            return bad(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            );
        }
        if self.rounds == 0 {
            return bad("rounds", "must be at least 1".into());
        }
        if self.n_clients == 0 {
            return bad("n_clients", "must be at least 1".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", format!("must be in (0, 1], got {}", self.participation));
        }
        if let Err(e) = self.local.validate() {
            return bad("local", e.to_string());
        }
        if self.local.batch_size > self.partition.samples_per_client {
            return bad(
                "local.batch_size",
                format!(
                    "{} exceeds partition.samples_per_client = {}",
                    self.local.batch_size, self.partition.samples_per_client
                ),
            );
        }
        if self.partition.test_per_client == 0 {
            return bad("partition.test_per_client", "must be at least 1".into());
        }
        if self.server.window == 0 {
            return bad("server.window", "must be at least 1".into());
        }
        if self.server.generate_layers.is_empty() {
            return bad("server.generate_layers", "must name at least one layer".into());
        }
        if !(self.server.std_floor > 0.0) {
            return bad("server.std_floor", "must be positive".into());
        }
        let schedule = self.diffusion.schedule()?;
        let d = &self.diffusion;
        if d.batch_size == 0 || !(d.lr > 0.0) {
            return bad("diffusion", "batch_size and lr must be positive".into());
        }
        if d.train_steps_per_round == 0 && d.bootstrap_steps == 0 {
            return bad("diffusion.train_steps_per_round", "no diffusion training budget".into());
        }
        if self.guidance.new_clients > 0 {
            if self.method != Method::Pfedgpa {
                return bad("guidance.new_clients", "new clients need method = \"pfedgpa\"".into());
            }
            if let Err(e) = self.guidance.core_config().validate(&schedule) {
                return bad("guidance", e.to_string());
            }
        }
        match self.data.source {
            DataSource::Idx if self.data.images.is_none() || self.data.labels.is_none() => {
                return bad("data", "source \"idx\" needs `images` and `labels`".into());
            }
            DataSource::Csv if self.data.path.is_none() => {
                return bad("data.path", "source \"csv\" needs a path".into());
            }
            _ => {}
        }
        if !["mlp-tiny", "cnn-small", "cnn-med"].contains(&self.model.name.as_str()) {
            return bad("model.name", format!("unknown model `{}`", self.model.name));
        }
        Ok(())
    }

    pub fn server_config(&self, generated_dim: usize) -> ServerConfig {
        let ae = self
            .autoencoder
            .enabled(generated_dim)
            .then(|| self.autoencoder.core_config());
        ServerConfig {
            window: self.server.window,
            train: self.diffusion.train_config(),
            steps_per_round: self.diffusion.train_steps_per_round,
            bootstrap_steps: self.diffusion.bootstrap_steps,
            normalize: self.server.normalize,
            std_floor: self.server.std_floor,
            autoencoder: ae,
            ae_steps_per_round: self.autoencoder.steps_per_round,
            invert: InvertOptions {
                sign: self.server.noise_sign,
                suppress_sigma: self.server.suppress_sigma,
            },
            aggregator: self.server.aggregator,
        }
    }
}

/// Sets `a.b.c = value` in `table`. The value is parsed as a TOML value and
/// kept as a bare string when that fails.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_are_last_wins() {
        let o = vec!["partition.s_percent=50".to_string(), "partition.s_percent=30".to_string()];
        let cfg = ExperimentConfig::from_toml_str("seed = 3\n", &o).unwrap();
        assert_eq!(cfg.partition.s_percent, 30);
        assert_eq!(cfg.seed, 3);
        let s = ExperimentConfig::from_toml_str("", &["method=fedavg-ft".to_string()]).unwrap();
        assert_eq!(s.method, Method::FedavgFt);
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = ExperimentConfig::from_toml_str("[partition]\nbogus = 1\n", &[]).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = ExperimentConfig::from_toml_str("", &["server.nope=2".to_string()]).unwrap_err();
        assert!(e.to_string().contains("nope"), "{e}");
    }

    #[test]
    fn warmup_defaults_to_window_fill() {
        let mut s = ServerSection::default();
        assert_eq!(s.warmup(), 20);
        s.window = 2;
        assert_eq!(s.warmup(), 5);
    }
}
