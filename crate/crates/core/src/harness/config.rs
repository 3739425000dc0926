use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DataLayout, SynthSpec};
use crate::embedding::PatchConfig;
use crate::error::{Error, Result};
use crate::forecast::{ForecastTrainConfig, ForecasterConfig, DEFAULT_ZERO_THRESHOLD};
use crate::mae::{MaeConfig, MaskAxis, MaskingMode, PretrainConfig};
use crate::scalar::Precision;

/// Environment variable that relative output directories are resolved
/// against.
pub const OUTPUT_ROOT_ENV: &str = "DMAE_OUTPUT_ROOT";

/// Which pre-trained representations feed the forecaster.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationMode {
    /// Spatial and temporal autoencoders.
    #[default]
    Full,
    SOnly,
    TOnly,
    /// One autoencoder masking individual (patch, node) slots.
    Mixed,
    /// No pre-training; plain predictor.
    None,
}

impl AblationMode {
    pub fn axes(self) -> Vec<MaskAxis> {
        match self {
            AblationMode::Full => vec![MaskAxis::Spatial, MaskAxis::Temporal],
            AblationMode::SOnly => vec![MaskAxis::Spatial],
            AblationMode::TOnly => vec![MaskAxis::Temporal],
            AblationMode::Mixed => vec![MaskAxis::Mixed],
            AblationMode::None => vec![],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::SOnly => "s-only",
            AblationMode::TOnly => "t-only",
            AblationMode::Mixed => "mixed",
            AblationMode::None => "none",
        }
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => AblationMode::Full,
            "s-only" => AblationMode::SOnly,
            "t-only" => AblationMode::TOnly,
            "mixed" => AblationMode::Mixed,
            "none" => AblationMode::None,
            _ => return Err(Error::Config(vec![format!("unknown ablation mode {s:?}")])),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthPreset {
    /// Per-node daily sinusoids.
    #[default]
    Sinusoid,
    /// Nodes mixing a few smooth latent signals.
    Latent,
    /// Daily sinusoids with planted mirage episodes.
    Mirage,
}

/// Compact description of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSource {
    pub preset: SynthPreset,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub daily_period: usize,
    pub noise_std: f64,
    /// Number of latent signals (latent preset).
    pub latents: usize,
    /// Fraction of episode slots holding a mirage (mirage preset).
    pub mirage_fraction: f64,
    pub seed: u64,
    pub split_ratios: [f64; 3],
}

impl Default for SynthSource {
    fn default() -> Self {
        Self {
            preset: SynthPreset::Sinusoid,
            n_nodes: 20,
            n_steps: 2880,
            daily_period: 288,
            noise_std: 0.1,
            latents: 3,
            mirage_fraction: 0.3,
            seed: 0,
            split_ratios: [0.6, 0.2, 0.2],
        }
    }
}

impl SynthSource {
    pub fn to_spec(&self) -> SynthSpec {
        let mut spec = match self.preset {
            SynthPreset::Sinusoid | SynthPreset::Mirage => {
                SynthSpec::sinusoid(self.n_nodes, self.n_steps, self.daily_period, self.noise_std, self.seed)
            }
            SynthPreset::Latent => {
                let mut s =
                    SynthSpec::latent_mixture(self.n_nodes, self.n_steps, self.latents, self.noise_std, self.seed);
                s.daily_period = self.daily_period;
                s
            }
        };
        if self.preset == SynthPreset::Mirage {
            spec.mirage_fraction = self.mirage_fraction;
        }
        spec.split_ratios = self.split_ratios;
        spec
    }
}

/// Where the series comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DataSource {
    Synth(SynthSource),
    File {
        path: PathBuf,
        /// Mirage manifest written by `synth`, if any.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        manifest: Option<PathBuf>,
        #[serde(flatten)]
        layout: DataLayout,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synth(SynthSource::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaeSection {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub mask_ratio: f64,
    pub masking_mode: MaskingMode,
}

impl Default for MaeSection {
    fn default() -> Self {
        let d = MaeConfig::default();
        Self {
            encoder_layers: d.encoder_layers,
            decoder_layers: d.decoder_layers,
            heads: d.heads,
            ff_mult: d.ff_mult,
            mask_ratio: d.mask_ratio,
            masking_mode: d.masking_mode,
        }
    }
}

/// Every knob of one experiment. Missing keys take the defaults below, and
/// the fully resolved document is written next to every run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub precision: Precision,
    pub ablation: AblationMode,
    pub output_dir: PathBuf,
    /// Also train the plain predictor with the same seed and report both.
    pub compare_baseline: bool,
    /// Train the spatial and temporal autoencoders on separate threads.
    pub parallel_pretrain: bool,
    /// Cache encoder outputs under `<output_dir>/cache`.
    pub cache_representations: bool,
    pub zero_threshold: f64,
    pub data: DataSource,
    pub patch: PatchConfig,
    pub mae: MaeSection,
    pub pretrain: PretrainConfig,
    pub forecaster: ForecasterConfig,
    pub forecast: ForecastTrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            ablation: AblationMode::Full,
            output_dir: PathBuf::from("runs/default"),
            compare_baseline: true,
            parallel_pretrain: true,
            cache_representations: false,
            zero_threshold: DEFAULT_ZERO_THRESHOLD,
            data: DataSource::default(),
            patch: PatchConfig::default(),
            mae: MaeSection::default(),
            pretrain: PretrainConfig::default(),
            forecaster: ForecasterConfig::default(),
            forecast: ForecastTrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Parses `text`, then applies `key.path=value` overrides (values are
    /// TOML literals; anything that does not parse is taken as a string).
    /// `data.source` defaults to `synth`.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut errs = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut doc, o) {
                errs.push(e);
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        // a `[data]` table without a source describes a synthetic series
        if let Some(toml::Value::Table(data)) = doc.get_mut("data") {
            data.entry("source").or_insert_with(|| "synth".into());
        }
        let mut cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        cfg.forecast.t_long = cfg.patch.t_long;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut cfg = Self::from_toml_with_overrides(&text, overrides)?;
        if let DataSource::File { path: p, manifest, .. } = &mut cfg.data {
            let dir = path.parent().unwrap_or(Path::new(""));
            for f in std::iter::once(p).chain(manifest.as_mut()) {
                if f.is_relative() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Output directory, resolved against `$DMAE_OUTPUT_ROOT` when relative.
    pub fn run_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }

    pub fn mae_config(&self, axis: MaskAxis) -> MaeConfig {
        MaeConfig {
            axis,
            patch: self.patch,
            channels: self.forecaster.channels,
            encoder_layers: self.mae.encoder_layers,
            decoder_layers: self.mae.decoder_layers,
            heads: self.mae.heads,
            ff_mult: self.mae.ff_mult,
            mask_ratio: self.mae.mask_ratio,
            masking_mode: self.mae.masking_mode,
        }
    }

    /// Training settings of the forecaster; `t_long` always follows
    /// `patch.t_long`.
    pub fn forecast_train_config(&self) -> ForecastTrainConfig {
        ForecastTrainConfig {
            t_long: self.patch.t_long,
            ..self.forecast.clone()
        }
    }

    /// Checks every field and cross-field rule, reporting all violations.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Err(Error::Config(e)) => errs.extend(e),
            Err(e) => errs.push(e.to_string()),
            Ok(()) => {}
        };
        collect(self.mae_config(MaskAxis::Temporal).validate());
        collect(self.pretrain.validate());
        collect(self.forecaster.validate());
        collect(self.forecast_train_config().validate());
        if let DataSource::Synth(s) = &self.data {
            collect(s.to_spec().validate());
        }
        if self.forecaster.t_in != self.patch.patch_len {
            errs.push(format!(
                "forecaster.t_in = {} must equal patch.patch_len = {} so the short window is one patch",
                self.forecaster.t_in, self.patch.patch_len
            ));
        }
        if self.patch.t_long < self.forecaster.t_in {
            errs.push("patch.t_long must be at least forecaster.t_in".into());
        }
        if self.patch.patch_len > 0 && self.forecaster.truncate > self.patch.num_patches() {
            errs.push(format!(
                "forecaster.truncate = {} exceeds the {} patches of a long window",
                self.forecaster.truncate,
                self.patch.num_patches()
            ));
        }
        let ratios = match &self.data {
            DataSource::Synth(s) => s.split_ratios,
            DataSource::File { layout, .. } => layout.split_ratios,
        };
        if ratios.iter().any(|r| *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            errs.push(format!("split ratios {ratios:?} must be nonnegative and sum to 1"));
        }
        if !(self.zero_threshold >= 0.0) {
            errs.push("zero_threshold must be nonnegative".into());
        }
        errs.sort();
        errs.dedup();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> std::result::Result<(), String> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| format!("override {item:?} is not of the form key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|k| k.is_empty()) {
        return Err(format!("override key {key:?} is malformed"));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().unwrap();
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("override {key:?}: {k:?} is not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
