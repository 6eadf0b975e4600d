//! Experiment configuration: TOML file plus `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryConfig;
use crate::error::{Error, Result};
use crate::frequency::FreqRatio;
use crate::hyperband::HyperbandConfig;
use crate::nes::NesConfig;
use crate::oracle::synth::{BlobSpec, TrainConfig};
use crate::oracle::DefenseTransform;
use crate::whitebox::CwConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Mlp2,
    /// An HTTP oracle; see `model.endpoint`.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    Gray28,
    Rgb32,
}

impl DatasetPreset {
    pub fn spec(self, seed: u64) -> BlobSpec {
        match self {
            DatasetPreset::Gray28 => BlobSpec::gray28(seed),
            DatasetPreset::Rgb32 => BlobSpec::rgb32(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default = "default_dataset")]
    pub dataset: DatasetPreset,
    #[serde(default = "one")]
    pub data_seed: u64,
    #[serde(default = "one")]
    pub train_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
}

impl ModelSpec {
    pub fn toy(kind: ModelKind, dataset: DatasetPreset) -> Self {
        Self {
            kind,
            dataset,
            data_seed: 1,
            train_seed: 1,
            hidden: None,
            iterations: None,
            endpoint: None,
        }
    }

    pub fn train_config(&self) -> Option<TrainConfig> {
        let mut cfg = match self.kind {
            ModelKind::Linear => TrainConfig::linear(self.train_seed),
            ModelKind::Mlp2 => TrainConfig::mlp2(self.train_seed),
            ModelKind::Remote => return None,
        };
        if let Some(h) = self.hidden {
            cfg.hidden = h;
        }
        if let Some(it) = self.iterations {
            cfg.iterations = it;
        }
        Some(cfg)
    }
}

fn default_dataset() -> DatasetPreset {
    DatasetPreset::Rgb32
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSourceKind {
    /// Fresh samples from the model's blob classes.
    Synthetic,
    /// Every `.ppm`/`.pgm` file in `images.path`, sorted by name.
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSource {
    pub source: ImageSourceKind,
    /// Number of correctly classified images to attack.
    pub count: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for ImageSource {
    fn default() -> Self {
        Self {
            source: ImageSourceKind::Synthetic,
            count: 10,
            seed: 1000,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SphereSweepConfig {
    /// L2 radii of the random perturbations.
    pub radii: Vec<f64>,
    pub ratios: Vec<FreqRatio>,
    /// Directions drawn per image and ratio.
    pub samples: usize,
    /// Clip perturbed images to `[0, 1]` before classifying.
    pub clip: bool,
}

impl Default for SphereSweepConfig {
    fn default() -> Self {
        Self {
            radii: (0..=12).map(|i| i as f64 * 0.5).collect(),
            ratios: [1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125]
                .iter()
                .map(|&r| FreqRatio::new(r).expect("valid ratio"))
                .collect(),
            samples: 100,
            clip: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WhiteboxSection {
    pub ratios: Vec<FreqRatio>,
    /// Attack settings; `attack.ratio` is replaced by each entry of `ratios`.
    pub attack: CwConfig,
}

impl Default for WhiteboxSection {
    fn default() -> Self {
        Self {
            ratios: [1.0, 0.5, 0.25, 1.0 / 7.0]
                .iter()
                .map(|&r| FreqRatio::new(r).expect("valid ratio"))
                .collect(),
            attack: CwConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchFamily {
    Boundary,
    Nes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub families: Vec<BenchFamily>,
    /// Ratio of the low-frequency boundary attack.
    pub boundary_ratio: FreqRatio,
    /// Ratio of the low-frequency NES attack.
    pub nes_ratio: FreqRatio,
    /// Step sizes of the two NES arms; `nes.learning_rate` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lf_nes_learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rgb_nes_learning_rate: Option<f64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            families: vec![BenchFamily::Boundary, BenchFamily::Nes],
            boundary_ratio: FreqRatio::new(0.25).expect("valid ratio"),
            nes_ratio: FreqRatio::new(0.5).expect("valid ratio"),
            lf_nes_learning_rate: None,
            rgb_nes_learning_rate: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub defense: DefenseTransform,
    #[serde(default)]
    pub images: ImageSource,
    #[serde(default = "one_usize")]
    pub repetitions: usize,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "yes")]
    pub write_traces: bool,
    #[serde(default = "yes")]
    pub write_images: bool,
    /// Bins of the queries-to-success histogram.
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default)]
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub nes: NesConfig,
    #[serde(default)]
    pub hyperband: HyperbandConfig,
    #[serde(default)]
    pub whitebox: WhiteboxSection,
    #[serde(default)]
    pub sphere_sweep: SphereSweepConfig,
    #[serde(default)]
    pub bench: BenchConfig,
}

fn one_usize() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn default_bins() -> usize {
    20
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// Every accepted key with a short description, as printed by `--help`.
pub const CONFIG_KEYS: &str = "\
CONFIG KEYS (TOML; override any of them with --set key=value)
  seed                      master seed for per-run seeds [0]
  repetitions               runs per image [1]
  output_dir                directory for result files [out]
  workers                   worker threads, 0 = all cores [0]
  write_traces              write per-run trace CSVs [true]
  write_images              write adversarial PPM/PGM images [true]
  histogram_bins            bins of the queries-to-success histogram [20]
  model.kind                linear | mlp2 | remote (required)
  model.dataset             gray28 | rgb32 [rgb32]
  model.data_seed           seed of the blob-class generator [1]
  model.train_seed          seed of the training run [1]
  model.hidden              mlp2 hidden units [16]
  model.iterations          training iterations
  model.endpoint            base URL of a remote oracle (kind = remote)
  defense.kind              identity | bit_depth | jpeg [identity]
  defense.bits              bit depth for bit_depth
  defense.quality           quality for jpeg
  images.source             synthetic | directory [synthetic]
  images.count              images to attack [10]
  images.seed               seed of the synthetic image sampler [1000]
  images.path               directory of .ppm/.pgm files
  boundary.variant.kind     rgb | lf [lf]
  boundary.variant.ratio    frequency ratio of lf [0.25]
  boundary.delta            sphere step relative to distance [0.2]
  boundary.epsilon_init     initial contraction [0.01]
  boundary.max_queries      query budget per run [5000]
  boundary.success_mse      success threshold [0.001]
  boundary.window           adaptation window [30]
  boundary.raise_above      raise step sizes above this rate [0.5]
  boundary.lower_below      lower step sizes below this rate [0.2]
  boundary.adapt_factor     step-size factor [1.5]
  boundary.epsilon_bounds   [min, max] contraction [1e-7, 0.5]
  boundary.delta_bounds     [min, max] rgb sphere step [0.001, 1]
  boundary.init_tries       random draws for the start [100]
  boundary.bisection_steps  bisection steps towards the image [10]
  boundary.stop_at_success  stop at the first success [true]
  nes.variant.kind          rgb | lf [lf]
  nes.variant.ratio         frequency ratio of lf [0.5]
  nes.rho                   L-infinity radius [0.03]
  nes.sigma                 search standard deviation [0.001]
  nes.batch                 loss queries per gradient estimate [50]
  nes.learning_rate         step size [0.01]
  nes.max_queries           query budget per run [20000]
  nes.targeted              targeted attack [true]
  nes.antithetic            antithetic noise pairs [false]
  hyperband.ratios          arm ratios [0.25, 0.125, 0.0625, 0.03125]
  hyperband.arms_per_ratio  arms per ratio [1]
  hyperband.round_length    iterations per round [500]
  hyperband.total_queries   shared budget [5000]
  hyperband.boundary.*      boundary keys shared by the arms
  whitebox.ratios           ratios of the sweep [1, 0.5, 0.25, 1/7]
  whitebox.attack.lambda    MSE weight [1000]
  whitebox.attack.steps     gradient steps [300]
  whitebox.attack.learning_rate  step size [0.005]
  whitebox.attack.kappa     margin confidence [0.01]
  whitebox.attack.ratio     ignored by the sweep
  sphere_sweep.radii        L2 radii [0, 0.5, ..., 6]
  sphere_sweep.ratios       frequency ratios [1, 1/2, ..., 1/32]
  sphere_sweep.samples      directions per image and ratio [100]
  sphere_sweep.clip         clip perturbed images [false]
  bench.families            [\"boundary\", \"nes\"]
  bench.boundary_ratio      ratio of the lf boundary attack [0.25]
  bench.nes_ratio           ratio of the lf NES attack [0.5]
  bench.lf_nes_learning_rate   step size of the lf NES arm [nes.learning_rate]
  bench.rgb_nes_learning_rate  step size of the rgb NES arm [nes.learning_rate]
";

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, msg: &str| Err(Error::Config(format!("{key}: {msg}")));
        if self.model.kind == ModelKind::Remote && self.model.endpoint.is_none() {
            return cfg_err("model.endpoint", "required when model.kind = \"remote\"");
        }
        if self.repetitions == 0 {
            return cfg_err("repetitions", "must be at least 1");
        }
        if self.images.count == 0 {
            return cfg_err("images.count", "must be at least 1");
        }
        if self.histogram_bins == 0 {
            return cfg_err("histogram_bins", "must be at least 1");
        }
        if self.images.source == ImageSourceKind::Directory {
            match &self.images.path {
                None => return cfg_err("images.path", "required for a directory source"),
                Some(p) if !p.is_dir() => return cfg_err("images.path", &format!("{} is not a directory", p.display())),
                _ => {}
            }
        }
        if self.sphere_sweep.samples < 100 {
            return cfg_err("sphere_sweep.samples", "must be at least 100");
        }
        if self.sphere_sweep.radii.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return cfg_err("sphere_sweep.radii", "radii must be finite and non-negative");
        }
        for (key, lr) in [
            ("bench.lf_nes_learning_rate", self.bench.lf_nes_learning_rate),
            ("bench.rgb_nes_learning_rate", self.bench.rgb_nes_learning_rate),
        ] {
            if lr.is_some_and(|v| !(v > 0.0 && v.is_finite())) {
                return cfg_err(key, "must be positive");
            }
        }
        let wrap = |key: &'static str| move |e: Error| Error::Config(format!("{key}: {e}"));
        self.defense.validate().map_err(wrap("defense"))?;
        self.boundary.validate().map_err(wrap("boundary"))?;
        self.nes.validate().map_err(wrap("nes"))?;
        self.hyperband.validate().map_err(wrap("hyperband"))?;
        self.whitebox.attack.validate().map_err(wrap("whitebox.attack"))?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Applies `key=value` overrides to a parsed table. Values are read as TOML
/// (so `0.5`, `true`, `[1, 2]` and `"text"` work) and fall back to plain
/// strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
        let value = parse_value(raw.trim());
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(Error::Config(format!("bad override key `{key}`")));
        }
        let mut node = &mut *table;
        for part in &parts[..parts.len() - 1] {
            let entry = node
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), value);
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Reads `path` (if any), applies overrides, then the seed override, and
/// validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    if let Some(seed) = seed {
        let seed = i64::try_from(seed).map_err(|_| Error::Config("seed must fit in a signed 64-bit integer".into()))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    parse_table(table)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let table = text.parse::<toml::Table>().map_err(|e| Error::Config(e.to_string()))?;
    parse_table(table)
}

fn parse_table(table: toml::Table) -> Result<ExperimentConfig> {
    let config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    config.validate()?;
    Ok(config)
}
