//! Run configuration: a TOML file with `[data]`, `[network]`, `[train]` and
//! `[output]` sections, plus `--set key=value` overrides applied after the
//! file is read. Unknown keys are errors.

use std::path::{Path, PathBuf};

use cdj::data::{generate_blobs, load_csv, load_idx, split, BlobParams, DataError, Dataset};
use cdj::network::{LayerSpec, NetworkTopology};
use cdj::trainer::{LearningRateSchedule, RoutingLabelSource, TrainingConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Environment variable naming the output directory when neither the
/// command line nor the config gives one.
pub const OUTPUT_DIR_ENV: &str = "CDJ_OUTPUT_DIR";
const FALLBACK_OUTPUT_DIR: &str = "cdj-out";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSection,
    pub network: NetworkSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSection {
    /// Synthetic Gaussian blobs, split into train and test.
    Blobs {
        classes: usize,
        per_class: usize,
        image_side: usize,
        separation: f64,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default = "default_pixel_noise")]
        pixel_noise: f64,
        #[serde(default)]
        generator_seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
    /// IDX image/label pairs. Without a test pair the training pair is split.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        num_classes: Option<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
    /// `label,pixel…` rows of square grayscale images. Without a test file
    /// the training file is split.
    Csv {
        path: PathBuf,
        test_path: Option<PathBuf>,
        image_side: usize,
        num_classes: Option<usize>,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_spread() -> f64 {
    1.0
}

fn default_pixel_noise() -> f64 {
    0.05
}

fn default_test_fraction() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    /// Layer descriptors such as `conv:8 k=3x3 s=1 p=1 pool=2/2` or `fc:4`.
    pub layers: Vec<String>,
    /// Routed layer indices; absent means every layer after the first that
    /// has at least as many maps as routing classes.
    pub routing: Option<Vec<usize>>,
    #[serde(default = "default_true")]
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Constant(f64),
    /// `[[epoch, rate], …]`, interpolated geometrically between breakpoints.
    Breakpoints(Vec<(usize, f64)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingLabels {
    Class,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: LearningRate,
    pub momentum: f64,
    pub seed: u64,
    pub routing_labels: RoutingLabels,
    pub normalize_c_by_batch: bool,
    pub probe_per_class: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainingConfig::default();
        TrainSection {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lambda1: d.lambda1,
            lambda2: d.lambda2,
            learning_rate: LearningRate::Breakpoints(d.schedule.breakpoints().to_vec()),
            momentum: d.momentum,
            seed: d.seed,
            routing_labels: RoutingLabels::Class,
            normalize_c_by_batch: d.normalize_c_by_batch,
            probe_per_class: d.probe_per_class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Write probe exports every this many epochs; 0 disables them.
    pub probe_every: usize,
}

/// Keys accepted by `--set` without a section prefix.
const SECTION_KEYS: &[(&str, &[&str])] = &[
    (
        "data",
        &[
            "source",
            "classes",
            "per_class",
            "image_side",
            "separation",
            "spread",
            "pixel_noise",
            "generator_seed",
            "test_fraction",
            "split_seed",
            "images",
            "labels",
            "test_images",
            "test_labels",
            "path",
            "test_path",
            "num_classes",
        ],
    ),
    ("network", &["layers", "routing", "bias"]),
    (
        "train",
        &[
            "epochs",
            "batch_size",
            "lambda1",
            "lambda2",
            "learning_rate",
            "momentum",
            "seed",
            "routing_labels",
            "normalize_c_by_batch",
            "probe_per_class",
        ],
    ),
    ("output", &["dir", "probe_every"]),
];

/// A configuration problem, reported with exit status 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// Splits `key=value` and resolves a bare key to its section.
fn parse_override(raw: &str) -> Result<(String, String, toml::Value), ConfigError> {
    let Some((key, value)) = raw.split_once('=') else {
        return err(format!("override `{raw}` is not of the form key=value"));
    };
    let key = key.trim();
    let (section, field) = match key.split_once('.') {
        Some((s, f)) => (s.to_string(), f.to_string()),
        None => match SECTION_KEYS.iter().find(|(_, keys)| keys.contains(&key)) {
            Some((s, _)) => (s.to_string(), key.to_string()),
            None => return err(format!("override `{raw}`: unknown key `{key}`")),
        },
    };
    if !SECTION_KEYS.iter().any(|(s, _)| *s == section) {
        return err(format!("override `{raw}`: unknown section `{section}`"));
    }
    // Anything that is not a TOML literal is taken as a bare string.
    let value = match format!("v = {}", value.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(value.trim().to_string()),
    };
    Ok((section, field, value))
}

impl RunConfig {
    /// Parses `text`, applies `overrides`, and resolves relative data paths
    /// against `base`.
    pub fn from_toml(text: &str, overrides: &[String], base: &Path) -> Result<RunConfig, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e| ConfigError(format!("config: {e}")))?;
        for raw in overrides {
            let (section, field, value) = parse_override(raw)?;
            let entry = table
                .entry(section.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let Some(t) = entry.as_table_mut() else {
                return err(format!("config: `{section}` is not a section"));
            };
            t.insert(field, value);
        }
        // Re-parse from text so errors point at the offending line.
        let merged = toml::to_string(&table).map_err(|e| ConfigError(format!("config: {e}")))?;
        let mut cfg: RunConfig = toml::from_str(&merged).map_err(|e| ConfigError(format!("config: {e}")))?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        RunConfig::from_toml(&text, overrides, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSection::Blobs { .. } => {}
            DataSection::Idx {
                images,
                labels,
                test_images,
                test_labels,
                ..
            } => {
                fix(images);
                fix(labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            DataSection::Csv { path, test_path, .. } => {
                fix(path);
                test_path.iter_mut().for_each(fix);
            }
        }
        if let Some(d) = &mut self.output.dir {
            fix(d);
        }
    }

    /// Canonical TOML rendering of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    /// Hex SHA-256 of [`RunConfig::to_toml`].
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Loads or generates the data and returns `(train, test)`.
    pub fn datasets(&self) -> Result<(Dataset, Dataset), ConfigError> {
        let data = |e: DataError| ConfigError(format!("data: {e}"));
        let split_one = |d: Dataset, fraction: f64, seed: u64| split(&d, fraction, seed).map_err(data);
        match &self.data {
            DataSection::Blobs {
                classes,
                per_class,
                image_side,
                separation,
                spread,
                pixel_noise,
                generator_seed,
                test_fraction,
                split_seed,
            } => {
                let params = BlobParams {
                    spread: *spread,
                    pixel_noise: *pixel_noise,
                    ..BlobParams::new(*classes, *per_class, *image_side, *separation, *generator_seed)
                };
                split_one(generate_blobs(&params).map_err(data)?, *test_fraction, *split_seed)
            }
            DataSection::Idx {
                images,
                labels,
                test_images,
                test_labels,
                num_classes,
                test_fraction,
                split_seed,
            } => {
                let train = load_idx(images, labels, *num_classes).map_err(data)?;
                match (test_images, test_labels) {
                    (Some(ti), Some(tl)) => {
                        let test = load_idx(ti, tl, Some(num_classes.unwrap_or(train.num_classes()))).map_err(data)?;
                        Ok((train, test))
                    }
                    (None, None) => split_one(train, *test_fraction, *split_seed),
                    _ => err("data: test_images and test_labels must be given together"),
                }
            }
            DataSection::Csv {
                path,
                test_path,
                image_side,
                num_classes,
                test_fraction,
                split_seed,
            } => {
                let train = load_csv(path, *image_side, *num_classes).map_err(data)?;
                match test_path {
                    Some(tp) => {
                        let test = load_csv(tp, *image_side, Some(num_classes.unwrap_or(train.num_classes())))
                            .map_err(data)?;
                        Ok((train, test))
                    }
                    None => split_one(train, *test_fraction, *split_seed),
                }
            }
        }
    }

    /// The network for samples of `input_shape` over `num_classes` classes,
    /// routing against `routing_classes` when no routing list is given.
    pub fn topology(
        &self,
        input_shape: (usize, usize, usize),
        num_classes: usize,
        routing_classes: usize,
    ) -> Result<NetworkTopology, ConfigError> {
        let layers = self
            .network
            .layers
            .iter()
            .enumerate()
            .map(|(i, s)| s.parse::<LayerSpec>().map_err(|e| ConfigError(format!("network.layers[{i}]: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        if layers.is_empty() {
            return err("network.layers: at least one layer is required");
        }
        let mut topo = NetworkTopology::new(input_shape, layers, num_classes);
        if !self.network.bias {
            topo = topo.without_bias();
        }
        topo = match &self.network.routing {
            Some(r) => {
                if let Some(&bad) = r.iter().find(|&&l| l >= topo.layers.len()) {
                    return err(format!("network.routing: layer {bad} does not exist"));
                }
                topo.with_routing_layers(r)
            }
            None => topo.with_default_routing(routing_classes),
        };
        topo.geometry().map_err(|e| ConfigError(format!("network: {e}")))?;
        Ok(topo)
    }

    pub fn training_config(&self) -> Result<TrainingConfig, ConfigError> {
        let t = &self.train;
        let schedule = match &t.learning_rate {
            LearningRate::Constant(r) => LearningRateSchedule::new(vec![(0, *r)]),
            LearningRate::Breakpoints(b) => LearningRateSchedule::new(b.clone()),
        }
        .map_err(|e| ConfigError(format!("train.learning_rate: {e}")))?;
        Ok(TrainingConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lambda1: t.lambda1,
            lambda2: t.lambda2,
            schedule,
            momentum: t.momentum,
            seed: t.seed,
            routing_labels: match t.routing_labels {
                RoutingLabels::Class => RoutingLabelSource::Class,
                RoutingLabels::Auxiliary => RoutingLabelSource::Auxiliary,
            },
            normalize_c_by_batch: t.normalize_c_by_batch,
            probe_per_class: t.probe_per_class,
        })
    }

    /// `cli` if given, else `[output] dir`, else the environment variable,
    /// else `cdj-out`.
    pub fn output_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.output.dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(FALLBACK_OUTPUT_DIR))
    }
}
