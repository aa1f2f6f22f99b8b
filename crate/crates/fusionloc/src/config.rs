//! Layered key = value configuration with one section per subsystem, plus
//! the run manifest written into every output directory.
//!
//! ```text
//! [dataset]
//! seed = 7
//! extent = 12 10
//! sequences = desk 5 2 200
//!
//! [model]
//! arch = fusion
//! d_i = 256
//!
//! [train]
//! learning_rate = 1e-4
//! ```
//!
//! The `FUSIONLOC_SEED` environment variable overrides every configured
//! seed.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dataset::{SequenceSpec, Split, WorldConfig};
use crate::fusion::NormKind;
use crate::image_branch::BackboneSpec;
use crate::model::{ModelConfig, ModelKind};
use crate::point_branch::SetAbstractionParams;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub message: String,
}

impl ConfigError {
    fn new(message: impl Into<String>) -> Self {
        Self { message: message.into() }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.message)
    }
}

impl std::error::Error for ConfigError {}

/// Parsed sections: section name -> key -> value.
type Sections = BTreeMap<String, BTreeMap<String, String>>;

fn parse_sections(text: &str) -> Result<Sections, ConfigError> {
    let mut sections = Sections::new();
    let mut current = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            current = name.trim().to_string();
            sections.entry(current.clone()).or_default();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::new(format!(
                "line {}: expected 'key = value' or '[section]', found '{raw}'",
                lineno + 1
            )));
        };
        if current.is_empty() {
            return Err(ConfigError::new(format!(
                "line {}: key '{}' appears before any [section]",
                lineno + 1,
                key.trim()
            )));
        }
        sections
            .get_mut(&current)
            .expect("section inserted above")
            .insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(sections)
}

fn get_parsed<T: std::str::FromStr>(
    sec: &BTreeMap<String, String>,
    section: &str,
    key: &str,
    default: T,
) -> Result<T, ConfigError> {
    match sec.get(key) {
        None => Ok(default),
        Some(v) => v
            .parse::<T>()
            .map_err(|_| ConfigError::new(format!("[{section}] {key}: cannot parse '{v}'"))),
    }
}

/// Everything one run needs: world generation, sequence layout, model
/// architecture, and training schedule.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub set_id: String,
    pub sequences: Vec<SequenceSpec>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Canonical text this config was parsed from (for manifests).
    pub text: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            set_id: "Set-01".to_string(),
            sequences: SequenceSpec::set01(),
            model: ModelConfig::paper_default(),
            train: TrainConfig::default(),
            text: String::new(),
        }
    }
}

const KNOWN_DATASET_KEYS: &[&str] = &[
    "seed", "extent", "obstacles", "lidar_fov", "lidar_res", "lidar_max_range", "image_size",
    "camera_hfov", "trajectory_step", "noise_sigma", "set_id", "sequences",
];
const KNOWN_MODEL_KEYS: &[&str] = &[
    "arch", "d_i", "d_p", "n_heads", "n_layers", "norm", "backbone", "dropout", "n_points", "crop",
];
const KNOWN_TRAIN_KEYS: &[&str] = &[
    "learning_rate", "weight_decay", "epochs", "batch_size", "seed", "eval_every", "augment",
    "max_steps",
];

fn check_known_keys(
    sections: &Sections,
) -> Result<(), ConfigError> {
    for (section, keys) in sections {
        let known: &[&str] = match section.as_str() {
            "dataset" => KNOWN_DATASET_KEYS,
            "model" => KNOWN_MODEL_KEYS,
            "train" => KNOWN_TRAIN_KEYS,
            other => {
                return Err(ConfigError::new(format!(
                    "unknown section [{other}]; expected [dataset], [model], [train]"
                )))
            }
        };
        for key in keys.keys() {
            if !known.contains(&key.as_str()) {
                return Err(ConfigError::new(format!("unknown key '{key}' in [{section}]")));
            }
        }
    }
    Ok(())
}

impl RunConfig {
    /// Parse a config file body; missing keys fall back to defaults; the
    /// `FUSIONLOC_SEED` environment variable overrides all seeds.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let sections = parse_sections(text)?;
        check_known_keys(&sections)?;
        let empty = BTreeMap::new();
        let mut cfg = RunConfig { text: text.to_string(), ..RunConfig::default() };

        let d = sections.get("dataset").unwrap_or(&empty);
        cfg.world.seed = get_parsed(d, "dataset", "seed", cfg.world.seed)?;
        if let Some(v) = d.get("extent") {
            let parts: Vec<f64> =
                v.split_whitespace().filter_map(|t| t.parse().ok()).collect();
            if parts.len() != 2 {
                return Err(ConfigError::new(format!(
                    "[dataset] extent: expected two floats, found '{v}'"
                )));
            }
            cfg.world.extent = [parts[0], parts[1]];
        }
        cfg.world.obstacle_count = get_parsed(d, "dataset", "obstacles", cfg.world.obstacle_count)?;
        cfg.world.lidar_fov = get_parsed(d, "dataset", "lidar_fov", cfg.world.lidar_fov)?;
        cfg.world.lidar_angular_res = get_parsed(d, "dataset", "lidar_res", cfg.world.lidar_angular_res)?;
        cfg.world.lidar_max_range =
            get_parsed(d, "dataset", "lidar_max_range", cfg.world.lidar_max_range)?;
        if let Some(v) = d.get("image_size") {
            let parts: Vec<u32> = v.split('x').filter_map(|t| t.trim().parse().ok()).collect();
            if parts.len() != 2 {
                return Err(ConfigError::new(format!(
                    "[dataset] image_size: expected WxH, found '{v}'"
                )));
            }
            cfg.world.image_size = (parts[0], parts[1]);
        }
        cfg.world.camera_hfov = get_parsed(d, "dataset", "camera_hfov", cfg.world.camera_hfov)?;
        cfg.world.trajectory_step =
            get_parsed(d, "dataset", "trajectory_step", cfg.world.trajectory_step)?;
        cfg.world.noise_sigma_range =
            get_parsed(d, "dataset", "noise_sigma", cfg.world.noise_sigma_range)?;
        if let Some(v) = d.get("set_id") {
            cfg.set_id = v.clone();
        }
        if let Some(v) = d.get("sequences") {
            cfg.sequences = parse_sequences(v)?;
        }

        let m = sections.get("model").unwrap_or(&empty);
        if let Some(v) = m.get("arch") {
            cfg.model.kind = ModelKind::parse(v).ok_or_else(|| {
                ConfigError::new(format!(
                    "[model] arch: expected image|point|concat|fusion, found '{v}'"
                ))
            })?;
        }
        cfg.model.d_i = get_parsed(m, "model", "d_i", cfg.model.d_i)?;
        cfg.model.d_p = get_parsed(m, "model", "d_p", cfg.model.d_p)?;
        cfg.model.n_heads = get_parsed(m, "model", "n_heads", cfg.model.n_heads)?;
        cfg.model.n_layers = get_parsed(m, "model", "n_layers", cfg.model.n_layers)?;
        if let Some(v) = m.get("norm") {
            cfg.model.norm = match v.as_str() {
                "bn" => NormKind::Batch,
                "ln" => NormKind::Layer,
                other => {
                    return Err(ConfigError::new(format!(
                        "[model] norm: expected bn|ln, found '{other}'"
                    )))
                }
            };
        }
        if let Some(v) = m.get("backbone") {
            cfg.model.backbone = match v.as_str() {
                "resnet34" => BackboneSpec::resnet34(),
                "tiny" => BackboneSpec::tiny(),
                other => {
                    return Err(ConfigError::new(format!(
                        "[model] backbone: expected resnet34|tiny, found '{other}'"
                    )))
                }
            };
        }
        cfg.model.dropout_p = get_parsed(m, "model", "dropout", cfg.model.dropout_p)?;
        cfg.model.n_points = get_parsed(m, "model", "n_points", cfg.model.n_points)?;
        cfg.model.crop = get_parsed(m, "model", "crop", cfg.model.crop)?;
        // the set-abstraction chain follows the configured point count
        cfg.model.sa = if cfg.model.n_points >= 1024 {
            SetAbstractionParams::table()
        } else {
            SetAbstractionParams::scaled(cfg.model.n_points)
        };

        let t = sections.get("train").unwrap_or(&empty);
        cfg.train.learning_rate = get_parsed(t, "train", "learning_rate", cfg.train.learning_rate)?;
        cfg.train.weight_decay = get_parsed(t, "train", "weight_decay", cfg.train.weight_decay)?;
        cfg.train.epochs = get_parsed(t, "train", "epochs", cfg.train.epochs)?;
        cfg.train.batch_size = get_parsed(t, "train", "batch_size", cfg.train.batch_size)?;
        cfg.train.seed = get_parsed(t, "train", "seed", cfg.train.seed)?;
        cfg.train.eval_every = get_parsed(t, "train", "eval_every", cfg.train.eval_every)?;
        if let Some(v) = t.get("augment") {
            cfg.train.augment = match v.as_str() {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => {
                    return Err(ConfigError::new(format!(
                        "[train] augment: expected true|false, found '{other}'"
                    )))
                }
            };
        }
        cfg.train.max_steps = get_parsed(t, "train", "max_steps", cfg.train.max_steps)?;

        if let Ok(seed) = std::env::var("FUSIONLOC_SEED") {
            let seed: u64 = seed.parse().map_err(|_| {
                ConfigError::new(format!("FUSIONLOC_SEED: cannot parse '{seed}' as u64"))
            })?;
            cfg.world.seed = seed;
            cfg.train.seed = seed;
        }

        cfg.world.validate().map_err(|e| ConfigError::new(e.to_string()))?;
        if cfg.train.epochs > 1000 {
            return Err(ConfigError::new("epochs above 1000 are not supported"));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical full dump, independent of which keys were present.
    pub fn dump(&self) -> String {
        let w = &self.world;
        let m = &self.model;
        let t = &self.train;
        let backbone = if m.backbone == BackboneSpec::resnet34() { "resnet34" } else { "tiny" };
        format!(
            "[dataset]\nseed = {}\nextent = {} {}\nobstacles = {}\nlidar_fov = {}\nlidar_res = {}\n\
             lidar_max_range = {}\nimage_size = {}x{}\ncamera_hfov = {}\ntrajectory_step = {}\n\
             noise_sigma = {}\nset_id = {}\nsequences = {}\n\n\
             [model]\narch = {}\nd_i = {}\nd_p = {}\nn_heads = {}\nn_layers = {}\nnorm = {}\n\
             backbone = {}\ndropout = {}\nn_points = {}\ncrop = {}\n\n\
             [train]\nlearning_rate = {}\nweight_decay = {}\nepochs = {}\nbatch_size = {}\n\
             seed = {}\neval_every = {}\naugment = {}\nmax_steps = {}\n",
            w.seed,
            w.extent[0],
            w.extent[1],
            w.obstacle_count,
            w.lidar_fov,
            w.lidar_angular_res,
            w.lidar_max_range,
            w.image_size.0,
            w.image_size.1,
            w.camera_hfov,
            w.trajectory_step,
            w.noise_sigma_range,
            self.set_id,
            dump_sequences(&self.sequences),
            m.kind.as_str(),
            m.d_i,
            m.d_p,
            m.n_heads,
            m.n_layers,
            m.norm.as_str(),
            backbone,
            m.dropout_p,
            m.n_points,
            m.crop,
            t.learning_rate,
            t.weight_decay,
            t.epochs,
            t.batch_size,
            t.seed,
            t.eval_every,
            t.augment,
            t.max_steps,
        )
    }

    /// Hex SHA-256 of the canonical dump.
    pub fn hash(&self) -> String {
        hex_digest(self.dump().as_bytes())
    }
}

fn parse_sequences(v: &str) -> Result<Vec<SequenceSpec>, ConfigError> {
    let toks: Vec<&str> = v.split_whitespace().collect();
    match toks.as_slice() {
        ["set01"] => Ok(SequenceSpec::set01()),
        ["desk", train, eval, len] => {
            let parse = |t: &str| {
                t.parse::<usize>()
                    .map_err(|_| ConfigError::new(format!("sequences desk: bad number '{t}'")))
            };
            Ok(SequenceSpec::desk(parse(train)?, parse(eval)?, parse(len)?))
        }
        _ => Err(ConfigError::new(format!(
            "sequences: expected 'set01' or 'desk <train> <eval> <len>', found '{v}'"
        ))),
    }
}

fn dump_sequences(specs: &[SequenceSpec]) -> String {
    if specs == SequenceSpec::set01().as_slice() {
        return "set01".to_string();
    }
    let train = specs.iter().filter(|s| s.split == Split::Train).count();
    let eval = specs.len() - train;
    let len = specs.first().map(|s| s.length).unwrap_or(0);
    format!("desk {train} {eval} {len}")
}

impl PartialEq for SequenceSpec {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id && self.length == other.length && self.split == other.split
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let out = hasher.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of a dataset tree: pose files, split files and norm.txt, in sorted
/// path order.
pub fn dataset_hash(root: &Path) -> std::io::Result<String> {
    let mut files = Vec::new();
    fn walk(dir: &Path, files: &mut Vec<std::path::PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                if name == "poses.txt" || name == "split.txt" || name == "norm.txt" {
                    files.push(path);
                }
            }
        }
        Ok(())
    }
    walk(root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f.to_string_lossy().as_bytes());
        hasher.update(std::fs::read(&f)?);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Run manifest: config snapshot, dataset hash, version, timestamps.
pub struct RunManifest {
    pub config_text: String,
    pub config_hash: String,
    pub dataset_hash: Option<String>,
    pub version: String,
    pub started_unix: u64,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, dataset_hash: Option<String>) -> Self {
        let started_unix = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            config_text: cfg.dump(),
            config_hash: cfg.hash(),
            dataset_hash,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        let mut body = String::new();
        body.push_str(&format!("version {}\n", self.version));
        body.push_str(&format!("config_hash {}\n", self.config_hash));
        if let Some(h) = &self.dataset_hash {
            body.push_str(&format!("dataset_hash {h}\n"));
        }
        body.push_str(&format!("started_unix {}\n", self.started_unix));
        body.push_str("--- config ---\n");
        body.push_str(&self.config_text);
        std::fs::write(dir.join("manifest.txt"), body)
    }
}
