use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::arch::{BlockKind, SkipMerge, UNetSpec, Variant};
use crate::data::{AugmentParams, SplitSpec};
use crate::kv;
use crate::loss::{CentroidGrad, FcmConfig, Feature};

use super::{Result, TrainError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Supervised,
    Unsupervised,
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "unsupervised" => Ok(Self::Unsupervised),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Supervised => "supervised",
            Self::Unsupervised => "unsupervised",
        })
    }
}

/// Every key a run config may contain, in echo order.
pub const KEYS: &[&str] = &[
    "mode",
    "arch",
    "input_channels",
    "height",
    "width",
    "filters",
    "block",
    "skip_merge",
    "num_classes",
    "epochs",
    "batch_size",
    "seed",
    "lr",
    "class_weights",
    "fcm_clusters",
    "fcm_q",
    "fcm_centroid_grad",
    "fcm_feature",
    "sigmoid_correction",
    "sigmoid_gain",
    "sigmoid_cutoff",
    "augment_copies",
    "max_rotation_deg",
    "zoom_min",
    "zoom_max",
    "data_dir",
    "split_train",
    "split_valid",
    "split_test",
    "split_seed",
    "checkpoint",
    "report",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub mode: Mode,
    pub arch: Variant,
    /// Input shape, filter schedule and block options. `num_classes` is the
    /// number of ground-truth classes used for evaluation.
    pub spec: UNetSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lr: f32,
    pub class_weights: bool,
    pub fcm: FcmConfig,
    pub sigmoid_correction: bool,
    pub sigmoid_gain: f32,
    pub sigmoid_cutoff: f32,
    pub augment_copies: usize,
    pub augment: AugmentParams,
    pub data_dir: PathBuf,
    pub split: SplitSpec,
    pub checkpoint: PathBuf,
    pub report: PathBuf,
    /// Directory relative paths are resolved against; not part of the echo.
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            arch: Variant::UNet,
            spec: UNetSpec::default(),
            epochs: 50,
            batch_size: 4,
            seed: 0,
            lr: 1e-3,
            class_weights: false,
            fcm: FcmConfig::default(),
            sigmoid_correction: false,
            sigmoid_gain: 10.0,
            sigmoid_cutoff: 0.5,
            augment_copies: 0,
            augment: AugmentParams::default(),
            data_dir: PathBuf::from("data"),
            split: SplitSpec { train: 0, valid: 0, test: 0, seed: 0 },
            checkpoint: PathBuf::from("model.ckpt"),
            report: PathBuf::from("report.txt"),
            base_dir: PathBuf::from("."),
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| TrainError::Config { line, message: format!("{key}: {e} ({value:?})") })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(TrainError::Config { line, message: format!("{key}: expected true or false, got {value:?}") }),
    }
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(line, key, v.trim())).collect()
}

impl RunConfig {
    /// Parses config text. Relative paths resolve against `base_dir`.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let entries = kv::parse(text).map_err(|e| TrainError::Config { line: e.line, message: e.message })?;
        let mut cfg = Self { base_dir: base_dir.into(), ..Self::default() };
        let mut seen: Vec<(&str, usize)> = Vec::new();
        let (mut arch_set, mut block_set, mut filters_set) = (false, false, false);
        for e in &entries {
            let (line, key, v) = (e.line, e.key.as_str(), e.value.as_str());
            if !KEYS.contains(&key) {
                return Err(TrainError::Config { line, message: format!("unknown key {key:?}") });
            }
            if let Some((_, first)) = seen.iter().find(|(k, _)| *k == key) {
                return Err(TrainError::Config { line, message: format!("duplicate key {key:?} (first on line {first})") });
            }
            seen.push((key, line));
            match key {
                "mode" => cfg.mode = parse_value(line, key, v)?,
                "arch" => {
                    cfg.arch = parse_value(line, key, v)?;
                    arch_set = true;
                }
                "input_channels" => cfg.spec.input_shape.0 = parse_value(line, key, v)?,
                "height" => cfg.spec.input_shape.1 = parse_value(line, key, v)?,
                "width" => cfg.spec.input_shape.2 = parse_value(line, key, v)?,
                "filters" => {
                    cfg.spec.encoder_filters = parse_list(line, key, v)?;
                    filters_set = true;
                }
                "block" => {
                    cfg.spec.block = parse_value::<BlockKind>(line, key, v)?;
                    block_set = true;
                }
                "skip_merge" => cfg.spec.skip_merge = parse_value::<SkipMerge>(line, key, v)?,
                "num_classes" => cfg.spec.num_classes = parse_value(line, key, v)?,
                "epochs" => cfg.epochs = parse_value(line, key, v)?,
                "batch_size" => cfg.batch_size = parse_value(line, key, v)?,
                "seed" => cfg.seed = parse_value(line, key, v)?,
                "lr" => cfg.lr = parse_value(line, key, v)?,
                "class_weights" => cfg.class_weights = parse_bool(line, key, v)?,
                "fcm_clusters" => cfg.fcm.clusters = parse_value(line, key, v)?,
                "fcm_q" => cfg.fcm.q = parse_value(line, key, v)?,
                "fcm_centroid_grad" => cfg.fcm.centroid_grad = parse_value::<CentroidGrad>(line, key, v)?,
                "fcm_feature" => cfg.fcm.feature = parse_value::<Feature>(line, key, v)?,
                "sigmoid_correction" => cfg.sigmoid_correction = parse_bool(line, key, v)?,
                "sigmoid_gain" => cfg.sigmoid_gain = parse_value(line, key, v)?,
                "sigmoid_cutoff" => cfg.sigmoid_cutoff = parse_value(line, key, v)?,
                "augment_copies" => cfg.augment_copies = parse_value(line, key, v)?,
                "max_rotation_deg" => cfg.augment.max_rotation_deg = parse_value(line, key, v)?,
                "zoom_min" => cfg.augment.zoom_range.0 = parse_value(line, key, v)?,
                "zoom_max" => cfg.augment.zoom_range.1 = parse_value(line, key, v)?,
                "data_dir" => cfg.data_dir = PathBuf::from(v),
                "split_train" => cfg.split.train = parse_value(line, key, v)?,
                "split_valid" => cfg.split.valid = parse_value(line, key, v)?,
                "split_test" => cfg.split.test = parse_value(line, key, v)?,
                "split_seed" => cfg.split.seed = parse_value(line, key, v)?,
                "checkpoint" => cfg.checkpoint = PathBuf::from(v),
                "report" => cfg.report = PathBuf::from(v),
                _ => unreachable!("key list checked above"),
            }
        }
        if arch_set && cfg.arch == Variant::Xception {
            if !block_set {
                cfg.spec.block = BlockKind::SeparableDouble;
            }
            if !filters_set {
                cfg.spec.encoder_filters = UNetSpec::xception_default().encoder_filters;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::parse(&text, base)
    }

    /// Range checks that do not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Invalid(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.sigmoid_gain > 0.0 && self.sigmoid_gain.is_finite()) {
            return bad(format!("sigmoid_gain must be positive, got {}", self.sigmoid_gain));
        }
        if !(0.0..=1.0).contains(&self.sigmoid_cutoff) {
            return bad(format!("sigmoid_cutoff must lie in [0, 1], got {}", self.sigmoid_cutoff));
        }
        if self.spec.input_shape.0 != 1 && self.spec.input_shape.0 != 3 {
            return bad(format!("input_channels must be 1 or 3, got {}", self.spec.input_shape.0));
        }
        if self.split.train == 0 {
            return bad("split_train must be at least 1".into());
        }
        self.augment.validate()?;
        self.model_spec().validate()?;
        if self.mode == Mode::Unsupervised {
            self.fcm.validate()?;
            if self.fcm.clusters < self.spec.num_classes {
                return bad(format!(
                    "fcm_clusters ({}) must be at least num_classes ({}) for evaluation",
                    self.fcm.clusters, self.spec.num_classes
                ));
            }
        }
        if self.arch == Variant::Xception && self.spec.block != BlockKind::SeparableDouble {
            return bad("arch xception requires block = separable_double".into());
        }
        Ok(())
    }

    /// Architecture of the trained network: one output channel per class,
    /// or per cluster in unsupervised mode.
    pub fn model_spec(&self) -> UNetSpec {
        let mut s = self.spec.clone();
        if self.mode == Mode::Unsupervised {
            s.num_classes = self.fcm.clusters;
        }
        s
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn data_path(&self) -> PathBuf {
        self.resolve(&self.data_dir)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.resolve(&self.checkpoint)
    }

    pub fn report_path(&self) -> PathBuf {
        self.resolve(&self.report)
    }

    /// Fails unless the dataset directory exists and the output files can be
    /// created in existing directories.
    pub fn check_paths(&self) -> Result<()> {
        let data = self.data_path();
        if !data.is_dir() {
            return Err(TrainError::Invalid(format!("data_dir {} does not exist", data.display())));
        }
        for p in [self.checkpoint_path(), self.report_path()] {
            let parent = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
            if !parent.is_dir() {
                return Err(TrainError::Invalid(format!("directory {} does not exist", parent.display())));
            }
        }
        Ok(())
    }

    /// Canonical text listing every key; parsing it yields this config.
    pub fn echo(&self) -> String {
        let filters: Vec<String> = self.spec.encoder_filters.iter().map(|f| f.to_string()).collect();
        let (c, h, w) = self.spec.input_shape;
        let values: Vec<String> = vec![
            self.mode.to_string(),
            self.arch.to_string(),
            c.to_string(),
            h.to_string(),
            w.to_string(),
            filters.join(","),
            self.spec.block.to_string(),
            self.spec.skip_merge.to_string(),
            self.spec.num_classes.to_string(),
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.seed.to_string(),
            self.lr.to_string(),
            self.class_weights.to_string(),
            self.fcm.clusters.to_string(),
            self.fcm.q.to_string(),
            self.fcm.centroid_grad.to_string(),
            self.fcm.feature.to_string(),
            self.sigmoid_correction.to_string(),
            self.sigmoid_gain.to_string(),
            self.sigmoid_cutoff.to_string(),
            self.augment_copies.to_string(),
            self.augment.max_rotation_deg.to_string(),
            self.augment.zoom_range.0.to_string(),
            self.augment.zoom_range.1.to_string(),
            self.data_dir.display().to_string(),
            self.split.train.to_string(),
            self.split.valid.to_string(),
            self.split.test.to_string(),
            self.split.seed.to_string(),
            self.checkpoint.display().to_string(),
            self.report.display().to_string(),
        ];
        let mut s = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
