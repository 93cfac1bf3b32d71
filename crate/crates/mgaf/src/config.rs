//! Flat `key=value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors. Command-line flags are applied on top with [`ExperimentConfig::set`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mgaf_core::cnn::{CnnConfig, ConvSpec, Padding};
use mgaf_core::data::{AugmentConfig, SynthConfig};
use mgaf_core::fusion::PairingPolicy;
use mgaf_core::gaf::{FusionMode, GatingScope};
use mgaf_core::imaging::{ImagingConfig, Interpolation};
use mgaf_core::tensor::Pooling;
use mgaf_core::cnn::STAGE_NAMES;

use crate::error::{Error, Result};
use crate::formats::read_text;

/// Modalities in pipeline order. The Prewitt modality is optional.
pub const MODALITIES: [&str; 3] = ["depth", "inertial", "prewitt"];

/// One evaluated model: a fusion mode over all modalities, or a single
/// modality on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Fused(FusionMode),
    Unimodal(usize),
}

impl Variant {
    pub fn name(self) -> String {
        match self {
            Variant::Fused(m) => m.name().to_string(),
            Variant::Unimodal(i) => format!("{}_only", MODALITIES[i]),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(m) = s.strip_suffix("_only") {
            if let Some(i) = MODALITIES.iter().position(|&n| n == m) {
                return Ok(Variant::Unimodal(i));
            }
        }
        s.parse::<FusionMode>()
            .map(Variant::Fused)
            .map_err(|_| Error::Config(format!("unknown mode '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Dataset directory; the synthetic generator is used when absent.
    pub data_dir: Option<PathBuf>,
    pub synth: SynthConfig,
    pub modes: Vec<Variant>,
    /// Pairing used to build SVM training samples.
    pub pairing: PairingPolicy,
    /// Pairing used at test time.
    pub eval_pairing: PairingPolicy,
    pub seed: u64,
    pub splits: usize,
    pub train_fraction: f64,
    /// Share of each split's training instances held out for CNN early
    /// stopping; 0 disables it.
    pub val_fraction: f64,
    pub cnn: CnnConfig,
    pub imaging: ImagingConfig,
    pub svm_c: f64,
    pub svm_epochs: usize,
    /// Adds Prewitt-filtered depth images as a third modality.
    pub prewitt: bool,
    pub augment: AugmentConfig,
    pub scope: GatingScope,
    pub boost: f64,
    pub stages: Vec<usize>,
    pub chunk: usize,
    /// Writes `NA` instead of wall-clock timings to report.csv so reruns are
    /// byte-identical.
    pub deterministic: bool,
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            synth: SynthConfig::default(),
            modes: vec![Variant::Fused(FusionMode::GatedAverage)],
            pairing: PairingPolicy::RandomFrame,
            eval_pairing: PairingPolicy::MeanFrame,
            seed: 0,
            splits: 5,
            train_fraction: 0.8,
            val_fraction: 0.0,
            cnn: CnnConfig::standard(2),
            imaging: ImagingConfig::default(),
            svm_c: 1.0,
            svm_epochs: 50,
            prewitt: false,
            augment: AugmentConfig {
                n_jitter: 0,
                n_scale: 0,
                ..AugmentConfig::default()
            },
            scope: GatingScope::Batch,
            boost: 1.0,
            stages: vec![0, 1, 2, 3],
            chunk: 64,
            deterministic: true,
            threads: 1,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value for '{key}': '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad value for '{key}': '{value}'"))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items
        .into_iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(&read_text(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::parse(path, msg),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", i + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "synth_seed" => self.synth.seed = parse(key, v)?,
            "synth_classes" => self.synth.n_classes = parse(key, v)?,
            "synth_per_class" => self.synth.n_per_class = parse(key, v)?,
            "synth_noise" => self.synth.noise = parse(key, v)?,
            "synth_frames" => self.synth.frames = parse(key, v)?,
            "synth_depth_size" => self.synth.depth_size = parse(key, v)?,
            "synth_inertial_len" => self.synth.inertial_len = parse(key, v)?,
            "synth_rate" => self.synth.sample_rate = parse(key, v)?,
            "mode" | "modes" => {
                let modes: Vec<Variant> = parse_list(key, v)?;
                if modes.is_empty() {
                    return Err(Error::Config(format!("'{key}' is empty")));
                }
                self.modes = modes;
            }
            "pairing" => self.pairing = parse(key, v)?,
            "eval_pairing" => self.eval_pairing = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "splits" => self.splits = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "val_fraction" => self.val_fraction = parse(key, v)?,
            "epochs" => self.cnn.epochs = parse(key, v)?,
            "learning_rate" => self.cnn.learning_rate = parse(key, v)?,
            "momentum" => self.cnn.momentum = parse(key, v)?,
            "l2" => self.cnn.l2 = parse(key, v)?,
            "batch_size" => self.cnn.batch_size = parse(key, v)?,
            "patience" => self.cnn.patience = parse(key, v)?,
            "fc_width" => self.cnn.fc_width = parse(key, v)?,
            "filters" => {
                let filters: Vec<usize> = parse_list(key, v)?;
                let mut convs: Vec<ConvSpec> = filters
                    .iter()
                    .enumerate()
                    .map(|(i, &f)| {
                        let old = self.cnn.convs.get(i).or(self.cnn.convs.last());
                        ConvSpec {
                            filters: f,
                            kernel: old.map_or(5, |c| c.kernel),
                            pool_after: old.is_some_and(|c| c.pool_after),
                        }
                    })
                    .collect();
                convs.truncate(filters.len());
                self.cnn.convs = convs;
            }
            "kernel" => {
                let k: usize = parse(key, v)?;
                self.cnn.convs.iter_mut().for_each(|c| c.kernel = k);
            }
            "pool_after" => {
                let flags = v
                    .split(',')
                    .map(|s| parse_bool(key, s.trim()))
                    .collect::<Result<Vec<_>>>()?;
                if flags.len() != self.cnn.convs.len() {
                    return Err(Error::Config(format!(
                        "'pool_after' lists {} flags for {} convolutions",
                        flags.len(),
                        self.cnn.convs.len()
                    )));
                }
                for (c, f) in self.cnn.convs.iter_mut().zip(flags) {
                    c.pool_after = f;
                }
            }
            "padding" => {
                self.cnn.padding = match v {
                    "valid" => Padding::Valid,
                    "same" => Padding::Same,
                    _ => return Err(Error::Config(format!("bad value for 'padding': '{v}'"))),
                }
            }
            "pooling" => {
                self.cnn.pooling = match v {
                    "max" => Pooling::Max,
                    "average" => Pooling::Average,
                    _ => return Err(Error::Config(format!("bad value for 'pooling': '{v}'"))),
                }
            }
            "image_size" => {
                self.imaging.size = parse(key, v)?;
                self.cnn.input_size = self.imaging.size;
            }
            "window" => self.imaging.window = parse(key, v)?,
            "overlap" => self.imaging.overlap = parse(key, v)?,
            "interpolation" => {
                self.imaging.interpolation = match v {
                    "bilinear" => Interpolation::Bilinear,
                    "nearest" => Interpolation::Nearest,
                    _ => return Err(Error::Config(format!("bad value for 'interpolation': '{v}'"))),
                }
            }
            "svm_c" => self.svm_c = parse(key, v)?,
            "svm_epochs" => self.svm_epochs = parse(key, v)?,
            "prewitt" => self.prewitt = parse_bool(key, v)?,
            "augment_jitter" => self.augment.n_jitter = parse(key, v)?,
            "augment_scale" => self.augment.n_scale = parse(key, v)?,
            "jitter_sigma" => self.augment.jitter_sigma = parse(key, v)?,
            "scale_min" => self.augment.scale_range.0 = parse(key, v)?,
            "scale_max" => self.augment.scale_range.1 = parse(key, v)?,
            "scope" => self.scope = parse(key, v)?,
            "boost" => self.boost = parse(key, v)?,
            "stages" => {
                let names: Vec<String> = parse_list(key, v)?;
                self.stages = names
                    .iter()
                    .map(|n| {
                        STAGE_NAMES
                            .iter()
                            .position(|s| s == n)
                            .ok_or_else(|| Error::Config(format!("unknown stage '{n}'")))
                    })
                    .collect::<Result<_>>()?;
            }
            "chunk" => self.chunk = parse(key, v)?,
            "deterministic" => self.deterministic = parse_bool(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order; feeding the
    /// result back through [`apply_text`](Self::apply_text) reproduces `self`.
    pub fn to_kv(&self) -> String {
        let bools = |b: bool| if b { "true" } else { "false" };
        let c = &self.cnn;
        let pairs: Vec<(&str, String)> = vec![
            ("data_dir", self.data_dir.as_ref().map_or(String::new(), |p| p.display().to_string())),
            ("synth_seed", self.synth.seed.to_string()),
            ("synth_classes", self.synth.n_classes.to_string()),
            ("synth_per_class", self.synth.n_per_class.to_string()),
            ("synth_noise", self.synth.noise.to_string()),
            ("synth_frames", self.synth.frames.to_string()),
            ("synth_depth_size", self.synth.depth_size.to_string()),
            ("synth_inertial_len", self.synth.inertial_len.to_string()),
            ("synth_rate", self.synth.sample_rate.to_string()),
            ("modes", join(&self.modes)),
            ("pairing", self.pairing.to_string()),
            ("eval_pairing", self.eval_pairing.to_string()),
            ("seed", self.seed.to_string()),
            ("splits", self.splits.to_string()),
            ("train_fraction", self.train_fraction.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("epochs", c.epochs.to_string()),
            ("learning_rate", c.learning_rate.to_string()),
            ("momentum", c.momentum.to_string()),
            ("l2", c.l2.to_string()),
            ("batch_size", c.batch_size.to_string()),
            ("patience", c.patience.to_string()),
            ("fc_width", c.fc_width.to_string()),
            ("filters", join(c.convs.iter().map(|s| s.filters))),
            ("kernel", c.convs.first().map_or(5, |s| s.kernel).to_string()),
            ("pool_after", join(c.convs.iter().map(|s| bools(s.pool_after)))),
            ("padding", if c.padding == Padding::Same { "same" } else { "valid" }.to_string()),
            ("pooling", if c.pooling == Pooling::Average { "average" } else { "max" }.to_string()),
            ("image_size", self.imaging.size.to_string()),
            ("window", self.imaging.window.to_string()),
            ("overlap", self.imaging.overlap.to_string()),
            (
                "interpolation",
                if self.imaging.interpolation == Interpolation::Nearest { "nearest" } else { "bilinear" }.to_string(),
            ),
            ("svm_c", self.svm_c.to_string()),
            ("svm_epochs", self.svm_epochs.to_string()),
            ("prewitt", bools(self.prewitt).to_string()),
            ("augment_jitter", self.augment.n_jitter.to_string()),
            ("augment_scale", self.augment.n_scale.to_string()),
            ("jitter_sigma", self.augment.jitter_sigma.to_string()),
            ("scale_min", self.augment.scale_range.0.to_string()),
            ("scale_max", self.augment.scale_range.1.to_string()),
            ("scope", self.scope.name().to_string()),
            ("boost", self.boost.to_string()),
            ("stages", join(self.stages.iter().map(|&s| STAGE_NAMES[s]))),
            ("chunk", self.chunk.to_string()),
            ("deterministic", bools(self.deterministic).to_string()),
            ("threads", self.threads.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn n_modalities(&self) -> usize {
        if self.prewitt {
            3
        } else {
            2
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.splits == 0 {
            return bad("splits must be at least 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        if !(self.svm_c > 0.0) || self.svm_epochs == 0 {
            return bad("svm_c must be positive and svm_epochs at least 1".into());
        }
        if self.stages.is_empty() {
            return bad("no stages selected".into());
        }
        if self.threads == 0 {
            return bad("threads must be at least 1".into());
        }
        for m in &self.modes {
            if let Variant::Unimodal(i) = m {
                if *i >= self.n_modalities() {
                    return bad(format!("mode '{m}' needs prewitt=true"));
                }
            }
        }
        Ok(())
    }
}
