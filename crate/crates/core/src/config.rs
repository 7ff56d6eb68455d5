//! Run configuration in a flat `key = value` text format.
//!
//! Grammar: one `key = value` per line; `#` starts a comment; blank lines
//! are ignored; unknown keys are errors. Lists are comma separated.

use crate::synth::{Orientation, SynthSpec};
use crate::tape::PoolMode;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value {value:?} for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    /// Part branch removed: no LSTM, no part head, no `L_p`.
    WoPart,
    /// The part network sees the whole image instead of the attended crop.
    WoAttend,
}

impl FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Self::Full),
            "wo-part" => Ok(Self::WoPart),
            "wo-attend" => Ok(Self::WoAttend),
            _ => Err("expected full, wo-part or wo-attend".into()),
        }
    }
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WoPart => "wo-part",
            Self::WoAttend => "wo-attend",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FinalHeadMode {
    /// Final classifier trained alongside the three branch losses.
    Joint,
    /// Final classifier fitted on frozen descriptors after the main run.
    Post,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub final_head_mode: FinalHeadMode,
    /// Head-only epochs in [`FinalHeadMode::Post`].
    pub post_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            tau: 0.1,
            lr0: 0.001,
            momentum: 0.9,
            decay_every: 20,
            decay_factor: 0.1,
            epochs: 60,
            batch_size: 16,
            seed: 0,
            final_head_mode: FinalHeadMode::Joint,
            post_epochs: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub crop_size: usize,
    pub channels: Vec<usize>,
    pub seq_len: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub stages: usize,
    pub ablation: Ablation,
    pub gap_mode: PoolMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            crop_size: 64,
            channels: vec![16, 32, 64, 64],
            seq_len: 8,
            hidden: 64,
            num_classes: 10,
            stages: 1,
            ablation: Ablation::Full,
            gap_mode: PoolMode::Sum,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthSpec,
    /// Directory dataset to use instead of the generator.
    pub dataset: Option<PathBuf>,
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.parse().map_err(|e: V::Err| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn check(ok: bool, key: &str, value: &str, reason: &str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::InvalidValue {
            key: key.into(),
            value: value.into(),
            reason: reason.into(),
        })
    }
}

impl RunConfig {
    /// Defaults overridden by `text`.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: kv.to_string(),
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        let m = &mut self.model;
        let s = &mut self.synth;
        let finite = |x: f64| x.is_finite();
        match key {
            "seed" => {
                t.seed = parse(key, value)?;
                s.seed = t.seed;
            }
            "lambda1" | "lambda2" | "lambda3" => {
                let x: f64 = parse(key, value)?;
                check(finite(x) && x >= 0.0, key, value, "must be finite and non-negative")?;
                match key {
                    "lambda1" => t.lambda1 = x,
                    "lambda2" => t.lambda2 = x,
                    _ => t.lambda3 = x,
                }
            }
            "tau" => {
                t.tau = parse(key, value)?;
                check((0.0..=1.0).contains(&t.tau), key, value, "must lie in [0, 1]")?;
            }
            "lr0" => {
                t.lr0 = parse(key, value)?;
                check(finite(t.lr0) && t.lr0 > 0.0, key, value, "must be positive")?;
            }
            "momentum" => {
                t.momentum = parse(key, value)?;
                check((0.0..1.0).contains(&t.momentum), key, value, "must lie in [0, 1)")?;
            }
            "decay_every" => {
                t.decay_every = parse(key, value)?;
                check(t.decay_every > 0, key, value, "must be positive")?;
            }
            "decay_factor" => {
                t.decay_factor = parse(key, value)?;
                check(finite(t.decay_factor) && t.decay_factor > 0.0, key, value, "must be positive")?;
            }
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => {
                t.batch_size = parse(key, value)?;
                check(t.batch_size > 0, key, value, "must be positive")?;
            }
            "final_head_mode" => {
                t.final_head_mode = match value {
                    "joint" => FinalHeadMode::Joint,
                    "post" => FinalHeadMode::Post,
                    _ => return check(false, key, value, "expected joint or post"),
                }
            }
            "post_epochs" => t.post_epochs = parse(key, value)?,
            "image_size" => {
                m.image_size = parse(key, value)?;
                s.image_size = m.image_size;
            }
            "crop_size" => m.crop_size = parse(key, value)?,
            "channels" => {
                m.channels = value
                    .split(',')
                    .map(|c| parse(key, c.trim()))
                    .collect::<Result<_, _>>()?;
                check(
                    !m.channels.is_empty() && m.channels.iter().all(|&c| c > 0),
                    key,
                    value,
                    "need at least one positive channel count",
                )?;
            }
            "seq_len" => m.seq_len = parse(key, value)?,
            "hidden" => {
                m.hidden = parse(key, value)?;
                check(m.hidden > 0 && m.hidden.is_multiple_of(2), key, value, "must be positive and even")?;
            }
            "num_classes" => {
                m.num_classes = parse(key, value)?;
                s.num_classes = m.num_classes;
            }
            "stages" => {
                m.stages = parse(key, value)?;
                check(m.stages >= 1, key, value, "need at least one stage")?;
            }
            "ablation" => {
                m.ablation = value.parse().map_err(|reason| ConfigError::InvalidValue {
                    key: key.into(),
                    value: value.into(),
                    reason,
                })?
            }
            "gap_mode" => {
                m.gap_mode = match value {
                    "sum" => PoolMode::Sum,
                    "mean" => PoolMode::Mean,
                    _ => return check(false, key, value, "expected sum or mean"),
                }
            }
            "train_per_class" => s.train_per_class = parse(key, value)?,
            "test_per_class" => s.test_per_class = parse(key, value)?,
            "parts_min" => s.parts_min = parse(key, value)?,
            "parts_max" => s.parts_max = parse(key, value)?,
            "subtlety" => s.subtlety = parse(key, value)?,
            "clutter" => s.clutter = parse(key, value)?,
            "occlusion" => s.occlusion = parse(key, value)?,
            "orientation" => {
                s.orientation = match value {
                    "horizontal" => Orientation::Horizontal,
                    "vertical" => Orientation::Vertical,
                    _ => return check(false, key, value, "expected horizontal or vertical"),
                }
            }
            "dataset" => {
                self.dataset = if value.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(value))
                }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let s = &self.synth;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").expect("string write");
        kv("seed", t.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr0", format!("{:?}", t.lr0));
        kv("momentum", format!("{:?}", t.momentum));
        kv("decay_every", t.decay_every.to_string());
        kv("decay_factor", format!("{:?}", t.decay_factor));
        kv("lambda1", format!("{:?}", t.lambda1));
        kv("lambda2", format!("{:?}", t.lambda2));
        kv("lambda3", format!("{:?}", t.lambda3));
        kv("tau", format!("{:?}", t.tau));
        kv(
            "final_head_mode",
            match t.final_head_mode {
                FinalHeadMode::Joint => "joint",
                FinalHeadMode::Post => "post",
            }
            .into(),
        );
        kv("post_epochs", t.post_epochs.to_string());
        kv("image_size", m.image_size.to_string());
        kv("crop_size", m.crop_size.to_string());
        kv(
            "channels",
            m.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        kv("seq_len", m.seq_len.to_string());
        kv("hidden", m.hidden.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("stages", m.stages.to_string());
        kv("ablation", m.ablation.as_str().into());
        kv(
            "gap_mode",
            match m.gap_mode {
                PoolMode::Sum => "sum",
                PoolMode::Mean => "mean",
            }
            .into(),
        );
        kv("train_per_class", s.train_per_class.to_string());
        kv("test_per_class", s.test_per_class.to_string());
        kv("parts_min", s.parts_min.to_string());
        kv("parts_max", s.parts_max.to_string());
        kv("subtlety", s.subtlety.to_string());
        kv("clutter", s.clutter.to_string());
        kv("occlusion", format!("{:?}", s.occlusion));
        kv(
            "orientation",
            match s.orientation {
                Orientation::Horizontal => "horizontal",
                Orientation::Vertical => "vertical",
            }
            .into(),
        );
        kv(
            "dataset",
            self.dataset
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_settings() {
        let t = TrainConfig::default();
        assert_eq!((t.lambda1, t.lambda2, t.lambda3), (1.0, 1.0, 1.0));
        assert_eq!(t.tau, 0.1);
        assert_eq!(t.momentum, 0.9);
        assert_eq!(t.lr0, 0.001);
        assert_eq!(t.decay_factor, 0.1);
    }

    #[test]
    fn comments_blank_lines_and_overrides() {
        let mut c = RunConfig::from_text("# header\n\nepochs = 3  # short\nablation=wo-part\n").unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.model.ablation, Ablation::WoPart);
        c.apply_override("channels=4, 8").unwrap();
        assert_eq!(c.model.channels, vec![4, 8]);
        c.apply_override("seed=9").unwrap();
        assert_eq!((c.train.seed, c.synth.seed), (9, 9));
    }

    #[test]
    fn missing_keys_take_defaults() {
        assert_eq!(RunConfig::from_text("").unwrap(), RunConfig::default());
    }

    #[test]
    fn errors_are_specific() {
        assert!(matches!(
            RunConfig::from_text("bogus = 1"),
            Err(ConfigError::UnknownKey(k)) if k == "bogus"
        ));
        assert!(matches!(RunConfig::from_text("epochs"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(
            RunConfig::from_text("momentum = 1.5"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(RunConfig::from_text("hidden = 7").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 4\nlr0 = 0.0123\nstages = 2\ngap_mode = mean\ndataset = /tmp/x").unwrap();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }
}
