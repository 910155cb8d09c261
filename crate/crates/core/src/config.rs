//! The run configuration file.
//!
//! A TOML document; every key not given falls back to the mode's defaults.
//!
//! ```toml
//! mode = "image"
//! input = "photo.png"
//! out = "edits/photo"
//! seed = 0
//!
//! [prompts]
//! target = "a cake made of ice"
//! roi = "cake"
//!
//! [backend]
//! kind = "synthetic"
//! seed = 1
//!
//! [train]
//! total_steps = 500
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::pretrained::PretrainedSpec;
use crate::backend::RelevancyOptions;
use crate::error::{Error, Result};
use crate::image::{BitDepth, TextBundle};
use crate::trainer::TrainConfig;
use crate::video::{Layer, SegmentConfig, VideoTrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Image,
    Video,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelection {
    Fg,
    Bg,
    Both,
}

impl LayerSelection {
    /// Layers in training order.
    pub fn layers(self) -> Vec<Layer> {
        match self {
            LayerSelection::Fg => vec![Layer::Foreground],
            LayerSelection::Bg => vec![Layer::Background],
            LayerSelection::Both => vec![Layer::Foreground, Layer::Background],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompts {
    pub target: String,
    /// Further targets sampled alongside `target` during training.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub roi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screen_subject: Option<String>,
}

impl Prompts {
    pub fn bundle(&self) -> Result<TextBundle> {
        let mut targets = vec![self.target.clone()];
        targets.extend(self.extra_targets.iter().cloned());
        let mut b = TextBundle::with_targets(targets)?;
        if let Some(r) = &self.roi {
            b = b.with_roi(r.clone())?;
        }
        if let Some(s) = &self.screen_subject {
            b = b.with_screen_subject(s.clone())?;
        }
        Ok(b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    /// Randomly initialized tiny model; deterministic per seed.
    Synthetic {
        #[serde(default)]
        seed: u64,
    },
    Pretrained(PretrainedSpec),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Pretrained(PretrainedSpec::vit_b32())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoOptions {
    pub segment: SegmentConfig,
    pub atlas_period: usize,
    pub background_downscale: usize,
    pub frame_pass: bool,
}

impl Default for VideoOptions {
    fn default() -> Self {
        let v = VideoTrainConfig::default();
        Self {
            segment: v.segment,
            atlas_period: v.atlas_period,
            background_downscale: v.background_downscale,
            frame_pass: v.frame_pass,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub package: Option<PathBuf>,
    pub layer: LayerSelection,
    pub out: PathBuf,
    /// 8 or 16.
    pub edit_bit_depth: u8,
    pub prompts: Prompts,
    pub backend: BackendSpec,
    pub relevancy: RelevancyOptions,
    pub train: TrainConfig,
    pub video: VideoOptions,
}

/// Keys whose tables replace the default wholesale instead of merging.
const REPLACED: [&str; 1] = ["backend"];

/// Recursively overlays `over` onto `base`.
pub fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    merge_at(base, over, true);
}

fn merge_at(base: &mut toml::Table, over: toml::Table, root: bool) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !(root && REPLACED.contains(&k.as_str())) => {
                merge_at(b, o, false)
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Everything a config may omit, for `mode`.
pub fn defaults_table(mode: RunMode) -> toml::Table {
    let train = match mode {
        RunMode::Image => TrainConfig::image(),
        RunMode::Video => TrainConfig::video(),
    };
    let mut t = toml::Table::new();
    let put = |t: &mut toml::Table, k: &str, v: toml::Value| {
        t.insert(k.to_string(), v);
    };
    let mode_name = match mode {
        RunMode::Image => "image",
        RunMode::Video => "video",
    };
    put(&mut t, "mode", toml::Value::String(mode_name.into()));
    put(&mut t, "seed", toml::Value::Integer(0));
    put(&mut t, "layer", toml::Value::String("fg".into()));
    put(&mut t, "edit_bit_depth", toml::Value::Integer(8));
    put(&mut t, "backend", ser(&BackendSpec::default()));
    put(&mut t, "relevancy", ser(&RelevancyOptions::default()));
    let mut train = match ser(&train) {
        toml::Value::Table(tt) => tt,
        _ => unreachable!("struct serializes to a table"),
    };
    train.remove("seed");
    put(&mut t, "train", toml::Value::Table(train));
    put(&mut t, "video", ser(&VideoOptions::default()));
    t
}

fn ser<T: Serialize>(v: &T) -> toml::Value {
    toml::Value::try_from(v).expect("defaults serialize to toml")
}

fn field_error(e: serde_path_to_error::Error<toml::de::Error>) -> Error {
    let path = e.path().to_string();
    let inner = e.into_inner();
    Error::config(if path == "." { String::new() } else { path }, inner.message().to_string())
}

/// Applies defaults, rejects unknown keys and checks every field.
pub fn validate_config(raw: toml::Table) -> Result<RunConfig> {
    let mode = match raw.get("mode") {
        None => RunMode::Image,
        Some(toml::Value::String(s)) if s == "image" => RunMode::Image,
        Some(toml::Value::String(s)) if s == "video" => RunMode::Video,
        Some(other) => return Err(Error::config("mode", format!("expected \"image\" or \"video\", got {other}"))),
    };
    if raw.get("train").and_then(|t| t.get("seed")).is_some() {
        return Err(Error::config("train.seed", "set the top-level `seed` instead"));
    }
    let mut table = defaults_table(mode);
    merge_tables(&mut table, raw);
    let mut cfg: RunConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(field_error)?;
    cfg.train.seed = cfg.seed;
    cfg.check()?;
    Ok(cfg)
}

/// Parses and validates a config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let raw: toml::Table = toml::from_str(text).map_err(|e| Error::config("", e.to_string()))?;
    validate_config(raw)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

impl RunConfig {
    fn check(&self) -> Result<()> {
        match self.mode {
            RunMode::Image => match &self.input {
                None => return Err(Error::config("input", "required in image mode")),
                Some(p) if !p.is_file() => {
                    return Err(Error::config("input", format!("{} is not a file", p.display())))
                }
                _ => {}
            },
            RunMode::Video => match &self.package {
                None => return Err(Error::config("package", "required in video mode")),
                Some(p) if !p.is_dir() => {
                    return Err(Error::config("package", format!("{} is not a directory", p.display())))
                }
                _ => {}
            },
        }
        if self.out.as_os_str().is_empty() {
            return Err(Error::config("out", "must not be empty"));
        }
        if !matches!(self.edit_bit_depth, 8 | 16) {
            return Err(Error::config("edit_bit_depth", format!("must be 8 or 16, got {}", self.edit_bit_depth)));
        }
        self.prompts
            .bundle()
            .map_err(|e| Error::config("prompts", e.to_string()))?;
        self.train.validate().map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("train.{path}"), message),
            other => other,
        })?;
        // train already passed, so any remaining error is video-specific
        self.video_train_config().validate().map_err(|e| match e {
            Error::Config { path, message } => Error::config(format!("video.{path}"), message),
            other => other,
        })
    }

    /// Turns off a loss term, or input augmentation with `"augmentation"`.
    pub fn disable(&mut self, term: &str) -> Result<()> {
        if term == "augmentation" {
            self.train.augmentation = self.train.augmentation.clone().without_input_augmentation();
            return Ok(());
        }
        self.train
            .toggles
            .disable(term)
            .map_err(|e| Error::config("disable", e.to_string()))
    }

    pub fn bit_depth(&self) -> BitDepth {
        if self.edit_bit_depth == 16 {
            BitDepth::Sixteen
        } else {
            BitDepth::Eight
        }
    }

    pub fn video_train_config(&self) -> VideoTrainConfig {
        VideoTrainConfig {
            train: self.train.clone(),
            segment: self.video.segment,
            atlas_period: self.video.atlas_period,
            background_downscale: self.video.background_downscale,
            frame_pass: self.video.frame_pass,
        }
    }

    /// The resolved config as a TOML document that reproduces this run.
    pub fn to_toml(&self) -> String {
        let mut v = toml::Table::try_from(self).expect("config serializes");
        if let Some(toml::Value::Table(t)) = v.get_mut("train") {
            t.remove("seed");
        }
        toml::to_string_pretty(&v).expect("table serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_input(extra: &str) -> (tempfile::TempDir, String) {
        with_input_top("", extra)
    }

    fn with_input_top(top: &str, extra: &str) -> (tempfile::TempDir, String) {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("in.png");
        std::fs::write(&img, b"x").unwrap();
        let text = format!(
            "{top}input = {:?}\nout = {:?}\n[prompts]\ntarget = \"ice\"\n{extra}",
            img.to_str().unwrap(),
            dir.path().join("out").to_str().unwrap()
        );
        (dir, text)
    }

    #[test]
    fn empty_image_config_gets_reference_defaults() {
        let (_d, text) = with_input("");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.mode, RunMode::Image);
        assert_eq!(cfg.train, TrainConfig { seed: 0, ..TrainConfig::image() });
        assert_eq!(cfg.backend, BackendSpec::default());
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let (_d, text) = with_input("[train.weights]\nlambda_q = 1.0\n");
        match parse_config(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.weights.lambda_q"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_weight_is_rejected() {
        let (_d, text) = with_input("[train.weights]\nlambda_s = -1.0\n");
        match parse_config(&text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "train.weights.lambda_s"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn video_mode_requires_a_package() {
        let text = "mode = \"video\"\nout = \"o\"\n[prompts]\ntarget = \"x\"\n";
        match parse_config(text) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "package"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn partial_backend_table_replaces_default() {
        let (_d, text) = with_input("[backend]\nkind = \"synthetic\"\nseed = 4\n");
        assert_eq!(parse_config(&text).unwrap().backend, BackendSpec::Synthetic { seed: 4 });
    }

    #[test]
    fn resolved_config_round_trips() {
        let (_d, text) = with_input_top("seed = 9\n", "[backend]\nkind = \"synthetic\"\n");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(parse_config(&cfg.to_toml()).unwrap(), cfg);
    }
}
