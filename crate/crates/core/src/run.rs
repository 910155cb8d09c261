//! End-to-end runs: build the backend, train, and write the output bundle.
//!
//! Outputs are written to a sibling temporary directory and renamed into
//! place once complete, so the final path never holds a partial bundle.
//! A `<out>.lock` file guards the output path for the run's duration.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::Serialize;

use crate::backend::{pretrained, ClipBackend, EmbeddingBackend};
use crate::config::{BackendSpec, RunConfig, RunMode};
use crate::error::{Error, Result};
use crate::image::{self, BitDepth};
use crate::trainer::{self, TrainRunRecord};
use crate::video::{self, AtlasEdit, AtlasPackage, Layer};

pub const EDIT_LAYER_FILE: &str = "edit_layer.png";
pub const COMPOSITE_FILE: &str = "composite.png";
pub const RECORD_FILE: &str = "run_record.json";
pub const CHECKPOINT_FILE: &str = "generator.safetensors";
pub const CONFIG_FILE: &str = "config.toml";
pub const FRAMES_DIR: &str = "frames";

/// Paths of a finished run, all inside `dir`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputBundle {
    pub dir: PathBuf,
    pub edit_layers: Vec<PathBuf>,
    pub composites: Vec<PathBuf>,
    pub record: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

/// Builds the embedding backend a config asks for. Failures surface as
/// [`Error::Backend`].
pub fn build_backend(cfg: &RunConfig) -> Result<Box<dyn EmbeddingBackend>> {
    let backend = match &cfg.backend {
        BackendSpec::Synthetic { seed } => ClipBackend::synthetic(*seed),
        BackendSpec::Pretrained(spec) => pretrained::load(spec, &pretrained::cache_dir(), DType::F32),
    }
    .map_err(|e| match e {
        Error::Backend(_) => e,
        other => Error::Backend(other.to_string()),
    })?;
    Ok(Box::new(backend.with_relevancy_options(cfg.relevancy)))
}

struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(out: &Path) -> Result<Self> {
        let path = sibling(out, ".lock")?;
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                let msg = if e.kind() == std::io::ErrorKind::AlreadyExists {
                    std::io::Error::new(e.kind(), "output is locked by another run")
                } else {
                    e
                };
                Error::io(&path, msg)
            })?;
        Ok(Self(path))
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

/// `<parent>/<name><suffix>` for the output path.
fn sibling(out: &Path, suffix: &str) -> Result<PathBuf> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::config("out", format!("{} has no final component", out.display())))?;
    let mut s = name.to_os_string();
    s.push(suffix);
    Ok(out.with_file_name(s))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Runs `write` against a fresh staging directory, then moves it to `out`.
fn write_atomically(out: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let _lock = OutputLock::acquire(out)?;
    let staging = sibling(out, &format!(".tmp-{}", std::process::id()))?;
    if staging.exists() {
        std::fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    create_dir(&staging)?;
    if let Err(e) = write(&staging) {
        let _ = std::fs::remove_dir_all(&staging);
        return Err(e);
    }
    let old = sibling(out, &format!(".old-{}", std::process::id()))?;
    let replaced = out.exists();
    if replaced {
        std::fs::rename(out, &old).map_err(|e| Error::io(out, e))?;
    }
    std::fs::rename(&staging, out).map_err(|e| Error::io(out, e))?;
    if replaced {
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("record serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds the configured backend and dispatches on the mode.
pub fn run(cfg: &RunConfig) -> Result<OutputBundle> {
    let backend = build_backend(cfg)?;
    match cfg.mode {
        RunMode::Image => run_edit_image(cfg, backend.as_ref()),
        RunMode::Video => run_edit_video(cfg, backend.as_ref()),
    }
}

/// Trains on the input image and writes the edit layer, the composite, the
/// run record and the generator checkpoint.
pub fn run_edit_image(cfg: &RunConfig, backend: &dyn EmbeddingBackend) -> Result<OutputBundle> {
    let input = cfg
        .input
        .as_deref()
        .ok_or_else(|| Error::config("input", "required in image mode"))?;
    let src = image::load_image(input)?;
    let bundle = cfg.prompts.bundle()?;
    let mut out = trainer::train_image(&src, &bundle, &cfg.train, backend, None)?;
    let composite = image::composite(&out.layer, &src)?;
    out.record.checkpoints = vec![PathBuf::from(CHECKPOINT_FILE)];
    write_atomically(&cfg.out, |dir| {
        image::save_edit_layer(&dir.join(EDIT_LAYER_FILE), &out.layer, cfg.bit_depth())?;
        image::save_image(&dir.join(COMPOSITE_FILE), &composite, cfg.bit_depth())?;
        trainer::checkpoint(&out.generator, Some(&out.record), &dir.join(CHECKPOINT_FILE))?;
        write_json(&dir.join(RECORD_FILE), &out.record)?;
        write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())
    })?;
    Ok(OutputBundle {
        dir: cfg.out.clone(),
        edit_layers: vec![cfg.out.join(EDIT_LAYER_FILE)],
        composites: vec![cfg.out.join(COMPOSITE_FILE)],
        record: cfg.out.join(RECORD_FILE),
        checkpoints: vec![cfg.out.join(CHECKPOINT_FILE)],
    })
}

pub fn frame_file(t: usize) -> String {
    format!("{FRAMES_DIR}/frame_{t:05}.png")
}

/// Trains one generator per selected layer, foreground first, then
/// renders every frame. Writes `frames/`, one atlas edit layer, checkpoint
/// and record entry per layer.
pub fn run_edit_video(cfg: &RunConfig, backend: &dyn EmbeddingBackend) -> Result<OutputBundle> {
    let dir = cfg
        .package
        .as_deref()
        .ok_or_else(|| Error::config("package", "required in video mode"))?;
    let pkg = AtlasPackage::load(dir)?;
    let bundle = cfg.prompts.bundle()?;
    let mut trained: Vec<(Layer, video::VideoTrainOutput)> = Vec::new();
    for (i, layer) in cfg.layer.layers().into_iter().enumerate() {
        let mut vcfg = cfg.video_train_config();
        vcfg.train.seed = cfg.seed.wrapping_add(i as u64);
        let mut out = video::train_video(&pkg, layer, &bundle, &vcfg, backend)?;
        out.record.checkpoints = vec![PathBuf::from(checkpoint_file(layer))];
        trained.push((layer, out));
    }
    let edit_for = |l: Layer| -> Option<&AtlasEdit> { trained.iter().find(|(x, _)| *x == l).map(|(_, o)| &o.edit) };
    let frames = video::render_video(&pkg, edit_for(Layer::Foreground), edit_for(Layer::Background))?;
    let records: BTreeMap<&str, &TrainRunRecord> = trained.iter().map(|(l, o)| (l.short(), &o.record)).collect();
    write_atomically(&cfg.out, |out| {
        create_dir(&out.join(FRAMES_DIR))?;
        for (t, f) in frames.iter().enumerate() {
            image::save_image(&out.join(frame_file(t)), f, BitDepth::Eight)?;
        }
        for (layer, o) in &trained {
            image::save_edit_layer(&out.join(atlas_edit_file(*layer)), &o.edit.edit, cfg.bit_depth())?;
            trainer::checkpoint(&o.generator, Some(&o.record), &out.join(checkpoint_file(*layer)))?;
        }
        write_json(&out.join(RECORD_FILE), &records)?;
        write_text(&out.join(CONFIG_FILE), &cfg.to_toml())
    })?;
    Ok(OutputBundle {
        dir: cfg.out.clone(),
        edit_layers: trained.iter().map(|(l, _)| cfg.out.join(atlas_edit_file(*l))).collect(),
        composites: (0..frames.len()).map(|t| cfg.out.join(frame_file(t))).collect(),
        record: cfg.out.join(RECORD_FILE),
        checkpoints: trained.iter().map(|(l, _)| cfg.out.join(checkpoint_file(*l))).collect(),
    })
}

pub fn atlas_edit_file(layer: Layer) -> String {
    format!("atlas_edit_{}.png", layer.short())
}

pub fn checkpoint_file(layer: Layer) -> String {
    format!("generator_{}.safetensors", layer.short())
}
