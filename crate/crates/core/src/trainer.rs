//! The optimization loop for single images, schedules, and checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{EmbeddingBackend, RelevancyMap};
use crate::dataset::{self, AugmentationConfig, TextTemplateBank, TrainRng, ViewPlan};
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, GeneratorState, Mode};
use crate::image::{self, EditLayer, Image, Rgb, TextBundle, GREEN};
use crate::losses::{self, LossReport, LossToggles, LossWeights, TermTensors};
use crate::nn;
use crate::optim::{self, Madgrad, MadgradConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BootstrapSchedule {
    /// From `bootstrap_w0` at step 0 down to 0 at `total_steps`.
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub lr_decay_gamma: f64,
    pub lr_floor: f64,
    pub total_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub toggles: LossToggles,
    pub augmentation: AugmentationConfig,
    pub generator: GeneratorConfig,
    pub bootstrap_schedule: BootstrapSchedule,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    /// Internal examples whose losses are summed per optimizer step.
    pub grad_accumulation: usize,
    /// Background color of the screen term.
    pub green: Rgb,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::image()
    }
}

impl TrainConfig {
    pub fn image() -> Self {
        Self {
            lr0: 2.5e-3,
            weight_decay: 0.01,
            momentum: 0.9,
            lr_decay_gamma: 0.99,
            lr_floor: 1e-5,
            total_steps: 1000,
            seed: 0,
            weights: LossWeights::image(),
            toggles: LossToggles::default(),
            augmentation: AugmentationConfig::image(),
            generator: GeneratorConfig::default(),
            bootstrap_schedule: BootstrapSchedule::Linear,
            grad_clip: None,
            grad_accumulation: 1,
            green: GREEN,
        }
    }

    pub fn video() -> Self {
        Self {
            lr_decay_gamma: 0.999,
            total_steps: 3000,
            weights: LossWeights::video(),
            augmentation: AugmentationConfig::video(),
            bootstrap_schedule: BootstrapSchedule::Constant,
            ..Self::image()
        }
    }

    /// Checks every field; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_floor > 0.0 && self.lr0 > self.lr_floor && self.lr0.is_finite()) {
            return Err(Error::config("lr0", format!("need lr0 > lr_floor > 0, got {} and {}", self.lr0, self.lr_floor)));
        }
        if !(self.lr_decay_gamma > 0.0 && self.lr_decay_gamma <= 1.0) {
            return Err(Error::config("lr_decay_gamma", format!("must lie in (0, 1], got {}", self.lr_decay_gamma)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", format!("must be non-negative, got {}", self.weight_decay)));
        }
        if self.grad_accumulation == 0 {
            return Err(Error::config("grad_accumulation", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("grad_clip", format!("must be positive, got {c}")));
            }
        }
        if self.green.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::config("green", "components must lie in [0, 1]"));
        }
        self.weights
            .validate()
            .map_err(|(f, v)| Error::config(format!("weights.{f}"), format!("must be non-negative, got {v}")))?;
        self.augmentation
            .validate()
            .map_err(|(f, m)| Error::config(format!("augmentation.{f}"), m))?;
        self.generator
            .validate()
            .map_err(|(f, m)| Error::config(format!("generator.{f}"), m))?;
        Ok(())
    }

    fn madgrad(&self) -> MadgradConfig {
        MadgradConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }
}

/// `max(lr_floor, lr0 * gamma^step)`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    (cfg.lr0 * cfg.lr_decay_gamma.powf(step as f64)).max(cfg.lr_floor)
}

pub fn bootstrap_weight_at(step: usize, cfg: &TrainConfig) -> f64 {
    let w0 = cfg.weights.bootstrap_w0;
    match cfg.bootstrap_schedule {
        BootstrapSchedule::Constant => w0,
        BootstrapSchedule::Linear => {
            let t = (step as f64 / cfg.total_steps.max(1) as f64).min(1.0);
            w0 * (1.0 - t)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub bootstrap_weight: f64,
    pub augmented: bool,
    pub losses: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub seed: u64,
    pub model_id: String,
    pub config: TrainConfig,
    pub history: Vec<StepRecord>,
    pub wall_clock_secs: f64,
    #[serde(default)]
    pub checkpoints: Vec<PathBuf>,
}

impl TrainRunRecord {
    /// Total-loss trajectory.
    pub fn totals(&self) -> Vec<f64> {
        self.history.iter().map(|s| s.losses.total).collect()
    }
}

/// Generator, optimizer and schedule shared by the image and video loops.
pub(crate) struct Engine {
    pub generator: GeneratorState,
    opt: Madgrad,
    params: Vec<candle_core::Var>,
    cfg: TrainConfig,
}

impl Engine {
    pub fn new(cfg: &TrainConfig, seed: u64) -> Result<Self> {
        let generator = GeneratorState::build(&cfg.generator, seed)?;
        let params: Vec<_> = generator.parameters().into_iter().map(|(_, v)| v).collect();
        let opt = Madgrad::new(params.clone(), cfg.madgrad())?;
        Ok(Self {
            generator,
            opt,
            params,
            cfg: cfg.clone(),
        })
    }

    /// Backpropagates `total`, takes one optimizer step and logs it.
    pub fn apply(&mut self, step: usize, total: &Tensor, report: LossReport, augmented: bool) -> Result<StepRecord> {
        let lr = lr_at(step, &self.cfg);
        let record = StepRecord {
            step,
            lr,
            bootstrap_weight: bootstrap_weight_at(step, &self.cfg),
            augmented,
            losses: report,
        };
        if !report.is_finite() {
            return Err(Error::NonFinite {
                step,
                report: Box::new(report),
            });
        }
        if total.is_variable() || total.track_op() {
            let mut grads = total.backward()?;
            if let Some(max) = self.cfg.grad_clip {
                optim::clip_grad_norm(&mut grads, &self.params, max)?;
            }
            self.opt.step(&grads, lr)?;
        }
        self.generator.step += 1;
        log::info!("{}", serde_json::to_string(&record).unwrap_or_default());
        Ok(record)
    }
}

/// Final edit layer, trained generator and run record.
pub struct TrainOutput {
    pub generator: GeneratorState,
    pub layer: EditLayer,
    pub record: TrainRunRecord,
}

/// Resolved inputs of the bootstrap term: the relevancy map resampled to
/// the source size.
pub(crate) fn relevancy_plane(map: &RelevancyMap, height: usize, width: usize) -> Result<Tensor> {
    map.to_opacity().resize(height, width)?.to_tensor(DType::F32)
}

/// Everything the per-step loss needs besides the generator output.
pub(crate) struct LossContext<'a> {
    pub backend: &'a dyn EmbeddingBackend,
    pub bundle: &'a TextBundle,
    pub cfg: &'a TrainConfig,
    pub toggles: LossToggles,
    pub roi: Option<Tensor>,
}

impl<'a> LossContext<'a> {
    pub fn new(backend: &'a dyn EmbeddingBackend, bundle: &'a TextBundle, cfg: &'a TrainConfig) -> Result<Self> {
        let mut toggles = cfg.toggles;
        let roi = match bundle.roi() {
            Some(r) => Some(backend.text_embedding(r)?),
            None => {
                if toggles.enable_directional {
                    log::warn!("no region-of-interest prompt; directional term disabled");
                    toggles.enable_directional = false;
                }
                None
            }
        };
        Ok(Self {
            backend,
            bundle,
            cfg,
            toggles,
            roi,
        })
    }

    /// Loss terms for one generator input `x` with output `(color, alpha)`.
    /// `relevancy` is the bootstrap target already aligned with `x` and
    /// sized 224x224.
    #[allow(clippy::too_many_arguments)]
    pub fn terms(
        &self,
        x: &Tensor,
        color: &Tensor,
        alpha: &Tensor,
        target: &str,
        text: &str,
        relevancy: Option<&Tensor>,
        rng: &mut TrainRng,
    ) -> Result<TermTensors> {
        let t = &self.toggles;
        let (_, _, h, w) = x.dims4()?;
        let mut terms = TermTensors::default();
        let composite = image::composite_tensor(color, alpha, x)?;
        let need_views = t.enable_composition || t.enable_directional || t.enable_screen;
        let plan = if need_views {
            Some(ViewPlan::sample(h, w, self.cfg.augmentation.clip_view_count, &self.cfg.augmentation, rng))
        } else {
            None
        };
        if let Some(plan) = &plan {
            if t.enable_composition || t.enable_directional {
                let text_emb = self.backend.text_embedding(text)?;
                let out_views = plan.apply_tensor(&composite)?;
                let roi = if t.enable_directional { self.roi.as_ref() } else { None };
                let src_views = if roi.is_some() {
                    plan.apply_tensor(x)?
                } else {
                    out_views.clone()
                };
                let (cos, dir) = losses::composition_terms(self.backend, &out_views, &src_views, &text_emb, roi)?;
                terms.comp_cos = Some(cos);
                terms.comp_dir = dir;
            }
            if t.enable_screen {
                let prompt = self.bundle.screen_prompt_for(target);
                let screen_text = self.backend.text_embedding(&prompt)?;
                let cv = plan.apply_tensor(color)?;
                let av = plan.apply_tensor(alpha)?;
                terms.screen = Some(losses::screen_term(self.backend, &cv, &av, self.cfg.green, &screen_text)?);
            }
        }
        if t.enable_structure {
            let (sh, sw) = image::shortest_side_dims(h, w, self.cfg.augmentation.clip_size);
            let src = nn::resize_bilinear(x, sh, sw)?;
            let out = nn::resize_bilinear(&composite, sh, sw)?;
            terms.structure = Some(losses::structure_term(self.backend, &src, &out)?);
        }
        if t.enable_sparsity {
            let (l1, l0) = losses::sparsity_terms(alpha)?;
            terms.sparsity_l1 = Some(l1);
            terms.sparsity_l0 = Some(l0);
        }
        if let (true, Some(r)) = (t.enable_bootstrap, relevancy) {
            terms.bootstrap = Some(losses::bootstrap_term(alpha, r)?);
        }
        Ok(terms)
    }
}

/// Trains a generator on `src` for `cfg.total_steps` steps.
///
/// The bootstrap target is `relevancy` when given, otherwise the backend's
/// relevancy map for the region-of-interest prompt. Without either the
/// bootstrap term is disabled.
pub fn train_image(
    src: &Image,
    bundle: &TextBundle,
    cfg: &TrainConfig,
    backend: &dyn EmbeddingBackend,
    relevancy: Option<&RelevancyMap>,
) -> Result<TrainOutput> {
    train_image_with(src, bundle, cfg, backend, relevancy, &TextTemplateBank::default(), &mut |_| {})
}

/// [`train_image`] with a custom template bank and a per-step callback.
pub fn train_image_with(
    src: &Image,
    bundle: &TextBundle,
    cfg: &TrainConfig,
    backend: &dyn EmbeddingBackend,
    relevancy: Option<&RelevancyMap>,
    bank: &TextTemplateBank,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    let started = Instant::now();
    let mut ctx = LossContext::new(backend, bundle, cfg)?;
    let relevancy = if ctx.toggles.enable_bootstrap {
        match (relevancy, bundle.roi()) {
            (Some(map), _) => Some(map.clone()),
            (None, Some(roi)) => Some(backend.relevancy(src, roi)?),
            (None, None) => {
                log::warn!("no region-of-interest prompt or relevancy map; bootstrap term disabled");
                ctx.toggles.enable_bootstrap = false;
                None
            }
        }
    } else {
        None
    };
    let r_plane = relevancy
        .as_ref()
        .map(|m| relevancy_plane(m, src.height(), src.width()))
        .transpose()?;
    let size = crate::backend::relevancy::RELEVANCY_SIZE;

    let mut engine = Engine::new(cfg, cfg.seed)?;
    let mut rng = TrainRng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.total_steps);
    for step in 0..cfg.total_steps {
        let mut total: Option<Tensor> = None;
        let mut parts = Vec::with_capacity(cfg.grad_accumulation);
        let mut augmented = false;
        for micro in 0..cfg.grad_accumulation {
            let index = step * cfg.grad_accumulation + micro + 1;
            let ex = dataset::sample_example(index, src, bundle, &cfg.augmentation, bank, &mut rng)?;
            augmented |= ex.is_augmented;
            let x = ex.image.to_tensor(DType::F32)?;
            let (color, alpha) = engine.generator.forward_tensor(&x, Mode::Train)?;
            let r = match &r_plane {
                Some(p) => Some(nn::resize_bilinear(&ex.transform.apply_tensor(p)?, size, size)?),
                None => None,
            };
            let terms = ctx.terms(&x, &color, &alpha, &ex.target, &ex.text, r.as_ref(), &mut rng)?;
            let (t, report) = terms.assemble(&cfg.weights, bootstrap_weight_at(step, cfg), &ctx.toggles)?;
            parts.push(report);
            total = Some(match total {
                Some(acc) => (acc + t)?,
                None => t,
            });
        }
        let n = parts.len() as f64;
        let report = mean_report(&parts);
        let total = total.expect("at least one micro step").affine(1.0 / n, 0.0)?;
        let record = engine.apply(step, &total, report, augmented)?;
        on_step(&record);
        history.push(record);
    }
    let layer = engine.generator.forward(src)?;
    let record = TrainRunRecord {
        seed: cfg.seed,
        model_id: backend.model_id().to_string(),
        config: cfg.clone(),
        history,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoints: Vec::new(),
    };
    Ok(TrainOutput {
        generator: engine.generator,
        layer,
        record,
    })
}

pub(crate) fn mean_report(parts: &[LossReport]) -> LossReport {
    let n = parts.len().max(1) as f64;
    let mut out = LossReport::default();
    for p in parts {
        out.comp_cos += p.comp_cos / n;
        out.comp_dir += p.comp_dir / n;
        out.screen += p.screen / n;
        out.structure += p.structure / n;
        out.sparsity_l1 += p.sparsity_l1 / n;
        out.sparsity_l0 += p.sparsity_l0 / n;
        out.bootstrap += p.bootstrap / n;
        out.total += p.total / n;
    }
    out
}

// ---- checkpoints ----

const CHECKPOINT_FORMAT: &str = "t2l-generator";
pub const CHECKPOINT_VERSION: u32 = 1;

fn checkpoint_error(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes parameters, batch-norm statistics, the step counter and the
/// generator config to a safetensors file. The metadata carries a SHA-256
/// over all tensor payloads, checked on restore.
pub fn checkpoint(state: &GeneratorState, record: Option<&TrainRunRecord>, path: &Path) -> Result<()> {
    let tensors = state.named_tensors();
    let mut blobs = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let values: Vec<f32> = t.flatten_all()?.to_vec1()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        blobs.push((name.clone(), t.dims().to_vec(), bytes));
    }
    blobs.sort_by(|a, b| a.0.cmp(&b.0));
    let mut hasher = Sha256::new();
    for (name, _, bytes) in &blobs {
        hasher.update(name.as_bytes());
        hasher.update(bytes);
    }
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    meta.insert("version".to_string(), CHECKPOINT_VERSION.to_string());
    meta.insert("step".to_string(), state.step.to_string());
    meta.insert(
        "generator_config".to_string(),
        serde_json::to_string(state.config()).expect("config serializes"),
    );
    meta.insert("payload_sha256".to_string(), hex::encode(hasher.finalize()));
    if let Some(r) = record {
        meta.insert("seed".to_string(), r.seed.to_string());
        meta.insert("model_id".to_string(), r.model_id.clone());
    }
    let views = blobs
        .iter()
        .map(|(name, shape, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| checkpoint_error(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let tmp = path.with_extension("partial");
    safetensors::tensor::serialize_to_file(views, Some(meta), &tmp).map_err(|e| checkpoint_error(path, e.to_string()))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. With `expected`, the stored generator config must
/// match it. Nothing is returned unless every check passes.
pub fn restore(path: &Path, expected: Option<&GeneratorConfig>) -> Result<GeneratorState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| checkpoint_error(path, format!("corrupt file: {e}")))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| checkpoint_error(path, e.to_string()))?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| checkpoint_error(path, "missing metadata"))?;
    let field = |k: &str| meta.get(k).ok_or_else(|| checkpoint_error(path, format!("missing metadata field `{k}`")));
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(checkpoint_error(path, "not a generator checkpoint"));
    }
    let version: u32 = field("version")?.parse().map_err(|_| checkpoint_error(path, "bad version"))?;
    if version != CHECKPOINT_VERSION {
        return Err(checkpoint_error(
            path,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let config: GeneratorConfig =
        serde_json::from_str(field("generator_config")?).map_err(|e| checkpoint_error(path, e.to_string()))?;
    if let Some(want) = expected {
        if *want != config {
            return Err(Error::ConfigMismatch {
                stored: serde_json::to_string(&config).unwrap_or_default(),
                expected: serde_json::to_string(want).unwrap_or_default(),
            });
        }
    }
    let mut names: Vec<&str> = st.names();
    names.sort_unstable();
    let mut hasher = Sha256::new();
    let mut tensors = HashMap::new();
    for name in names {
        let view = st.tensor(name).map_err(|e| checkpoint_error(path, e.to_string()))?;
        if view.dtype() != safetensors::Dtype::F32 {
            return Err(checkpoint_error(path, format!("tensor `{name}` is not f32")));
        }
        hasher.update(name.as_bytes());
        hasher.update(view.data());
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(name.to_string(), Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
    }
    if hex::encode(hasher.finalize()) != *field("payload_sha256")? {
        return Err(checkpoint_error(path, "payload checksum mismatch"));
    }
    let mut state = GeneratorState::build(&config, 0)?;
    state
        .load_named(|name| tensors.get(name).cloned())
        .map_err(|e| checkpoint_error(path, e.to_string()))?;
    state.step = field("step")?.parse().map_err(|_| checkpoint_error(path, "bad step"))?;
    Ok(state)
}
