//! Training an atlas-space edit layer from frame-space losses.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::package::{AtlasPackage, Layer};
use super::render::{region_texels, AtlasEdit, SamplePoints};
use super::segment::{self, SegmentConfig, TexelRect};
use crate::backend::relevancy::RELEVANCY_SIZE;
use crate::backend::EmbeddingBackend;
use crate::dataset::{self, TextTemplateBank, TrainRng};
use crate::error::{Error, Result};
use crate::generator::{GeneratorState, Mode};
use crate::image::{EditLayer, Image, TextBundle};
use crate::losses::LossReport;
use crate::nn;
use crate::trainer::{self, bootstrap_weight_at, Engine, LossContext, StepRecord, TrainConfig, TrainRunRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoTrainConfig {
    pub train: TrainConfig,
    pub segment: SegmentConfig,
    /// Every this many steps the whole atlas region is also fed through.
    pub atlas_period: usize,
    /// The background atlas is shrunk by this factor for whole-atlas passes
    /// and for the final inference.
    pub background_downscale: usize,
    /// Also feed one raw frame crop of the layer per step.
    pub frame_pass: bool,
}

impl Default for VideoTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::video(),
            segment: SegmentConfig::default(),
            atlas_period: 75,
            background_downscale: 3,
            frame_pass: true,
        }
    }
}

impl VideoTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.segment
            .validate()
            .map_err(|(f, m)| Error::config(format!("segment.{f}"), m))?;
        if self.atlas_period == 0 {
            return Err(Error::config("atlas_period", "must be positive"));
        }
        if self.background_downscale == 0 {
            return Err(Error::config("background_downscale", "must be positive"));
        }
        Ok(())
    }
}

pub struct VideoTrainOutput {
    pub generator: GeneratorState,
    pub edit: AtlasEdit,
    pub record: TrainRunRecord,
}

/// The atlas texels a layer's generator works on: the confident
/// foreground bounds for the foreground, everything for the background.
pub fn working_rect(pkg: &AtlasPackage, layer: Layer) -> TexelRect {
    let r = pkg.meta.atlas_resolution;
    match (layer, pkg.fg_bounds()) {
        (Layer::Foreground, Some(b)) => {
            let map = pkg.texel_map(layer);
            let (y0, x0) = map.texel(b.u_min, b.v_min);
            let (y1, x1) = map.texel(b.u_max, b.v_max);
            let clamp = |v: f64| v.clamp(0.0, (r - 1) as f64);
            let (ya, xa) = (clamp(y0).floor() as usize, clamp(x0).floor() as usize);
            let (yb, xb) = (clamp(y1).ceil() as usize, clamp(x1).ceil() as usize);
            TexelRect {
                y: ya,
                x: xa,
                h: yb - ya + 1,
                w: xb - xa + 1,
            }
        }
        _ => TexelRect::full(r),
    }
}

/// Whole-atlas generator input and its size relative to `rect`.
fn atlas_input(pkg: &AtlasPackage, layer: Layer, rect: &TexelRect, cfg: &VideoTrainConfig) -> Result<Image> {
    let img = pkg.atlas(layer).crop(rect.y, rect.x, rect.h, rect.w)?;
    let f = match layer {
        Layer::Background => cfg.background_downscale,
        Layer::Foreground => 1,
    };
    if f == 1 {
        return Ok(img);
    }
    img.resize((rect.h / f).max(1), (rect.w / f).max(1))
}

fn layer_region(pkg: &AtlasPackage, layer: Layer, t: usize, region: (usize, usize, usize, usize)) -> Result<Image> {
    let layers = pkg.frame_layers(t)?;
    let img = match layer {
        Layer::Foreground => layers.foreground,
        Layer::Background => layers.background,
    };
    img.crop(region.0, region.1, region.2, region.3)
}

/// Trains a generator whose output lives in `layer`'s atlas.
pub fn train_video(
    pkg: &AtlasPackage,
    layer: Layer,
    bundle: &TextBundle,
    cfg: &VideoTrainConfig,
    backend: &dyn EmbeddingBackend,
) -> Result<VideoTrainOutput> {
    train_video_with(pkg, layer, bundle, cfg, backend, &TextTemplateBank::default(), &mut |_| {})
}

pub fn train_video_with(
    pkg: &AtlasPackage,
    layer: Layer,
    bundle: &TextBundle,
    cfg: &VideoTrainConfig,
    backend: &dyn EmbeddingBackend,
    bank: &TextTemplateBank,
    on_step: &mut dyn FnMut(&StepRecord),
) -> Result<VideoTrainOutput> {
    cfg.validate()?;
    let tc = &cfg.train;
    let started = Instant::now();
    let mut ctx = LossContext::new(backend, bundle, tc)?;
    if ctx.toggles.enable_bootstrap && bundle.roi().is_none() {
        log::warn!("no region-of-interest prompt; bootstrap term disabled");
        ctx.toggles.enable_bootstrap = false;
    }
    let (fh, fw) = pkg.frame_dims();
    let mut relevancy_cache: HashMap<usize, Tensor> = HashMap::new();
    let mut relevancy_for = |t: usize, region: (usize, usize, usize, usize)| -> Result<Tensor> {
        let full = match relevancy_cache.entry(t) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => {
                let roi = bundle.roi().expect("bootstrap needs a roi");
                let map = backend.relevancy(&pkg.reconstruct_frame(t)?, roi)?;
                e.insert(trainer::relevancy_plane(&map, fh, fw)?)
            }
        };
        let (y, x, h, w) = region;
        let plane = full.narrow(2, y, h)?.narrow(3, x, w)?;
        nn::resize_bilinear(&plane, RELEVANCY_SIZE, RELEVANCY_SIZE)
    };

    let rect = working_rect(pkg, layer);
    let map = pkg.texel_map(layer);
    let mut engine = Engine::new(tc, tc.seed)?;
    let mut rng = TrainRng::seed_from_u64(tc.seed);
    let mut history = Vec::with_capacity(tc.total_steps);
    for step in 0..tc.total_steps {
        let w_boot = bootstrap_weight_at(step, tc);
        let sample = segment::sample_segment(pkg.frame_count(), (fh, fw), &cfg.segment, &mut rng);
        let crop = segment::crop_from_segment(pkg, layer, &sample)?;
        let ex = dataset::sample_example(step + 1, &crop.image, bundle, &tc.augmentation, bank, &mut rng)?;
        let x = ex.image.to_tensor(DType::F32)?;
        let (color, alpha) = engine.generator.forward_tensor(&x, Mode::Train)?;
        let out_hw = (sample.region.2, sample.region.3);
        let mut total: Option<Tensor> = None;
        let mut reports = Vec::new();
        let mut add = |t: Tensor, r: LossReport| -> Result<()> {
            reports.push(r);
            total = Some(match total.take() {
                Some(a) => (a + t)?,
                None => t,
            });
            Ok(())
        };

        for t in sample.frames(pkg.frame_count()) {
            let pts = region_texels(pkg.uv(layer, t), &map, &crop.rect, sample.region)
                .into_iter()
                .map(|(r, c)| ex.transform.map_point(r, c));
            let pts = SamplePoints::new(ex.image.dims(), pts);
            let mask = pts.mask_tensor(out_hw, DType::F32)?;
            let fallback = layer_region(pkg, layer, t, sample.region)?.to_tensor(DType::F32)?;
            let content = (pts.sample_tensor(&x, out_hw)? + fallback.broadcast_mul(&mask.affine(-1.0, 1.0)?)?)?;
            let color_t = pts.sample_tensor(&color, out_hw)?;
            let alpha_t = pts.sample_tensor(&alpha, out_hw)?;
            let r = if ctx.toggles.enable_bootstrap {
                Some(relevancy_for(t, sample.region)?)
            } else {
                None
            };
            let terms = ctx.terms(&content, &color_t, &alpha_t, &ex.target, &ex.text, r.as_ref(), &mut rng)?;
            let (l, rep) = terms.assemble(&tc.weights, w_boot, &ctx.toggles)?;
            add(l, rep)?;
        }

        if cfg.frame_pass {
            let t = sample.t.min(pkg.frame_count() - 1);
            let xf = layer_region(pkg, layer, t, sample.region)?.to_tensor(DType::F32)?;
            let (cf, af) = engine.generator.forward_tensor(&xf, Mode::Train)?;
            let r = if ctx.toggles.enable_bootstrap {
                Some(relevancy_for(t, sample.region)?)
            } else {
                None
            };
            let terms = ctx.terms(&xf, &cf, &af, &ex.target, &ex.text, r.as_ref(), &mut rng)?;
            let (l, rep) = terms.assemble(&tc.weights, w_boot, &ctx.toggles)?;
            add(l, rep)?;
        }

        if (step + 1) % cfg.atlas_period == 0 {
            let xa = atlas_input(pkg, layer, &rect, cfg)?.to_tensor(DType::F32)?;
            let (ca, aa) = engine.generator.forward_tensor(&xa, Mode::Train)?;
            let terms = ctx.terms(&xa, &ca, &aa, &ex.target, &ex.text, None, &mut rng)?;
            let (l, rep) = terms.assemble(&tc.weights, w_boot, &ctx.toggles)?;
            add(l, rep)?;
        }

        let n = reports.len() as f64;
        let report = trainer::mean_report(&reports);
        let total = total.expect("at least one pass").affine(1.0 / n, 0.0)?;
        let record = engine.apply(step, &total, report, ex.is_augmented)?;
        on_step(&record);
        history.push(record);
    }

    let input = atlas_input(pkg, layer, &rect, cfg)?;
    let edit = engine.generator.forward(&input)?;
    let edit = if edit.dims() == (rect.h, rect.w) {
        edit
    } else {
        let (c, a) = edit.into_parts();
        EditLayer::new(c.resize(rect.h, rect.w)?, a.resize(rect.h, rect.w)?)?
    };
    let record = TrainRunRecord {
        seed: tc.seed,
        model_id: backend.model_id().to_string(),
        config: tc.clone(),
        history,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checkpoints: Vec::new(),
    };
    Ok(VideoTrainOutput {
        generator: engine.generator,
        edit: AtlasEdit { layer, rect, edit },
        record,
    })
}

/// Re-runs a trained generator over its layer's working region.
pub fn infer_atlas_edit(
    pkg: &AtlasPackage,
    layer: Layer,
    generator: &GeneratorState,
    cfg: &VideoTrainConfig,
) -> Result<AtlasEdit> {
    let rect = working_rect(pkg, layer);
    let edit = generator.forward(&atlas_input(pkg, layer, &rect, cfg)?)?;
    let (c, a) = edit.into_parts();
    let edit = EditLayer::new(c.resize(rect.h, rect.w)?, a.resize(rect.h, rect.w)?)?;
    Ok(AtlasEdit { layer, rect, edit })
}
