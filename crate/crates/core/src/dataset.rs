//! The internal training distribution built from a single input, and the
//! geometric views taken of generator outputs before embedding.

use std::path::Path;

use candle_core::Tensor;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{shortest_side_dims, Image, TextBundle};
use crate::nn;

/// Seeded generator used throughout training.
pub type TrainRng = rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Side fraction kept by the random crop.
    pub crop_fraction: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub hflip_prob: f64,
    /// Brightness, contrast and saturation factors are drawn from
    /// `[1 - a, 1 + a]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue shift amplitude as a fraction of a full turn.
    pub hue: f64,
    /// Geometric views per image fed to the embedding backend.
    pub clip_view_count: usize,
    /// Area fraction kept by each view crop.
    pub view_area: f64,
    pub view_flip_prob: f64,
    /// Shortest side of outputs before view extraction.
    pub clip_size: usize,
    /// Every this many steps the un-augmented input is used.
    pub unaugmented_period: usize,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self::image()
    }
}

impl AugmentationConfig {
    pub fn image() -> Self {
        Self {
            crop_fraction: 0.85,
            scale_min: 0.8,
            scale_max: 1.2,
            hflip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.02,
            clip_view_count: 8,
            view_area: 0.9,
            view_flip_prob: 0.5,
            clip_size: 224,
            unaugmented_period: 75,
        }
    }

    pub fn video() -> Self {
        Self {
            crop_fraction: 0.95,
            ..Self::image()
        }
    }

    /// Turns off the input augmentations (crop, scale, flip, jitter) while
    /// keeping the loss views.
    pub fn without_input_augmentation(self) -> Self {
        Self {
            crop_fraction: 1.0,
            scale_min: 1.0,
            scale_max: 1.0,
            hflip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(("crop_fraction", format!("must lie in (0, 1], got {}", self.crop_fraction)));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err((
                "scale_min",
                format!("scale range [{}, {}] must be positive and ordered", self.scale_min, self.scale_max),
            ));
        }
        for (name, v) in [("hflip_prob", self.hflip_prob), ("view_flip_prob", self.view_flip_prob)] {
            if !unit(v) {
                return Err((name, format!("must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !unit(v) {
                return Err((name, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(("hue", format!("must lie in [0, 0.5], got {}", self.hue)));
        }
        if self.clip_view_count == 0 {
            return Err(("clip_view_count", "must be at least 1".into()));
        }
        if !(self.view_area > 0.0 && self.view_area <= 1.0) {
            return Err(("view_area", format!("must lie in (0, 1], got {}", self.view_area)));
        }
        if self.clip_size == 0 {
            return Err(("clip_size", "must be at least 1".into()));
        }
        if self.unaugmented_period == 0 {
            return Err(("unaugmented_period", "must be at least 1".into()));
        }
        Ok(())
    }
}

/// The 14 built-in text templates.
pub const DEFAULT_TEMPLATES: [&str; 14] = [
    "photo of {}.",
    "high quality photo of {}.",
    "a photo of {}.",
    "the photo of {}.",
    "image of {}.",
    "an image of {}.",
    "high quality image of {}.",
    "a high quality image of {}.",
    "the {}.",
    "a {}.",
    "{}.",
    "{}",
    "{}!",
    "{}...",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TextTemplateBank {
    templates: Vec<String>,
}

impl Default for TextTemplateBank {
    fn default() -> Self {
        Self {
            templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl TextTemplateBank {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        if templates.is_empty() {
            return Err(Error::Input("template bank is empty".into()));
        }
        if let Some(t) = templates.iter().find(|t| t.matches("{}").count() != 1) {
            return Err(Error::Input(format!("template {t:?} must contain exactly one `{{}}`")));
        }
        Ok(Self { templates })
    }

    /// One template per line; blank lines are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }
}

/// Plugs `text` into a uniformly drawn template.
pub fn augment_text(text: &str, bank: &TextTemplateBank, rng: &mut impl Rng) -> String {
    let template = bank.templates.choose(rng).expect("bank is non-empty");
    template.replacen("{}", text, 1)
}

/// Crop, rescale and flip applied to the source; replayable on any plane
/// aligned with it (opacity, relevancy).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub source: (usize, usize),
    /// Crop rectangle `(y, x, h, w)` in source pixels.
    pub crop: (usize, usize, usize, usize),
    /// Size after rescaling.
    pub output: (usize, usize),
    pub flip: bool,
}

impl GeometricTransform {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            source: (height, width),
            crop: (0, 0, height, width),
            output: (height, width),
            flip: false,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.source.0, self.source.1)
    }

    /// Where source pixel `(y, x)` lands in the output grid.
    pub fn map_point(&self, y: f64, x: f64) -> (f64, f64) {
        let (cy, cx, ch, cw) = self.crop;
        let (oh, ow) = self.output;
        let oy = (y - cy as f64 + 0.5) * oh as f64 / ch as f64 - 0.5;
        let ox = (x - cx as f64 + 0.5) * ow as f64 / cw as f64 - 0.5;
        (oy, if self.flip { (ow - 1) as f64 - ox } else { ox })
    }

    pub fn apply_image(&self, img: &Image) -> Result<Image> {
        if img.dims() != self.source {
            return Err(Error::shape("transform source", self.source, img.dims()));
        }
        let (y, x, h, w) = self.crop;
        let out = img.crop(y, x, h, w)?.resize(self.output.0, self.output.1)?;
        Ok(if self.flip { out.flip_horizontal() } else { out })
    }

    /// Differentiable form on a `(B, C, H, W)` tensor.
    pub fn apply_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let (_, _, h0, w0) = t.dims4()?;
        if (h0, w0) != self.source {
            return Err(Error::shape("transform source", self.source, (h0, w0)));
        }
        let (y, x, h, w) = self.crop;
        let out = nn::resize_bilinear(&t.narrow(2, y, h)?.narrow(3, x, w)?, self.output.0, self.output.1)?;
        if self.flip {
            nn::flip_horizontal(&out)
        } else {
            Ok(out)
        }
    }
}

/// Per-image color jitter factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
}

impl ColorJitter {
    pub const NONE: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };

    fn sample(cfg: &AugmentationConfig, rng: &mut impl Rng) -> Self {
        let mut factor = |a: f64| if a > 0.0 { rng.random_range(1.0 - a..=1.0 + a) as f32 } else { 1.0 };
        let brightness = factor(cfg.brightness);
        let contrast = factor(cfg.contrast);
        let saturation = factor(cfg.saturation);
        let hue = if cfg.hue > 0.0 { rng.random_range(-cfg.hue..=cfg.hue) as f32 } else { 0.0 };
        Self {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }

    /// Brightness, contrast, saturation, then hue; clamped after each.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        if *self == Self::NONE {
            return Ok(img.clone());
        }
        let (h, w) = img.dims();
        let n = h * w;
        let mut px: Vec<[f32; 3]> = (0..n).map(|i| img.pixel(i / w, i % w)).collect();
        let gray = |p: &[f32; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        for p in &mut px {
            for c in p.iter_mut() {
                *c = (*c * self.brightness).clamp(0.0, 1.0);
            }
        }
        let mean = px.iter().map(|p| gray(p) as f64).sum::<f64>() as f32 / n as f32;
        for p in &mut px {
            for c in p.iter_mut() {
                *c = ((*c - mean) * self.contrast + mean).clamp(0.0, 1.0);
            }
        }
        for p in &mut px {
            let g = gray(p);
            for c in p.iter_mut() {
                *c = ((*c - g) * self.saturation + g).clamp(0.0, 1.0);
            }
        }
        if self.hue != 0.0 {
            for p in &mut px {
                *p = shift_hue(*p, self.hue);
            }
        }
        let mut data = vec![0.0; 3 * n];
        for (i, p) in px.iter().enumerate() {
            for c in 0..3 {
                data[c * n + i] = p[c];
            }
        }
        Image::from_planar(h, w, data)
    }
}

fn shift_hue([r, g, b]: [f32; 3], shift: f32) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 {
        return [r, g, b];
    }
    let mut hue = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    } / 6.0;
    hue = (hue + shift).rem_euclid(1.0);
    let s = delta / max;
    let v = max;
    let h6 = hue * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let out = match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    out.map(|c| c.clamp(0.0, 1.0))
}

/// An augmented image plus the transform that produced its geometry.
#[derive(Debug, Clone)]
pub struct Augmented {
    pub image: Image,
    pub transform: GeometricTransform,
    pub jitter: ColorJitter,
}

/// Samples the geometric transform and jitter for a source of the given size.
pub fn sample_augmentation(
    height: usize,
    width: usize,
    cfg: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (GeometricTransform, ColorJitter) {
    let ch = ((cfg.crop_fraction * height as f64).floor() as usize).clamp(1, height);
    let cw = ((cfg.crop_fraction * width as f64).floor() as usize).clamp(1, width);
    let y = if ch < height { rng.random_range(0..=height - ch) } else { 0 };
    let x = if cw < width { rng.random_range(0..=width - cw) } else { 0 };
    let scale = if cfg.scale_max > cfg.scale_min {
        rng.random_range(cfg.scale_min..=cfg.scale_max)
    } else {
        cfg.scale_min
    };
    let oh = ((ch as f64 * scale).round() as usize).max(1);
    let ow = ((cw as f64 * scale).round() as usize).max(1);
    let flip = cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob);
    let transform = GeometricTransform {
        source: (height, width),
        crop: (y, x, ch, cw),
        output: (oh, ow),
        flip,
    };
    (transform, ColorJitter::sample(cfg, rng))
}

/// Crop, aspect-preserving rescale, horizontal flip, then color jitter.
pub fn augment_image(src: &Image, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Augmented> {
    let (transform, jitter) = sample_augmentation(src.height(), src.width(), cfg, rng);
    let image = jitter.apply(&transform.apply_image(src)?)?;
    Ok(Augmented {
        image,
        transform,
        jitter,
    })
}

/// One internal training pair.
#[derive(Debug, Clone)]
pub struct InternalExample {
    pub image: Image,
    /// Templated text.
    pub text: String,
    /// The target prompt before templating.
    pub target: String,
    pub is_augmented: bool,
    pub transform: GeometricTransform,
}

/// Every `unaugmented_period` steps returns the untouched input and primary
/// target; otherwise an augmented image with a templated, uniformly chosen
/// target.
pub fn sample_example(
    step: usize,
    src: &Image,
    bundle: &TextBundle,
    cfg: &AugmentationConfig,
    bank: &TextTemplateBank,
    rng: &mut impl Rng,
) -> Result<InternalExample> {
    if step > 0 && step % cfg.unaugmented_period == 0 {
        return Ok(InternalExample {
            image: src.clone(),
            text: bundle.target().to_string(),
            target: bundle.target().to_string(),
            is_augmented: false,
            transform: GeometricTransform::identity(src.height(), src.width()),
        });
    }
    let aug = augment_image(src, cfg, rng)?;
    let target = bundle.targets().choose(rng).expect("bundle has a target").clone();
    Ok(InternalExample {
        image: aug.image,
        text: augment_text(&target, bank, rng),
        target,
        is_augmented: true,
        transform: aug.transform,
    })
}

/// A square-free crop-and-flip applied to an image already resized to
/// `base`; the view is resized back to `base`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
    pub flip: bool,
}

/// Shared randomness for paired views: applying one plan to the output and
/// to the source yields spatially matched views.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewPlan {
    pub base: (usize, usize),
    pub views: Vec<ViewRect>,
}

impl ViewPlan {
    /// Plans `n` views of an `height x width` image.
    pub fn sample(height: usize, width: usize, n: usize, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Self {
        let base = shortest_side_dims(height, width, cfg.clip_size);
        let side = cfg.view_area.sqrt();
        let vh = ((base.0 as f64 * side).round() as usize).clamp(1, base.0);
        let vw = ((base.1 as f64 * side).round() as usize).clamp(1, base.1);
        let views = (0..n)
            .map(|_| ViewRect {
                y: if vh < base.0 { rng.random_range(0..=base.0 - vh) } else { 0 },
                x: if vw < base.1 { rng.random_range(0..=base.1 - vw) } else { 0 },
                h: vh,
                w: vw,
                flip: cfg.view_flip_prob > 0.0 && rng.random_bool(cfg.view_flip_prob),
            })
            .collect();
        Self { base, views }
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// `(1, C, H, W)` -> `(n, C, base.0, base.1)`, differentiable.
    pub fn apply_tensor(&self, t: &Tensor) -> Result<Tensor> {
        let resized = nn::resize_bilinear(t, self.base.0, self.base.1)?;
        let mut out = Vec::with_capacity(self.views.len());
        for v in &self.views {
            let mut view = resized.narrow(2, v.y, v.h)?.narrow(3, v.x, v.w)?;
            if v.flip {
                view = nn::flip_horizontal(&view)?;
            }
            out.push(nn::resize_bilinear(&view, self.base.0, self.base.1)?);
        }
        Ok(Tensor::cat(&out, 0)?)
    }

    pub fn apply_image(&self, img: &Image) -> Result<Vec<Image>> {
        let t = self.apply_tensor(&img.to_tensor(candle_core::DType::F32)?)?;
        (0..self.views.len())
            .map(|i| Image::from_tensor(&t.narrow(0, i, 1)?))
            .collect()
    }
}

/// `n` random geometric views of `img` after resizing its shortest side to
/// `cfg.clip_size`.
pub fn clip_views(img: &Image, n: usize, cfg: &AugmentationConfig, rng: &mut impl Rng) -> Result<Vec<Image>> {
    if n == 0 {
        return Err(Error::Input("at least one view is required".into()));
    }
    ViewPlan::sample(img.height(), img.width(), n, cfg, rng).apply_image(img)
}
