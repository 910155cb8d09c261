//! Image and edit-layer value types and the compositing algebra.
//!
//! Images are real-valued in `[0, 1]` and stored planar (channel-major), so
//! converting to a `(1, C, H, W)` tensor is a plain reshape. Quantization to
//! 8 or 16 bits only happens in [`load_image`] and the `save_*` functions.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::resample;

/// An RGB color in linear `[0, 1]` space.
pub type Rgb = [f32; 3];

/// Pure green, the default chroma-key background.
pub const GREEN: Rgb = [0.0, 1.0, 0.0];

fn check_unit(values: &[f32], what: &str) -> Result<()> {
    match values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        None => Ok(()),
        Some(i) => Err(Error::Input(format!(
            "{what} value {} at index {i} is outside [0, 1]",
            values[i]
        ))),
    }
}

/// An `H x W` RGB image with channel values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    // planar: data[c * H * W + y * W + x]
    data: Vec<f32>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.height, self.width)
    }
}

impl Image {
    /// Builds an image from planar `3 x H x W` data.
    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("image must be non-empty, got {height}x{width}")));
        }
        if data.len() != 3 * height * width {
            return Err(Error::shape("image data", 3 * height * width, data.len()));
        }
        check_unit(&data, "image")?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, color: Rgb) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in color {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Self::from_planar(height, width, data)
    }

    /// Builds an image from a per-pixel function returning RGB.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Result<Self> {
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let rgb = f(y, x);
                for c in 0..3 {
                    data[c * plane + y * width + x] = rgb[c];
                }
            }
        }
        Self::from_planar(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn planar(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn pixel(&self, y: usize, x: usize) -> Rgb {
        let plane = self.height * self.width;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    /// Sub-image `[y, y + h) x [x, x + w)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 || y + h > self.height || x + w > self.width {
            return Err(Error::Input(format!(
                "crop {h}x{w} at ({y}, {x}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            let ch = self.channel(c);
            for yy in y..y + h {
                data.extend_from_slice(&ch[yy * self.width + x..yy * self.width + x + w]);
            }
        }
        Ok(Self { height: h, width: w, data })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.width) {
            row.reverse();
        }
        Self { data, ..*self }
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("cannot resize to {height}x{width}")));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let data = resize_planes(&self.data, 3, self.height, self.width, height, width);
        Ok(Self { height, width, data })
    }

    /// Resize so the shorter side equals `side`, preserving aspect ratio.
    pub fn resize_shortest_side(&self, side: usize) -> Result<Self> {
        let (h, w) = shortest_side_dims(self.height, self.width, side);
        self.resize(h, w)
    }

    /// Applies `f` to every channel value and clamps the result to `[0, 1]`.
    pub fn map_clamped(&self, f: impl Fn(f32) -> f32) -> Self {
        let data = self.data.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect();
        Self { data, ..*self }
    }

    pub(crate) fn from_planar_clamped(height: usize, width: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), 3 * height * width);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self { height, width, data }
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 3, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Reads a `(3, H, W)` or `(1, 3, H, W)` tensor, clamping to `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = match t.rank() {
            4 => t.squeeze(0)?,
            3 => t.clone(),
            r => return Err(Error::shape("image tensor rank", "3 or 4", r)),
        };
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape("image tensor channels", 3, c));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Ok(Self::from_planar_clamped(h, w, data))
    }
}

pub(crate) fn shortest_side_dims(h: usize, w: usize, side: usize) -> (usize, usize) {
    if h <= w {
        let nw = ((w as f64) * side as f64 / h as f64).round().max(1.0) as usize;
        (side, nw)
    } else {
        let nh = ((h as f64) * side as f64 / w as f64).round().max(1.0) as usize;
        (nh, side)
    }
}

pub(crate) fn resize_planes(data: &[f32], planes: usize, h: usize, w: usize, nh: usize, nw: usize) -> Vec<f32> {
    let ty = resample::linear_taps(h, nh);
    let tx = resample::linear_taps(w, nw);
    let mut out = vec![0.0f32; planes * nh * nw];
    for p in 0..planes {
        let src = &data[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * nh * nw..(p + 1) * nh * nw];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let at = |y: usize, x: usize| src[y * w + x] as f64;
                let top = at(a.lo, b.lo) * (1.0 - b.frac) + at(a.lo, b.hi) * b.frac;
                let bot = at(a.hi, b.lo) * (1.0 - b.frac) + at(a.hi, b.hi) * b.frac;
                dst[oy * nw + ox] = (top * (1.0 - a.frac) + bot * a.frac) as f32;
            }
        }
    }
    out
}

/// An `H x W` opacity map with values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct OpacityMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl std::fmt::Debug for OpacityMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "OpacityMap({}x{})", self.height, self.width)
    }
}

impl OpacityMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Input(format!("opacity map must be non-empty, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape("opacity data", height * width, data.len()));
        }
        check_unit(&data, "opacity")?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let data = resize_planes(&self.data, 1, self.height, self.width, height, width);
        Self::new(height, width, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    /// `(1, 1, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (1, 1, self.height, self.width), &Device::Cpu)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let t = t.to_dtype(DType::F32)?;
        let dims = t.dims().to_vec();
        let (h, w) = match dims.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            _ => return Err(Error::shape("opacity tensor", "(H, W)", dims)),
        };
        let data = t.flatten_all()?.to_vec1::<f32>()?;
        let data = data.into_iter().map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) }).collect();
        Self::new(h, w, data)
    }
}

/// An RGBA edit layer: a color image plus an opacity map of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct EditLayer {
    color: Image,
    alpha: OpacityMap,
}

impl EditLayer {
    pub fn new(color: Image, alpha: OpacityMap) -> Result<Self> {
        if color.dims() != alpha.dims() {
            return Err(Error::shape("edit layer alpha", color.dims(), alpha.dims()));
        }
        Ok(Self { color, alpha })
    }

    /// A fully transparent layer.
    pub fn transparent(height: usize, width: usize) -> Result<Self> {
        Self::new(Image::filled(height, width, [0.0; 3])?, OpacityMap::filled(height, width, 0.0)?)
    }

    pub fn color(&self) -> &Image {
        &self.color
    }

    pub fn alpha(&self) -> &OpacityMap {
        &self.alpha
    }

    pub fn dims(&self) -> (usize, usize) {
        self.color.dims()
    }

    pub fn into_parts(self) -> (Image, OpacityMap) {
        (self.color, self.alpha)
    }
}

/// `alpha * color + (1 - alpha) * base`, per pixel and channel.
pub fn composite(layer: &EditLayer, base: &Image) -> Result<Image> {
    if layer.dims() != base.dims() {
        return Err(Error::shape("composite base", layer.dims(), base.dims()));
    }
    let plane = base.height * base.width;
    let a = layer.alpha.values();
    let mut data = Vec::with_capacity(3 * plane);
    for c in 0..3 {
        let fg = layer.color.channel(c);
        let bg = base.channel(c);
        data.extend((0..plane).map(|i| a[i] * fg[i] + (1.0 - a[i]) * bg[i]));
    }
    Ok(Image::from_planar_clamped(base.height, base.width, data))
}

/// Composites the layer over a constant background color.
pub fn green_screen_composite(layer: &EditLayer, green: Rgb) -> Result<Image> {
    let (h, w) = layer.dims();
    composite(layer, &Image::filled(h, w, green)?)
}

/// Differentiable `alpha * color + (1 - alpha) * base` on `(B, 3, H, W)`
/// color/base and `(B, 1, H, W)` alpha tensors.
pub fn composite_tensor(color: &Tensor, alpha: &Tensor, base: &Tensor) -> Result<Tensor> {
    let fg = color.broadcast_mul(alpha)?;
    let keep = alpha.affine(-1.0, 1.0)?;
    Ok((fg + base.broadcast_mul(&keep)?)?)
}

/// Target, screen and region-of-interest prompts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextBundle {
    /// One or more target prompts describing the same edit.
    targets: Vec<String>,
    screen_template: String,
    screen_subject: Option<String>,
    roi: Option<String>,
}

pub const DEFAULT_SCREEN_TEMPLATE: &str = "{} over a green screen";

impl TextBundle {
    pub fn new(target: impl Into<String>) -> Result<Self> {
        Self::with_targets(vec![target.into()])
    }

    pub fn with_targets(targets: Vec<String>) -> Result<Self> {
        if targets.is_empty() || targets.iter().any(|t| t.trim().is_empty()) {
            return Err(Error::Input("target prompt must be non-empty".into()));
        }
        Ok(Self {
            targets,
            screen_template: DEFAULT_SCREEN_TEMPLATE.to_string(),
            screen_subject: None,
            roi: None,
        })
    }

    pub fn with_roi(mut self, roi: impl Into<String>) -> Result<Self> {
        let roi = roi.into();
        if roi.trim().is_empty() {
            return Err(Error::Input("region-of-interest prompt must be non-empty".into()));
        }
        self.roi = Some(roi);
        Ok(self)
    }

    pub fn with_screen_subject(mut self, subject: impl Into<String>) -> Result<Self> {
        let subject = subject.into();
        if subject.trim().is_empty() {
            return Err(Error::Input("screen subject must be non-empty".into()));
        }
        self.screen_subject = Some(subject);
        Ok(self)
    }

    pub fn with_screen_template(mut self, template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if template.matches("{}").count() != 1 {
            return Err(Error::Input(format!(
                "screen template must contain exactly one `{{}}` placeholder: {template:?}"
            )));
        }
        self.screen_template = template;
        Ok(self)
    }

    /// The primary target prompt.
    pub fn target(&self) -> &str {
        &self.targets[0]
    }

    pub fn targets(&self) -> &[String] {
        &self.targets
    }

    pub fn roi(&self) -> Option<&str> {
        self.roi.as_deref()
    }

    pub fn screen_template(&self) -> &str {
        &self.screen_template
    }

    /// The screen prompt: the template instantiated with the explicit screen
    /// subject, or with the target prompt when none was given.
    pub fn screen_prompt(&self) -> String {
        self.screen_prompt_for(self.target())
    }

    /// The screen prompt when `target` is the prompt in use.
    pub fn screen_prompt_for(&self, target: &str) -> String {
        let subject = self.screen_subject.as_deref().unwrap_or(target);
        self.screen_template.replacen("{}", subject, 1)
    }

    pub fn screen_subject(&self) -> Option<&str> {
        self.screen_subject.as_deref()
    }
}

/// Output bit depth for PNG files.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

fn quantize(v: f32, max: f32) -> f32 {
    (v.clamp(0.0, 1.0) * max).round_ties_even()
}

/// Loads an 8- or 16-bit PNG (or any format the codec supports) as RGB in
/// `[0, 1]`; alpha channels are dropped.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    match img {
        image::DynamicImage::ImageRgb16(_) | image::DynamicImage::ImageRgba16(_) | image::DynamicImage::ImageLuma16(_) => {
            let rgb = img.to_rgb16();
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = p.0[c] as f32 / 65535.0;
                }
            }
        }
        _ => {
            let rgb = img.to_rgb8();
            for (i, p) in rgb.pixels().enumerate() {
                for c in 0..3 {
                    data[c * plane + i] = p.0[c] as f32 / 255.0;
                }
            }
        }
    }
    Image::from_planar(h, w, data)
}

fn codec_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Codec {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

/// Writes an RGB PNG.
pub fn save_image(path: &Path, img: &Image, depth: BitDepth) -> Result<()> {
    let (h, w) = img.dims();
    let plane = h * w;
    match depth {
        BitDepth::Eight => {
            let mut buf = image::RgbImage::new(w as u32, h as u32);
            for (i, p) in buf.pixels_mut().enumerate() {
                for c in 0..3 {
                    p.0[c] = quantize(img.data[c * plane + i], 255.0) as u8;
                }
            }
            buf.save(path).map_err(|e| codec_err(path, e))
        }
        BitDepth::Sixteen => {
            let mut buf: image::ImageBuffer<image::Rgb<u16>, Vec<u16>> = image::ImageBuffer::new(w as u32, h as u32);
            for (i, p) in buf.pixels_mut().enumerate() {
                for c in 0..3 {
                    p.0[c] = quantize(img.data[c * plane + i], 65535.0) as u16;
                }
            }
            buf.save(path).map_err(|e| codec_err(path, e))
        }
    }
}

/// Writes an edit layer as a straight (non-premultiplied) RGBA PNG.
pub fn save_edit_layer(path: &Path, layer: &EditLayer, depth: BitDepth) -> Result<()> {
    let (h, w) = layer.dims();
    let plane = h * w;
    let color = layer.color.planar();
    let alpha = layer.alpha.values();
    match depth {
        BitDepth::Eight => {
            let mut buf = image::RgbaImage::new(w as u32, h as u32);
            for (i, p) in buf.pixels_mut().enumerate() {
                for c in 0..3 {
                    p.0[c] = quantize(color[c * plane + i], 255.0) as u8;
                }
                p.0[3] = quantize(alpha[i], 255.0) as u8;
            }
            buf.save(path).map_err(|e| codec_err(path, e))
        }
        BitDepth::Sixteen => {
            let mut buf: image::ImageBuffer<image::Rgba<u16>, Vec<u16>> = image::ImageBuffer::new(w as u32, h as u32);
            for (i, p) in buf.pixels_mut().enumerate() {
                for c in 0..3 {
                    p.0[c] = quantize(color[c * plane + i], 65535.0) as u16;
                }
                p.0[3] = quantize(alpha[i], 65535.0) as u16;
            }
            buf.save(path).map_err(|e| codec_err(path, e))
        }
    }
}

/// Reads a straight-alpha RGBA PNG back into an edit layer.
pub fn load_edit_layer(path: &Path) -> Result<EditLayer> {
    let img = image::open(path).map_err(|e| codec_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let rgba = img.to_rgba16();
    let mut color = vec![0.0f32; 3 * plane];
    let mut alpha = vec![0.0f32; plane];
    for (i, p) in rgba.pixels().enumerate() {
        for c in 0..3 {
            color[c * plane + i] = p.0[c] as f32 / 65535.0;
        }
        alpha[i] = p.0[3] as f32 / 65535.0;
    }
    EditLayer::new(Image::from_planar(h, w, color)?, OpacityMap::new(h, w, alpha)?)
}

/// Loads a single-channel map (e.g. a precomputed relevancy map) from a
/// grayscale or color PNG; color inputs use the mean of the channels.
pub fn load_opacity_map(path: &Path) -> Result<OpacityMap> {
    let img = load_image(path)?;
    let (h, w) = img.dims();
    let plane = h * w;
    let d = img.planar();
    let data = (0..plane).map(|i| ((d[i] + d[plane + i] + d[2 * plane + i]) / 3.0).clamp(0.0, 1.0)).collect();
    OpacityMap::new(h, w, data)
}
