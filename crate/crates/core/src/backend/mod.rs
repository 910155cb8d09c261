//! Vision-language embedding backends.
//!
//! [`EmbeddingBackend`] is the contract the losses are written against: batched,
//! differentiable image features (global embedding plus deepest-layer patch
//! tokens), text embeddings, and optionally a text-conditioned relevancy map.
//! [`ClipBackend`] implements it for CLIP-style transformers, either with
//! pretrained weights ([`pretrained`]) or with seeded random weights
//! ([`ClipBackend::synthetic`]) for fast offline tests.

mod clip;
pub mod pretrained;
pub mod relevancy;
pub mod tokenizer;
pub mod transformer;

use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::image::{Image, OpacityMap};

pub use clip::{ClipBackend, RelevancyOptions};
pub use relevancy::RelevancyMap;
pub use transformer::{ClipConfig, TextConfig, VisionConfig};

/// Guard below which a vector norm is treated as zero.
pub const NORM_EPS: f64 = 1e-8;

/// Output of one batched image forward pass.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    /// `(B, D)` L2-normalized global embeddings.
    pub embedding: Tensor,
    /// `(B, K, W)` patch tokens from the deepest transformer layer.
    pub tokens: Tensor,
    /// Patch grid `(rows, cols)` with `rows * cols = K`.
    pub grid: (usize, usize),
}

pub trait EmbeddingBackend: Send + Sync {
    /// Identifier used in logs and run records.
    fn model_id(&self) -> &str;

    fn patch_size(&self) -> usize;

    fn embed_dim(&self) -> usize;

    /// Width of each spatial token.
    fn token_width(&self) -> usize;

    fn dtype(&self) -> DType;

    /// Features of a `(B, 3, H, W)` batch with values in `[0, 1]`.
    /// Differentiable with respect to `images`.
    fn image_features(&self, images: &Tensor) -> Result<ImageFeatures>;

    /// `(D,)` L2-normalized text embedding.
    fn text_embedding(&self, text: &str) -> Result<Tensor>;

    /// 224x224 relevancy of `image` regions to `text`.
    fn relevancy(&self, _image: &Image, _text: &str) -> Result<RelevancyMap> {
        Err(Error::Unsupported(format!(
            "backend `{}` does not expose attention maps; supply a precomputed relevancy map instead",
            self.model_id()
        )))
    }
}

fn unit_vector(values: Vec<f32>, what: &str) -> Result<Vec<f32>> {
    let norm = values.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < NORM_EPS {
        return Err(Error::Backend(format!("{what} has degenerate norm {norm}")));
    }
    Ok(values.into_iter().map(|v| (v as f64 / norm) as f32).collect())
}

/// A unit-norm global image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEmbedding(Vec<f32>);

/// A unit-norm text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(Vec<f32>);

impl ImageEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        unit_vector(values, "image embedding").map(Self)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

impl TextEmbedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        unit_vector(values, "text embedding").map(Self)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }
}

/// `K x W` deepest-layer patch tokens of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTokens {
    pub rows: usize,
    pub cols: usize,
    pub width: usize,
    /// Row-major `K x W`.
    pub values: Vec<f32>,
}

impl SpatialTokens {
    pub fn count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.values[i * self.width..(i + 1) * self.width]
    }

    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.values, (self.count(), self.width), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }
}

fn check_image(backend: &dyn EmbeddingBackend, img: &Image) -> Result<()> {
    let p = backend.patch_size();
    if img.height().min(img.width()) < p {
        return Err(Error::Input(format!(
            "image {}x{} is smaller than one {p}x{p} patch",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

pub fn encode_image(backend: &dyn EmbeddingBackend, img: &Image) -> Result<ImageEmbedding> {
    check_image(backend, img)?;
    let f = backend.image_features(&img.to_tensor(backend.dtype())?)?;
    ImageEmbedding::new(f.embedding.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
}

pub fn encode_text(backend: &dyn EmbeddingBackend, text: &str) -> Result<TextEmbedding> {
    if text.trim().is_empty() {
        return Err(Error::Input("text prompt must be non-empty".into()));
    }
    TextEmbedding::new(backend.text_embedding(text)?.to_dtype(DType::F32)?.to_vec1()?)
}

pub fn spatial_tokens(backend: &dyn EmbeddingBackend, img: &Image) -> Result<SpatialTokens> {
    check_image(backend, img)?;
    let f = backend.image_features(&img.to_tensor(backend.dtype())?)?;
    let t = f.tokens.squeeze(0)?.to_dtype(DType::F32)?;
    let (k, width) = t.dims2()?;
    debug_assert_eq!(k, f.grid.0 * f.grid.1);
    Ok(SpatialTokens {
        rows: f.grid.0,
        cols: f.grid.1,
        width,
        values: t.flatten_all()?.to_vec1()?,
    })
}

pub fn relevancy_map(backend: &dyn EmbeddingBackend, img: &Image, roi_text: &str) -> Result<RelevancyMap> {
    if roi_text.trim().is_empty() {
        return Err(Error::Input("region-of-interest prompt must be non-empty".into()));
    }
    backend.relevancy(img, roi_text)
}

/// Result of [`cosine_distance`]: the distance plus whether an input was
/// (near) zero and the guard kicked in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineDistance {
    pub value: f64,
    pub degenerate: bool,
}

/// `1 - <a, b>` after re-normalizing both inputs; zero-norm inputs yield 0
/// with the degenerate flag set.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> CosineDistance {
    assert_eq!(a.len(), b.len(), "cosine distance of vectors with different lengths");
    let na = a.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return CosineDistance {
            value: 0.0,
            degenerate: true,
        };
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    CosineDistance {
        value: (1.0 - dot / (na * nb)).clamp(0.0, 2.0),
        degenerate: false,
    }
}

/// Row-wise L2 normalization with the zero-norm guard.
pub(crate) fn normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(candle_core::D::Minus1)?.sqrt()?;
    let norm = norm.maximum(NORM_EPS)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Loads a relevancy map override from disk, resized to 224x224.
pub fn load_relevancy_map(path: &std::path::Path) -> Result<RelevancyMap> {
    let m = crate::image::load_opacity_map(path)?;
    RelevancyMap::from_opacity(&m)
}

impl RelevancyMap {
    pub fn from_opacity(m: &OpacityMap) -> Result<Self> {
        let m = m.resize(relevancy::RELEVANCY_SIZE, relevancy::RELEVANCY_SIZE)?;
        RelevancyMap::new(m.values().to_vec())
    }
}
