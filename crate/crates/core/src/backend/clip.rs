use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::relevancy::{self, LayerAttention, RelevancyMap, RELEVANCY_SIZE};
use super::tokenizer::{HashTokenizer, Tokenizer};
use super::transformer::{
    l2_normalize, random_weights, AttentionProbe, ClipConfig, TextTransformer, VisionTransformer, WeightMap,
};
use super::{EmbeddingBackend, ImageFeatures};
use crate::error::{Error, Result};
use crate::image::Image;

/// Which layers the relevancy rollout accumulates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelevancyOptions {
    /// First layer included in the rollout; earlier layers are skipped.
    pub start_layer: usize,
}

/// A CLIP-style dual encoder.
pub struct ClipBackend {
    model_id: String,
    config: ClipConfig,
    vision: VisionTransformer,
    text: TextTransformer,
    tokenizer: Box<dyn Tokenizer>,
    logit_scale: f64,
    dtype: DType,
    relevancy: RelevancyOptions,
    text_cache: Mutex<HashMap<String, Tensor>>,
}

impl std::fmt::Debug for ClipBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClipBackend").field("model_id", &self.model_id).finish_non_exhaustive()
    }
}

impl ClipBackend {
    /// Builds a backend from named weights in the Hugging Face CLIP layout.
    /// Every expected parameter must be present with the right shape.
    pub fn from_weights(
        model_id: impl Into<String>,
        config: ClipConfig,
        weights: HashMap<String, Tensor>,
        tokenizer: Box<dyn Tokenizer>,
        dtype: DType,
    ) -> Result<Self> {
        let w = WeightMap::new(weights, &config, dtype)?;
        let logit_scale = crate::nn::scalar(&w_logit(&w)?)?.exp();
        Ok(Self {
            model_id: model_id.into(),
            vision: VisionTransformer::load(&w, &config.vision)?,
            text: TextTransformer::load(&w, &config.text)?,
            config,
            tokenizer,
            logit_scale,
            dtype,
            relevancy: RelevancyOptions::default(),
            text_cache: Mutex::new(HashMap::new()),
        })
    }

    /// A small randomly initialized model with ViT-B/32 patch geometry and a
    /// hashing tokenizer. Deterministic in `seed`; needs no network.
    pub fn synthetic(seed: u64) -> Result<Self> {
        let config = ClipConfig::tiny();
        let weights = random_weights(&config, seed, DType::F32)?;
        let tokenizer = Box::new(HashTokenizer::new(config.text.vocab_size));
        Self::from_weights(format!("synthetic-{seed}"), config, weights, tokenizer, DType::F32)
    }

    pub fn with_relevancy_options(mut self, options: RelevancyOptions) -> Self {
        self.relevancy = options;
        self
    }

    pub fn config(&self) -> &ClipConfig {
        &self.config
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    /// Position embeddings for a `rows x cols` patch grid, class slot first.
    pub fn interpolate_position_embeddings(&self, rows: usize, cols: usize) -> Result<Tensor> {
        self.vision.interpolate_position_embeddings(rows, cols)
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text, self.config.text.context_length)
    }
}

fn w_logit(w: &WeightMap) -> Result<Tensor> {
    // stored as a 0-d or 1-element tensor
    let t = w.get("logit_scale")?;
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.squeeze(0)?)
}

impl EmbeddingBackend for ClipBackend {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn patch_size(&self) -> usize {
        self.config.vision.patch_size
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn token_width(&self) -> usize {
        self.config.vision.width
    }

    fn dtype(&self) -> DType {
        self.dtype
    }

    fn image_features(&self, images: &Tensor) -> Result<ImageFeatures> {
        let out = self.vision.forward(&images.to_dtype(self.dtype)?, None)?;
        Ok(ImageFeatures {
            embedding: l2_normalize(&out.pooled)?,
            tokens: out.tokens,
            grid: out.grid,
        })
    }

    fn text_embedding(&self, text: &str) -> Result<Tensor> {
        if text.trim().is_empty() {
            return Err(Error::Input("text prompt must be non-empty".into()));
        }
        if let Some(t) = self.text_cache.lock().expect("text cache poisoned").get(text) {
            return Ok(t.clone());
        }
        let ids = self.tokenize(text);
        let e = l2_normalize(&self.text.forward(&ids)?)?.detach();
        self.text_cache
            .lock()
            .expect("text cache poisoned")
            .insert(text.to_string(), e.clone());
        Ok(e)
    }

    fn relevancy(&self, image: &Image, text: &str) -> Result<RelevancyMap> {
        let img = image.resize(RELEVANCY_SIZE, RELEVANCY_SIZE)?;
        let t = self.text_embedding(text)?;
        let mut probe = AttentionProbe::default();
        let out = self.vision.forward(&img.to_tensor(self.dtype)?, Some(&mut probe))?;
        let e = l2_normalize(&out.pooled)?.squeeze(0)?;
        let logit = ((e * t)?.sum_all()? * self.logit_scale)?;
        let grads = logit.backward()?;
        let mut layers = Vec::with_capacity(probe.vars.len());
        for var in &probe.vars {
            let probs = var.as_tensor();
            let (_, heads, n, _) = probs.dims4()?;
            let grad = match grads.get(probs) {
                Some(g) => g.clone(),
                None => probs.zeros_like()?,
            };
            layers.push(LayerAttention {
                heads,
                tokens: n,
                probs: probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
                grads: grad.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
            });
        }
        let scores = relevancy::rollout(&layers, self.relevancy.start_layer)?;
        relevancy::patch_scores_to_map(&scores, out.grid.0, out.grid.1)
    }
}
