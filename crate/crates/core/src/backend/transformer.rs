//! CLIP-style vision and text transformers over a frozen weight map.
//!
//! Parameter names follow the Hugging Face `CLIPModel` safetensors layout
//! (`vision_model.encoder.layers.{i}.self_attn.q_proj.weight`, ...), so
//! pretrained exports load directly and seeded random weights use the same
//! code path.

use std::collections::HashMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub vision: VisionConfig,
    pub text: TextConfig,
    pub embed_dim: usize,
}

impl ClipConfig {
    /// ViT-B/32: 12 layers, 32x32 patches, 768-wide tokens, 512-d embeddings.
    pub fn vit_b32() -> Self {
        Self {
            vision: VisionConfig {
                image_size: 224,
                patch_size: 32,
                width: 768,
                layers: 12,
                heads: 12,
            },
            text: TextConfig {
                vocab_size: 49408,
                context_length: 77,
                width: 512,
                layers: 12,
                heads: 8,
            },
            embed_dim: 512,
        }
    }

    /// A small configuration with the same patch geometry as ViT-B/32.
    pub fn tiny() -> Self {
        Self {
            vision: VisionConfig {
                image_size: 224,
                patch_size: 32,
                width: 64,
                layers: 2,
                heads: 4,
            },
            text: TextConfig {
                vocab_size: 4096,
                context_length: 77,
                width: 64,
                layers: 2,
                heads: 4,
            },
            embed_dim: 32,
        }
    }

    /// Expected `(name, shape)` of every parameter.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let v = &self.vision;
        let t = &self.text;
        let g = v.image_size / v.patch_size;
        let mut out = vec![
            ("vision_model.embeddings.class_embedding".to_string(), vec![v.width]),
            (
                "vision_model.embeddings.patch_embedding.weight".to_string(),
                vec![v.width, 3, v.patch_size, v.patch_size],
            ),
            ("vision_model.embeddings.position_embedding.weight".to_string(), vec![g * g + 1, v.width]),
            ("vision_model.pre_layrnorm.weight".to_string(), vec![v.width]),
            ("vision_model.pre_layrnorm.bias".to_string(), vec![v.width]),
            ("vision_model.post_layernorm.weight".to_string(), vec![v.width]),
            ("vision_model.post_layernorm.bias".to_string(), vec![v.width]),
            ("visual_projection.weight".to_string(), vec![self.embed_dim, v.width]),
            ("text_model.embeddings.token_embedding.weight".to_string(), vec![t.vocab_size, t.width]),
            ("text_model.embeddings.position_embedding.weight".to_string(), vec![t.context_length, t.width]),
            ("text_model.final_layer_norm.weight".to_string(), vec![t.width]),
            ("text_model.final_layer_norm.bias".to_string(), vec![t.width]),
            ("text_projection.weight".to_string(), vec![self.embed_dim, t.width]),
            ("logit_scale".to_string(), vec![]),
        ];
        for (prefix, layers, w) in [("vision_model", v.layers, v.width), ("text_model", t.layers, t.width)] {
            for i in 0..layers {
                let p = format!("{prefix}.encoder.layers.{i}");
                for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                    out.push((format!("{p}.self_attn.{proj}.weight"), vec![w, w]));
                    out.push((format!("{p}.self_attn.{proj}.bias"), vec![w]));
                }
                for ln in ["layer_norm1", "layer_norm2"] {
                    out.push((format!("{p}.{ln}.weight"), vec![w]));
                    out.push((format!("{p}.{ln}.bias"), vec![w]));
                }
                out.push((format!("{p}.mlp.fc1.weight"), vec![4 * w, w]));
                out.push((format!("{p}.mlp.fc1.bias"), vec![4 * w]));
                out.push((format!("{p}.mlp.fc2.weight"), vec![w, 4 * w]));
                out.push((format!("{p}.mlp.fc2.bias"), vec![w]));
            }
        }
        out
    }
}

/// Seeded random weights for `config`, laid out like a pretrained export.
pub fn random_weights(config: &ClipConfig, seed: u64, dtype: DType) -> Result<HashMap<String, Tensor>> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut map = HashMap::new();
    for (name, shape) in config.parameter_shapes() {
        let n: usize = shape.iter().product::<usize>().max(1);
        let data: Vec<f32> = if name == "logit_scale" {
            vec![100f32.ln()]
        } else if name.contains("norm") && name.ends_with(".weight") {
            vec![1.0; n]
        } else if name.ends_with(".bias") {
            vec![0.0; n]
        } else if name.contains("embedding") && !name.contains("patch") {
            (0..n).map(|_| rng.random_range(-0.1f32..0.1)).collect()
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (3.0 / fan_in as f32).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let t = Tensor::from_vec(data, shape.as_slice(), &Device::Cpu)?.to_dtype(dtype)?;
        map.insert(name, t);
    }
    Ok(map)
}

pub(crate) struct WeightMap {
    map: HashMap<String, Tensor>,
}

impl WeightMap {
    pub fn new(map: HashMap<String, Tensor>, config: &ClipConfig, dtype: DType) -> Result<Self> {
        let mut out = HashMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = map
                .get(&name)
                .ok_or_else(|| Error::Backend(format!("missing weight `{name}`")))?;
            if t.dims() != shape.as_slice() && !(shape.is_empty() && t.elem_count() == 1) {
                return Err(Error::Backend(format!(
                    "weight `{name}` has shape {:?}, expected {shape:?}",
                    t.dims()
                )));
            }
            out.insert(name, t.to_dtype(dtype)?.detach());
        }
        Ok(Self { map: out })
    }

    pub fn get(&self, name: &str) -> Result<Tensor> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Backend(format!("missing weight `{name}`")))
    }
}

struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    fn load(w: &WeightMap, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: w.get(&format!("{prefix}.weight"))?,
            bias: w.get(&format!("{prefix}.bias"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nn::layer_norm(x, &self.weight, &self.bias, 1e-5)
    }
}

struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    fn load(w: &WeightMap, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: w.get(&format!("{prefix}.weight"))?,
            bias: Some(w.get(&format!("{prefix}.bias"))?),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        nn::linear(x, &self.weight, self.bias.as_ref())
    }
}

/// Collects per-layer attention probabilities as gradient-carrying leaves.
///
/// Each layer's probabilities `A` are replaced in the forward pass by
/// `P + (A - stop(A))` where `P` is a fresh variable holding `A`'s values, so
/// the forward output is unchanged and `dL/dP` is the total derivative of the
/// loss with respect to that layer's attention.
#[derive(Default)]
pub(crate) struct AttentionProbe {
    pub vars: Vec<Var>,
}

struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    heads: usize,
}

impl Block {
    fn load(w: &WeightMap, prefix: &str, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::load(w, &format!("{prefix}.layer_norm1"))?,
            q: Linear::load(w, &format!("{prefix}.self_attn.q_proj"))?,
            k: Linear::load(w, &format!("{prefix}.self_attn.k_proj"))?,
            v: Linear::load(w, &format!("{prefix}.self_attn.v_proj"))?,
            out: Linear::load(w, &format!("{prefix}.self_attn.out_proj"))?,
            ln2: LayerNorm::load(w, &format!("{prefix}.layer_norm2"))?,
            fc1: Linear::load(w, &format!("{prefix}.mlp.fc1"))?,
            fc2: Linear::load(w, &format!("{prefix}.mlp.fc2"))?,
            heads,
        })
    }

    fn attention(&self, x: &Tensor, mask: Option<&Tensor>, probe: Option<&mut AttentionProbe>) -> Result<Tensor> {
        let (b, n, width) = x.dims3()?;
        let dh = width / self.heads;
        let split = |t: Tensor| -> Result<Tensor> {
            Ok(t.reshape((b, n, self.heads, dh))?.transpose(1, 2)?.contiguous()?)
        };
        let q = split(self.q.forward(x)?.affine(1.0 / (dh as f64).sqrt(), 0.0)?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let mut scores = q.matmul(&k.t()?.contiguous()?)?;
        if let Some(mask) = mask {
            scores = scores.broadcast_add(mask)?;
        }
        let mut probs = nn::softmax_last_dim(&scores)?;
        if let Some(probe) = probe {
            let leaf = Var::from_tensor(&probs.detach())?;
            probs = (leaf.as_tensor() + (&probs - probs.detach())?)?;
            probe.vars.push(leaf);
        }
        let ctx = probs.matmul(&v)?.transpose(1, 2)?.reshape((b, n, width))?;
        self.out.forward(&ctx)
    }

    fn forward(&self, x: &Tensor, mask: Option<&Tensor>, probe: Option<&mut AttentionProbe>) -> Result<Tensor> {
        let x = (x + self.attention(&self.ln1.forward(x)?, mask, probe)?)?;
        let h = nn::quick_gelu(&self.fc1.forward(&self.ln2.forward(&x)?)?)?;
        Ok((&x + self.fc2.forward(&h)?)?)
    }
}

const CLIP_MEAN: [f64; 3] = [0.48145466, 0.4578275, 0.40821073];
const CLIP_STD: [f64; 3] = [0.26862954, 0.26130258, 0.27577711];

pub(crate) struct VisionTransformer {
    config: VisionConfig,
    patch: Tensor,
    class_embedding: Tensor,
    position_embedding: Tensor,
    ln_pre: LayerNorm,
    blocks: Vec<Block>,
    ln_post: LayerNorm,
    projection: Tensor,
    pos_cache: Mutex<HashMap<(usize, usize), Tensor>>,
}

pub(crate) struct VisionOutput {
    /// `(B, D)` projected, unnormalized class embedding.
    pub pooled: Tensor,
    /// `(B, K, W)` deepest-layer patch tokens.
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

impl VisionTransformer {
    pub fn load(w: &WeightMap, config: &VisionConfig) -> Result<Self> {
        let blocks = (0..config.layers)
            .map(|i| Block::load(w, &format!("vision_model.encoder.layers.{i}"), config.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            patch: w.get("vision_model.embeddings.patch_embedding.weight")?,
            class_embedding: w.get("vision_model.embeddings.class_embedding")?,
            position_embedding: w.get("vision_model.embeddings.position_embedding.weight")?,
            ln_pre: LayerNorm::load(w, "vision_model.pre_layrnorm")?,
            blocks,
            ln_post: LayerNorm::load(w, "vision_model.post_layernorm")?,
            projection: w.get("visual_projection.weight")?,
            pos_cache: Mutex::new(HashMap::new()),
        })
    }


    pub fn native_grid(&self) -> usize {
        self.config.image_size / self.config.patch_size
    }

    /// Position embeddings resampled to a `rows x cols` patch grid: the class
    /// slot is kept as is and the patch slots are bicubically interpolated
    /// over their 2D arrangement. Returns `(1 + rows * cols, W)`.
    pub fn interpolate_position_embeddings(&self, rows: usize, cols: usize) -> Result<Tensor> {
        if rows == 0 || cols == 0 {
            return Err(Error::Input(format!("patch grid must be at least 1x1, got {rows}x{cols}")));
        }
        if let Some(t) = self.pos_cache.lock().expect("position cache poisoned").get(&(rows, cols)) {
            return Ok(t.clone());
        }
        let g = self.native_grid();
        let width = self.config.width;
        let out = if (rows, cols) == (g, g) {
            self.position_embedding.clone()
        } else {
            let cls = self.position_embedding.narrow(0, 0, 1)?;
            let grid = self
                .position_embedding
                .narrow(0, 1, g * g)?
                .reshape((g, g, width))?
                .permute((2, 0, 1))?
                .contiguous()?;
            let resized = nn::resize_bicubic(&grid, rows, cols)?;
            let patches = resized.permute((1, 2, 0))?.reshape((rows * cols, width))?;
            Tensor::cat(&[&cls, &patches], 0)?
        };
        self.pos_cache
            .lock()
            .expect("position cache poisoned")
            .insert((rows, cols), out.clone());
        Ok(out)
    }

    pub fn forward(&self, images: &Tensor, mut probe: Option<&mut AttentionProbe>) -> Result<VisionOutput> {
        let (b, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape("vision input channels", 3, c));
        }
        let p = self.config.patch_size;
        if h < p || w < p {
            return Err(Error::Input(format!("image {h}x{w} is smaller than one {p}x{p} patch")));
        }
        let dtype = images.dtype();
        let mean = Tensor::from_vec(CLIP_MEAN.to_vec(), (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(CLIP_STD.to_vec(), (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let x = images.broadcast_sub(&mean)?.broadcast_div(&std)?;
        let (rows, cols) = (h / p, w / p);
        let x = x.narrow(2, 0, rows * p)?.narrow(3, 0, cols * p)?;
        let x = nn::conv2d(&x, &self.patch, None, p, 0)?; // (B, W, rows, cols)
        let width = self.config.width;
        let x = x.flatten_from(2)?.transpose(1, 2)?; // (B, K, W)
        let cls = self.class_embedding.reshape((1, 1, width))?.broadcast_as((b, 1, width))?;
        let x = Tensor::cat(&[&cls, &x], 1)?;
        let pos = self.interpolate_position_embeddings(rows, cols)?;
        let mut x = self.ln_pre.forward(&x.broadcast_add(&pos.unsqueeze(0)?)?)?;
        for block in &self.blocks {
            x = block.forward(&x, None, probe.as_deref_mut())?;
        }
        let tokens = x.narrow(1, 1, rows * cols)?;
        let pooled = self.ln_post.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        let pooled = nn::linear(&pooled, &self.projection, None)?;
        Ok(VisionOutput {
            pooled,
            tokens,
            grid: (rows, cols),
        })
    }
}

pub(crate) struct TextTransformer {
    config: TextConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    blocks: Vec<Block>,
    ln_final: LayerNorm,
    projection: Tensor,
}

impl TextTransformer {
    pub fn load(w: &WeightMap, config: &TextConfig) -> Result<Self> {
        let blocks = (0..config.layers)
            .map(|i| Block::load(w, &format!("text_model.encoder.layers.{i}"), config.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            config: config.clone(),
            token_embedding: w.get("text_model.embeddings.token_embedding.weight")?,
            position_embedding: w.get("text_model.embeddings.position_embedding.weight")?,
            blocks,
            ln_final: LayerNorm::load(w, "text_model.final_layer_norm")?,
            projection: w.get("text_projection.weight")?,
        })
    }

    /// Projected, unnormalized embedding of a token sequence that ends with
    /// the end-of-text token.
    pub fn forward(&self, tokens: &[u32]) -> Result<Tensor> {
        let n = tokens.len();
        if n == 0 || n > self.config.context_length {
            return Err(Error::Input(format!(
                "token sequence length {n} outside 1..={}",
                self.config.context_length
            )));
        }
        let ids = Tensor::from_slice(tokens, n, &Device::Cpu)?;
        let x = self.token_embedding.index_select(&ids, 0)?;
        let x = (x + self.position_embedding.narrow(0, 0, n)?)?.unsqueeze(0)?;
        let dtype = x.dtype();
        let mask: Vec<f32> = (0..n * n)
            .map(|i| if i % n > i / n { f32::NEG_INFINITY } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, (1, 1, n, n), &Device::Cpu)?.to_dtype(dtype)?;
        let mut x = x;
        for block in &self.blocks {
            x = block.forward(&x, Some(&mask), None)?;
        }
        let x = self.ln_final.forward(&x)?;
        let eot = x.narrow(1, n - 1, 1)?.squeeze(1)?.squeeze(0)?;
        Ok(nn::linear(&eot.unsqueeze(0)?, &self.projection, None)?.squeeze(0)?)
    }
}

/// Normalizes the last dim, used for embeddings.
pub(crate) fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(super::NORM_EPS)?;
    Ok(x.broadcast_div(&n)?)
}
