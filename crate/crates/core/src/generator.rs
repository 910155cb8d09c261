//! U-Net style generator mapping an image to an RGBA edit layer.
//!
//! Encoder: one stride-1 3x3 conv followed by `encoder_depth - 1` stride-2
//! 3x3 convs, each with batch norm and leaky ReLU, all `base_channels` wide.
//! Every level except the deepest also feeds a 1x1 skip projection. The
//! decoder mirrors the encoder: nearest 2x upsample, concat with the skip
//! features, 3x3 conv, batch norm, leaky ReLU. A 1x1 conv with sigmoid
//! produces 3 color channels and 1 opacity channel.
//!
//! Inputs are reflect-padded up to a multiple of `2^(encoder_depth - 1)`
//! and the output is cropped back, so any size is accepted.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{EditLayer, Image, OpacityMap};
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Number of resolution levels, including the bottleneck.
    pub encoder_depth: usize,
    pub base_channels: usize,
    /// Width of each 1x1 skip projection.
    pub skip_channels: usize,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            encoder_depth: 7,
            base_channels: 128,
            skip_channels: 4,
            leaky_slope: 0.2,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.encoder_depth < 2 {
            return Err(("encoder_depth", format!("must be at least 2, got {}", self.encoder_depth)));
        }
        if self.base_channels == 0 {
            return Err(("base_channels", "must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(("bn_momentum", format!("must lie in [0, 1], got {}", self.bn_momentum)));
        }
        if !(self.bn_eps > 0.0) {
            return Err(("bn_eps", "must be positive".into()));
        }
        Ok(())
    }

    /// Spatial multiple the padded input must satisfy.
    pub fn size_multiple(&self) -> usize {
        1 << (self.encoder_depth - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running averages.
    Eval,
}

struct ConvBn {
    weight: Var,
    gamma: Var,
    beta: Var,
    running_mean: Tensor,
    running_var: Tensor,
    stride: usize,
    pad: usize,
}

struct BatchStats {
    mean: Tensor,
    var: Tensor,
    count: usize,
}

impl ConvBn {
    fn new(rng: &mut impl Rng, cin: usize, cout: usize, k: usize, stride: usize, slope: f64) -> Result<Self> {
        Ok(Self {
            weight: Var::from_tensor(&kaiming_uniform(rng, &[cout, cin, k, k], slope)?)?,
            gamma: Var::ones(cout, DType::F32, &Device::Cpu)?,
            beta: Var::zeros(cout, DType::F32, &Device::Cpu)?,
            running_mean: Tensor::zeros(cout, DType::F32, &Device::Cpu)?,
            running_var: Tensor::ones(cout, DType::F32, &Device::Cpu)?,
            stride,
            pad: k / 2,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode, cfg: &GeneratorConfig) -> Result<(Tensor, Option<BatchStats>)> {
        let y = nn::conv2d(x, self.weight.as_tensor(), None, self.stride, self.pad)?;
        let c = y.dim(1)?;
        let (y, stats) = match mode {
            Mode::Train => {
                let (b, _, h, w) = y.dims4()?;
                let flat = y.transpose(0, 1)?.reshape((c, b * h * w))?;
                let mean = flat.mean_keepdim(D::Minus1)?;
                let centered = flat.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
                let normed = centered
                    .broadcast_div(&(&var + cfg.bn_eps)?.sqrt()?)?
                    .reshape((c, b, h, w))?
                    .transpose(0, 1)?;
                let stats = BatchStats {
                    mean: mean.flatten_all()?.detach(),
                    var: var.flatten_all()?.detach(),
                    count: b * h * w,
                };
                (normed, Some(stats))
            }
            Mode::Eval => {
                let mean = self.running_mean.reshape((1, c, 1, 1))?;
                let std = (&self.running_var + cfg.bn_eps)?.sqrt()?.reshape((1, c, 1, 1))?;
                (y.broadcast_sub(&mean)?.broadcast_div(&std)?, None)
            }
        };
        let y = y
            .broadcast_mul(&self.gamma.as_tensor().reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.beta.as_tensor().reshape((1, c, 1, 1))?)?;
        Ok((nn::leaky_relu(&y, cfg.leaky_slope)?, stats))
    }

    fn update_stats(&mut self, stats: &BatchStats, momentum: f64) -> Result<()> {
        // running variance tracks the unbiased estimate; a single sample
        // has none, so the biased one is used there
        let n = stats.count as f64;
        let unbiased = if stats.count > 1 {
            stats.var.affine(n / (n - 1.0), 0.0)?
        } else {
            stats.var.clone()
        };
        self.running_mean = (self.running_mean.affine(1.0 - momentum, 0.0)? + stats.mean.affine(momentum, 0.0)?)?;
        self.running_var = (self.running_var.affine(1.0 - momentum, 0.0)? + unbiased.affine(momentum, 0.0)?)?;
        Ok(())
    }
}

fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], slope: f64) -> Result<Tensor> {
    let fan_in: usize = shape[1..].iter().product();
    let gain2 = 2.0 / (1.0 + slope * slope);
    let bound = (3.0 * gain2 / fan_in as f64).sqrt() as f32;
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Generator parameters, batch-norm statistics and the training step count.
pub struct GeneratorState {
    config: GeneratorConfig,
    encoder: Vec<ConvBn>,
    skips: Vec<ConvBn>,
    decoder: Vec<ConvBn>,
    head_weight: Var,
    head_bias: Var,
    pub step: u64,
}

impl std::fmt::Debug for GeneratorState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GeneratorState")
            .field("config", &self.config)
            .field("step", &self.step)
            .finish_non_exhaustive()
    }
}

impl GeneratorState {
    /// Seeded initialization; equal seeds give bitwise-equal parameters.
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        config
            .validate()
            .map_err(|(field, msg)| Error::config(format!("generator.{field}"), msg))?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let c = config.base_channels;
        let s = config.skip_channels;
        let slope = config.leaky_slope;
        let depth = config.encoder_depth;
        let mut encoder = vec![ConvBn::new(&mut rng, 3, c, 3, 1, slope)?];
        for _ in 1..depth {
            encoder.push(ConvBn::new(&mut rng, c, c, 3, 2, slope)?);
        }
        let mut skips = Vec::new();
        let mut decoder = Vec::new();
        for _ in 0..depth - 1 {
            if s > 0 {
                skips.push(ConvBn::new(&mut rng, c, s, 1, 1, slope)?);
            }
            decoder.push(ConvBn::new(&mut rng, c + s, c, 3, 1, slope)?);
        }
        let head_weight = Var::from_tensor(&kaiming_uniform(&mut rng, &[4, c, 1, 1], 1.0)?)?;
        let head_bias = Var::zeros(4, DType::F32, &Device::Cpu)?;
        Ok(Self {
            config: config.clone(),
            encoder,
            skips,
            decoder,
            head_weight,
            head_bias,
            step: 0,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    fn blocks(&self) -> impl Iterator<Item = (String, &ConvBn)> {
        let enc = self.encoder.iter().enumerate().map(|(i, b)| (format!("encoder.{i}"), b));
        let skip = self.skips.iter().enumerate().map(|(i, b)| (format!("skip.{i}"), b));
        let dec = self.decoder.iter().enumerate().map(|(i, b)| (format!("decoder.{i}"), b));
        enc.chain(skip).chain(dec)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = (String, &mut ConvBn)> {
        let enc = self.encoder.iter_mut().enumerate().map(|(i, b)| (format!("encoder.{i}"), b));
        let skip = self.skips.iter_mut().enumerate().map(|(i, b)| (format!("skip.{i}"), b));
        let dec = self.decoder.iter_mut().enumerate().map(|(i, b)| (format!("decoder.{i}"), b));
        enc.chain(skip).chain(dec)
    }

    /// Trainable parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.conv.weight"), b.weight.clone()));
            out.push((format!("{name}.bn.weight"), b.gamma.clone()));
            out.push((format!("{name}.bn.bias"), b.beta.clone()));
        }
        out.push(("head.weight".into(), self.head_weight.clone()));
        out.push(("head.bias".into(), self.head_bias.clone()));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Parameters and batch-norm statistics, by name.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .parameters()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().detach()))
            .collect();
        for (name, b) in self.blocks() {
            out.push((format!("{name}.bn.running_mean"), b.running_mean.clone()));
            out.push((format!("{name}.bn.running_var"), b.running_var.clone()));
        }
        out
    }

    /// Overwrites every tensor from `lookup`; shapes must match exactly.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        let mut fetch = |name: String, like: &Tensor| -> Result<Tensor> {
            let t = lookup(&name).ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            if t.dims() != like.dims() {
                return Err(Error::Input(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    like.dims()
                )));
            }
            Ok(t.to_dtype(DType::F32)?)
        };
        for (name, var) in self.parameters() {
            let t = fetch(name, var.as_tensor())?;
            var.set(&t)?;
        }
        let mut stats = Vec::new();
        for (name, b) in self.blocks() {
            stats.push((
                fetch(format!("{name}.bn.running_mean"), &b.running_mean)?,
                fetch(format!("{name}.bn.running_var"), &b.running_var)?,
            ));
        }
        for ((_, b), (m, v)) in self.blocks_mut().zip(stats) {
            b.running_mean = m;
            b.running_var = v;
        }
        Ok(())
    }

    fn forward_impl(&self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor, Vec<Option<BatchStats>>)> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape("generator input channels", 3, c));
        }
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
        let x = nn::reflect_pad(&x.to_dtype(DType::F32)?, ph / 2, ph - ph / 2, pw / 2, pw - pw / 2)?;
        let cfg = &self.config;
        let mut stats = Vec::new();
        let mut feats = Vec::with_capacity(self.encoder.len());
        let mut cur = x;
        for block in &self.encoder {
            let (y, s) = block.forward(&cur, mode, cfg)?;
            stats.push(s);
            feats.push(y.clone());
            cur = y;
        }
        let mut skip_feats = Vec::new();
        for (i, block) in self.skips.iter().enumerate() {
            let (y, s) = block.forward(&feats[i], mode, cfg)?;
            stats.push(s);
            skip_feats.push(y);
        }
        let mut dec_stats = Vec::new();
        for level in (0..self.decoder.len()).rev() {
            let up = nn::upsample_nearest2x(&cur)?;
            let input = match skip_feats.get(level) {
                Some(s) => Tensor::cat(&[&up, s], 1)?,
                None => up,
            };
            let (y, s) = self.decoder[level].forward(&input, mode, cfg)?;
            dec_stats.push((level, s));
            cur = y;
        }
        dec_stats.sort_by_key(|(l, _)| *l);
        stats.extend(dec_stats.into_iter().map(|(_, s)| s));
        let out = nn::conv2d(&cur, self.head_weight.as_tensor(), Some(self.head_bias.as_tensor()), 1, 0)?;
        let out = nn::sigmoid(&out)?
            .narrow(2, ph / 2, h)?
            .narrow(3, pw / 2, w)?;
        let color = out.narrow(1, 0, 3)?;
        let alpha = out.narrow(1, 3, 1)?;
        Ok((color, alpha, stats))
    }

    /// Differentiable forward of a `(B, 3, H, W)` batch; returns color
    /// `(B, 3, H, W)` and opacity `(B, 1, H, W)`. In training mode the
    /// batch-norm running statistics are updated.
    pub fn forward_tensor(&mut self, x: &Tensor, mode: Mode) -> Result<(Tensor, Tensor)> {
        let (color, alpha, stats) = self.forward_impl(x, mode)?;
        if mode == Mode::Train {
            let momentum = self.config.bn_momentum;
            for ((_, block), s) in self.blocks_mut().zip(stats) {
                if let Some(s) = s {
                    block.update_stats(&s, momentum)?;
                }
            }
        }
        Ok((color, alpha))
    }

    /// Evaluation-mode forward; does not modify the state.
    pub fn forward_eval(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (color, alpha, _) = self.forward_impl(x, Mode::Eval)?;
        Ok((color, alpha))
    }

    /// Evaluation-mode edit layer for `img`.
    pub fn forward(&self, img: &Image) -> Result<EditLayer> {
        let (color, alpha) = self.forward_eval(&img.to_tensor(DType::F32)?)?;
        EditLayer::new(Image::from_tensor(&color)?, OpacityMap::from_tensor(&alpha)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig {
            encoder_depth: 3,
            base_channels: 8,
            ..Default::default()
        }
    }

    #[test]
    fn default_parameter_count() {
        let g = GeneratorState::build(&GeneratorConfig::default(), 0).unwrap();
        assert_eq!(g.parameter_count(), 1_807_540);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = GeneratorState::build(&small(), 3).unwrap();
        let b = GeneratorState::build(&small(), 3).unwrap();
        for ((na, ta), (nb, tb)) in a.named_tensors().into_iter().zip(b.named_tensors()) {
            assert_eq!(na, nb);
            let va: Vec<f32> = ta.flatten_all().unwrap().to_vec1().unwrap();
            let vb: Vec<f32> = tb.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(va, vb);
        }
    }

    #[test]
    fn odd_sizes_round_trip() {
        let g = GeneratorState::build(&small(), 1).unwrap();
        let img = Image::from_fn(13, 21, |y, x| [y as f32 / 13.0, x as f32 / 21.0, 0.5]).unwrap();
        let out = g.forward(&img).unwrap();
        assert_eq!(out.dims(), (13, 21));
        assert!(out.alpha().values().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(out, g.forward(&img).unwrap());
    }

    #[test]
    fn training_updates_running_stats_and_gradients_are_finite() {
        let mut g = GeneratorState::build(&small(), 2).unwrap();
        let before = g.named_tensors();
        let x = Tensor::rand(0f32, 1f32, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let (c, a) = g.forward_tensor(&x, Mode::Train).unwrap();
        let loss = (c.sum_all().unwrap() + a.sqr().unwrap().sum_all().unwrap()).unwrap();
        let grads = loss.backward().unwrap();
        for (name, v) in g.parameters() {
            let gr = grads.get(v.as_tensor()).unwrap_or_else(|| panic!("no gradient for {name}"));
            let vals: Vec<f32> = gr.flatten_all().unwrap().to_vec1().unwrap();
            assert!(vals.iter().all(|v| v.is_finite()), "{name}");
        }
        let after = g.named_tensors();
        let moved = before
            .iter()
            .zip(&after)
            .filter(|((n, _), _)| n.ends_with("running_mean"))
            .any(|((_, a), (_, b))| {
                let a: Vec<f32> = a.to_vec1().unwrap();
                let b: Vec<f32> = b.to_vec1().unwrap();
                a != b
            });
        assert!(moved);
    }
}
