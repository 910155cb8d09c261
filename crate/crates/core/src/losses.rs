//! The editing objective and its terms.
//!
//! Every term has a differentiable tensor form (used by the trainer) and a
//! value form over [`Image`]/[`EditLayer`] inputs. Both go through the same
//! code, and the weighted sum is computed by one coefficient table so the
//! tensor total and [`total_loss`] cannot drift apart.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backend::{self, EmbeddingBackend, RelevancyMap, SpatialTokens, NORM_EPS};
use crate::error::{Error, Result};
use crate::image::{self, EditLayer, Image, OpacityMap, Rgb, TextBundle};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Screen term weight.
    pub lambda_g: f64,
    /// Structure term weight.
    pub lambda_s: f64,
    /// Sparsity term weight.
    pub lambda_r: f64,
    /// L1 coefficient inside the sparsity term.
    pub gamma: f64,
    /// Initial bootstrap weight.
    pub bootstrap_w0: f64,
}

impl LossWeights {
    pub const fn image() -> Self {
        Self {
            lambda_g: 1.0,
            lambda_s: 2.0,
            lambda_r: 5e-2,
            gamma: 2.0,
            bootstrap_w0: 10.0,
        }
    }

    pub const fn video() -> Self {
        Self {
            lambda_s: 3.0,
            lambda_r: 5e-4,
            ..Self::image()
        }
    }

    /// Names the first negative or non-finite weight.
    pub fn validate(&self) -> std::result::Result<(), (&'static str, f64)> {
        for (name, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_s", self.lambda_s),
            ("lambda_r", self.lambda_r),
            ("gamma", self.gamma),
            ("bootstrap_w0", self.bootstrap_w0),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err((name, v));
            }
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::image()
    }
}

/// Per-term on/off switches; all on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossToggles {
    /// The cosine part of the composition term.
    pub enable_composition: bool,
    pub enable_directional: bool,
    pub enable_screen: bool,
    pub enable_structure: bool,
    pub enable_sparsity: bool,
    pub enable_bootstrap: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            enable_composition: true,
            enable_directional: true,
            enable_screen: true,
            enable_structure: true,
            enable_sparsity: true,
            enable_bootstrap: true,
        }
    }
}

/// Names accepted by [`LossToggles::disable`].
pub const TERM_NAMES: [&str; 6] = ["composition", "directional", "screen", "structure", "sparsity", "bootstrap"];

impl LossToggles {
    pub fn none() -> Self {
        Self {
            enable_composition: false,
            enable_directional: false,
            enable_screen: false,
            enable_structure: false,
            enable_sparsity: false,
            enable_bootstrap: false,
        }
    }

    pub fn only_bootstrap() -> Self {
        Self {
            enable_bootstrap: true,
            ..Self::none()
        }
    }

    fn slot(&mut self, term: &str) -> Option<&mut bool> {
        Some(match term {
            "composition" => &mut self.enable_composition,
            "directional" => &mut self.enable_directional,
            "screen" => &mut self.enable_screen,
            "structure" => &mut self.enable_structure,
            "sparsity" => &mut self.enable_sparsity,
            "bootstrap" => &mut self.enable_bootstrap,
            _ => return None,
        })
    }

    /// Turns off a term by name; see [`TERM_NAMES`].
    pub fn disable(&mut self, term: &str) -> Result<()> {
        match self.slot(term) {
            Some(flag) => {
                *flag = false;
                Ok(())
            }
            None => Err(Error::Input(format!(
                "unknown loss term `{term}`, expected one of {}",
                TERM_NAMES.join(", ")
            ))),
        }
    }
}

/// Raw (unweighted) term values.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub comp_cos: f64,
    pub comp_dir: f64,
    pub screen: f64,
    pub structure: f64,
    pub sparsity_l1: f64,
    pub sparsity_l0: f64,
    pub bootstrap: f64,
}

/// Term values plus the weighted total of the enabled ones.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub comp_cos: f64,
    pub comp_dir: f64,
    pub screen: f64,
    pub structure: f64,
    pub sparsity_l1: f64,
    pub sparsity_l0: f64,
    pub bootstrap: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [
            self.comp_cos,
            self.comp_dir,
            self.screen,
            self.structure,
            self.sparsity_l1,
            self.sparsity_l0,
            self.bootstrap,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    /// The composition objective, cosine plus directional.
    pub fn composition(&self) -> f64 {
        self.comp_cos + self.comp_dir
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&serde_json::to_string(self).map_err(|_| std::fmt::Error)?)
    }
}

/// Multipliers applied to each raw term in the total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub comp_cos: f64,
    pub comp_dir: f64,
    pub screen: f64,
    pub structure: f64,
    pub sparsity_l1: f64,
    pub sparsity_l0: f64,
    pub bootstrap: f64,
}

pub fn coefficients(weights: &LossWeights, bootstrap_weight: f64, toggles: &LossToggles) -> Coefficients {
    let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
    Coefficients {
        comp_cos: on(toggles.enable_composition, 1.0),
        comp_dir: on(toggles.enable_directional, 1.0),
        screen: on(toggles.enable_screen, weights.lambda_g),
        structure: on(toggles.enable_structure, weights.lambda_s),
        sparsity_l1: on(toggles.enable_sparsity, weights.lambda_r * weights.gamma),
        sparsity_l0: on(toggles.enable_sparsity, weights.lambda_r),
        bootstrap: on(toggles.enable_bootstrap, bootstrap_weight),
    }
}

/// Weighted sum of `parts`; disabled terms contribute nothing.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, bootstrap_weight: f64, toggles: &LossToggles) -> LossReport {
    let c = coefficients(weights, bootstrap_weight, toggles);
    let total = c.comp_cos * parts.comp_cos
        + c.comp_dir * parts.comp_dir
        + c.screen * parts.screen
        + c.structure * parts.structure
        + c.sparsity_l1 * parts.sparsity_l1
        + c.sparsity_l0 * parts.sparsity_l0
        + c.bootstrap * parts.bootstrap;
    LossReport {
        comp_cos: parts.comp_cos,
        comp_dir: parts.comp_dir,
        screen: parts.screen,
        structure: parts.structure,
        sparsity_l1: parts.sparsity_l1,
        sparsity_l0: parts.sparsity_l0,
        bootstrap: parts.bootstrap,
        total,
    }
}

/// Scalar term tensors; `None` for terms that were not evaluated.
#[derive(Debug, Clone, Default)]
pub struct TermTensors {
    pub comp_cos: Option<Tensor>,
    pub comp_dir: Option<Tensor>,
    pub screen: Option<Tensor>,
    pub structure: Option<Tensor>,
    pub sparsity_l1: Option<Tensor>,
    pub sparsity_l0: Option<Tensor>,
    pub bootstrap: Option<Tensor>,
}

impl TermTensors {
    /// Differentiable weighted total and its report.
    pub fn assemble(
        &self,
        weights: &LossWeights,
        bootstrap_weight: f64,
        toggles: &LossToggles,
    ) -> Result<(Tensor, LossReport)> {
        let c = coefficients(weights, bootstrap_weight, toggles);
        let mut parts = LossParts::default();
        let mut total: Option<Tensor> = None;
        let terms = [
            (&self.comp_cos, c.comp_cos, &mut parts.comp_cos),
            (&self.comp_dir, c.comp_dir, &mut parts.comp_dir),
            (&self.screen, c.screen, &mut parts.screen),
            (&self.structure, c.structure, &mut parts.structure),
            (&self.sparsity_l1, c.sparsity_l1, &mut parts.sparsity_l1),
            (&self.sparsity_l0, c.sparsity_l0, &mut parts.sparsity_l0),
            (&self.bootstrap, c.bootstrap, &mut parts.bootstrap),
        ];
        for (term, coef, slot) in terms {
            let Some(t) = term else { continue };
            *slot = nn::scalar(t)?;
            if coef == 0.0 {
                continue;
            }
            let weighted = t.affine(coef, 0.0)?;
            total = Some(match total {
                Some(acc) => (acc + weighted)?,
                None => weighted,
            });
        }
        let report = total_loss(&parts, weights, bootstrap_weight, toggles);
        let total = match total {
            Some(t) => t,
            None => Tensor::new(0f32, &Device::Cpu)?,
        };
        Ok((total, report))
    }
}

fn mean_cosine_distance(embeddings: &Tensor, text: &Tensor) -> Result<Tensor> {
    let sim = embeddings.broadcast_mul(&text.unsqueeze(0)?)?.sum(D::Minus1)?;
    Ok(sim.affine(-1.0, 1.0)?.mean_all()?)
}

/// Differentiable composition terms over batched views.
///
/// `comp_cos` is the mean cosine distance of the output-view embeddings to
/// the target text. `comp_dir` pairs each output view with the matching
/// source view and measures the cosine distance between the image
/// displacement and the text displacement `target - roi`; a view whose
/// displacement norm is below [`NORM_EPS`] contributes zero, as does a
/// degenerate text displacement. Without `roi`, `comp_dir` is `None`.
pub fn composition_terms(
    backend: &dyn EmbeddingBackend,
    out_views: &Tensor,
    src_views: &Tensor,
    target: &Tensor,
    roi: Option<&Tensor>,
) -> Result<(Tensor, Option<Tensor>)> {
    if out_views.dim(0)? == 0 {
        return Err(Error::Input("composition loss needs at least one view".into()));
    }
    let e_out = backend.image_features(out_views)?.embedding;
    let comp_cos = mean_cosine_distance(&e_out, target)?;
    let Some(roi) = roi else {
        return Ok((comp_cos, None));
    };
    let e_src = backend.image_features(src_views)?.embedding.detach();
    let comp_dir = directional_term(&e_out, &e_src, target, roi)?;
    Ok((comp_cos, Some(comp_dir)))
}

/// Mean over views of `D_cos(e_out - e_src, t - t_roi)` with the
/// degenerate-difference guard.
pub fn directional_term(e_out: &Tensor, e_src: &Tensor, target: &Tensor, roi: &Tensor) -> Result<Tensor> {
    let d_txt = (target - roi)?;
    let txt_norm = nn::scalar(&d_txt.sqr()?.sum_all()?.sqrt()?)?;
    let dtype = e_out.dtype();
    let n = e_out.dim(0)?;
    if txt_norm < NORM_EPS {
        return Ok(Tensor::zeros((), dtype, &Device::Cpu)?);
    }
    let d_txt = (d_txt / txt_norm)?;
    let d_img = (e_out - e_src)?;
    let norms = d_img.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let live: Vec<f64> = norms
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .into_iter()
        .map(|v| if v >= NORM_EPS { 1.0 } else { 0.0 })
        .collect();
    let live = Tensor::from_vec(live, n, &Device::Cpu)?.to_dtype(dtype)?;
    let unit = d_img.broadcast_div(&norms.maximum(NORM_EPS)?)?;
    let cos = unit.broadcast_mul(&d_txt.unsqueeze(0)?)?.sum(D::Minus1)?;
    Ok((cos.affine(-1.0, 1.0)? * live)?.mean_all()?)
}

/// Mean cosine distance of green-screen composites to the screen prompt.
pub fn screen_term(
    backend: &dyn EmbeddingBackend,
    color_views: &Tensor,
    alpha_views: &Tensor,
    green: Rgb,
    screen_text: &Tensor,
) -> Result<Tensor> {
    let green = Tensor::from_vec(green.to_vec(), (1, 3, 1, 1), &Device::Cpu)?.to_dtype(color_views.dtype())?;
    let screen = image::composite_tensor(color_views, alpha_views, &green)?;
    let e = backend.image_features(&screen)?.embedding;
    mean_cosine_distance(&e, screen_text)
}

/// `K x K` cosine self-similarity of `(K, W)` tokens.
pub fn self_similarity_tensor(tokens: &Tensor) -> Result<Tensor> {
    let unit = backend::normalize_rows(tokens)?;
    Ok(unit.matmul(&unit.t()?)?)
}

/// Frobenius norm with a finite gradient at zero.
///
/// With `d = sqrt(s)` held constant, `0.5 s / d + 0.5 d` equals `d` and has
/// gradient `grad(s) / (2 d)`, the true derivative; near zero the divisor is
/// clamped to [`NORM_EPS`].
fn safe_frobenius(diff: &Tensor) -> Result<Tensor> {
    let ss = diff.sqr()?.sum_all()?;
    let d = nn::scalar(&ss)?.sqrt();
    Ok(ss.affine(0.5 / d.max(NORM_EPS), 0.5 * d)?)
}

/// `||S(src) - S(out)||_F` from `(K, W)` token tensors; `src` is treated as
/// a constant.
pub fn structure_term_from_tokens(src_tokens: &Tensor, out_tokens: &Tensor) -> Result<Tensor> {
    if src_tokens.dims() != out_tokens.dims() {
        return Err(Error::shape("structure tokens", src_tokens.dims(), out_tokens.dims()));
    }
    let s_src = self_similarity_tensor(&src_tokens.detach())?;
    let s_out = self_similarity_tensor(out_tokens)?;
    safe_frobenius(&(s_src - s_out)?)
}

/// Structure term on `(1, 3, H, W)` images already resized identically.
pub fn structure_term(backend: &dyn EmbeddingBackend, src: &Tensor, out: &Tensor) -> Result<Tensor> {
    let t_src = backend.image_features(src)?.tokens.squeeze(0)?;
    let t_out = backend.image_features(out)?.tokens.squeeze(0)?;
    structure_term_from_tokens(&t_src, &t_out)
}

/// `(mean(alpha), mean(2 sigmoid(5 alpha) - 1))`.
pub fn sparsity_terms(alpha: &Tensor) -> Result<(Tensor, Tensor)> {
    let l1 = alpha.abs()?.mean_all()?;
    let l0 = nn::sigmoid(&alpha.affine(5.0, 0.0)?)?.affine(2.0, -1.0)?.mean_all()?;
    Ok((l1, l0))
}

/// MSE between the relevancy map and `alpha` bilinearly resized to 224x224.
/// `alpha` is `(1, 1, H, W)`, `relevancy` is `(1, 1, 224, 224)`.
pub fn bootstrap_term(alpha: &Tensor, relevancy: &Tensor) -> Result<Tensor> {
    let size = backend::relevancy::RELEVANCY_SIZE;
    let a = nn::resize_bilinear(alpha, size, size)?;
    Ok((a - relevancy)?.sqr()?.mean_all()?)
}

// ---- value-level forms ----

fn stack_images(images: &[Image], dtype: DType) -> Result<Tensor> {
    let ts = images.iter().map(|i| i.to_tensor(dtype)).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&ts, 0)?)
}

/// `(comp_cos, comp_dir)` over paired output and source views. Without a
/// region-of-interest prompt the directional term is 0.
pub fn composition_loss(
    out_views: &[Image],
    src_views: &[Image],
    bundle: &TextBundle,
    backend: &dyn EmbeddingBackend,
) -> Result<(f64, f64)> {
    if out_views.is_empty() {
        return Err(Error::Input("composition loss needs at least one view".into()));
    }
    if out_views.len() != src_views.len() {
        return Err(Error::shape("paired source views", out_views.len(), src_views.len()));
    }
    let dtype = backend.dtype();
    let target = backend.text_embedding(bundle.target())?;
    let roi = bundle.roi().map(|r| backend.text_embedding(r)).transpose()?;
    let (cos, dir) = composition_terms(
        backend,
        &stack_images(out_views, dtype)?,
        &stack_images(src_views, dtype)?,
        &target,
        roi.as_ref(),
    )?;
    Ok((nn::scalar(&cos)?, dir.map(|d| nn::scalar(&d)).transpose()?.unwrap_or(0.0)))
}

pub fn screen_loss(
    layer_views: &[EditLayer],
    bundle: &TextBundle,
    green: Rgb,
    backend: &dyn EmbeddingBackend,
) -> Result<f64> {
    if layer_views.is_empty() {
        return Err(Error::Input("screen loss needs at least one view".into()));
    }
    let views = layer_views
        .iter()
        .map(|l| image::green_screen_composite(l, green))
        .collect::<Result<Vec<_>>>()?;
    let text = backend.text_embedding(&bundle.screen_prompt())?;
    let e = backend.image_features(&stack_images(&views, backend.dtype())?)?.embedding;
    nn::scalar(&mean_cosine_distance(&e, &text)?)
}

/// Symmetric `K x K` matrix of pairwise token cosine similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfSimilarityMatrix {
    pub size: usize,
    /// Row-major `K x K`.
    pub values: Vec<f64>,
}

impl SelfSimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

pub fn self_similarity(tokens: &SpatialTokens) -> Result<SelfSimilarityMatrix> {
    if tokens.count() == 0 {
        return Err(Error::Input("self-similarity of zero tokens".into()));
    }
    let t = tokens.to_tensor(DType::F64)?;
    let s = self_similarity_tensor(&t)?;
    Ok(SelfSimilarityMatrix {
        size: tokens.count(),
        values: s.flatten_all()?.to_vec1()?,
    })
}

/// Both images are resized to shortest side 224 (aspect kept) before token
/// extraction, so equal-sized inputs give matching token grids.
pub fn structure_loss(src: &Image, out: &Image, backend: &dyn EmbeddingBackend) -> Result<f64> {
    if src.dims() != out.dims() {
        return Err(Error::shape("structure loss output", src.dims(), out.dims()));
    }
    let a = src.resize_shortest_side(224)?.to_tensor(backend.dtype())?;
    let b = out.resize_shortest_side(224)?.to_tensor(backend.dtype())?;
    nn::scalar(&structure_term(backend, &a, &b)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityTerms {
    pub l1: f64,
    pub l0: f64,
    /// `gamma * l1 + l0`.
    pub combined: f64,
}

pub fn sparsity_loss(alpha: &OpacityMap, gamma: f64) -> Result<SparsityTerms> {
    let (l1, l0) = sparsity_terms(&alpha.to_tensor(DType::F64)?)?;
    let (l1, l0) = (nn::scalar(&l1)?, nn::scalar(&l0)?);
    Ok(SparsityTerms {
        l1,
        l0,
        combined: gamma * l1 + l0,
    })
}

pub fn bootstrap_loss(relevancy: &RelevancyMap, alpha: &OpacityMap) -> Result<f64> {
    let r = relevancy.to_opacity().to_tensor(DType::F64)?;
    nn::scalar(&bootstrap_term(&alpha.to_tensor(DType::F64)?, &r)?)
}
