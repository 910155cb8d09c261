//! Mapping atlas-space layers onto frames and blending the result.

use candle_core::{Device, Tensor};

use super::package::{AtlasPackage, Layer, TexelMap, UvGrid};
use super::segment::TexelRect;
use crate::error::{Error, Result};
use crate::image::{self, EditLayer, Image, OpacityMap};

// Sample points this far outside the source grid still count as inside.
const EDGE_TOLERANCE: f64 = 1e-3;

/// Precomputed bilinear gather of a fixed set of points from a source grid.
/// Points outside the grid read zero and are flagged invalid.
pub(crate) struct SamplePoints {
    src: (usize, usize),
    idx: [Vec<u32>; 4],
    weight: [Vec<f32>; 4],
    valid: Vec<bool>,
}

impl SamplePoints {
    /// `points` are `(row, col)` pixel coordinates in a `src` sized grid.
    pub fn new(src: (usize, usize), points: impl IntoIterator<Item = (f64, f64)>) -> Self {
        let (h, w) = src;
        let mut idx: [Vec<u32>; 4] = Default::default();
        let mut weight: [Vec<f32>; 4] = Default::default();
        let mut valid = Vec::new();
        let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
        for (y, x) in points {
            let inside = y.is_finite()
                && x.is_finite()
                && (-EDGE_TOLERANCE..=ymax + EDGE_TOLERANCE).contains(&y)
                && (-EDGE_TOLERANCE..=xmax + EDGE_TOLERANCE).contains(&x);
            valid.push(inside);
            let (y, x) = if inside { (y.clamp(0.0, ymax), x.clamp(0.0, xmax)) } else { (0.0, 0.0) };
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let gate = if inside { 1.0 } else { 0.0 };
            let corners = [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ];
            for (k, (yy, xx, wt)) in corners.into_iter().enumerate() {
                idx[k].push((yy * w + xx) as u32);
                weight[k].push((wt * gate) as f32);
            }
        }
        Self { src, idx, weight, valid }
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    #[cfg(test)]
    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn sample_plane(&self, plane: &[f32]) -> Vec<f32> {
        (0..self.len())
            .map(|i| (0..4).map(|k| plane[self.idx[k][i] as usize] * self.weight[k][i]).sum())
            .collect()
    }

    /// Gathers from a `(1, C, h, w)` tensor into `(1, C, out_h, out_w)`;
    /// differentiable with respect to `t`.
    pub fn sample_tensor(&self, t: &Tensor, out: (usize, usize)) -> Result<Tensor> {
        let (_, c, h, w) = t.dims4()?;
        if (h, w) != self.src {
            return Err(Error::shape("sample source", self.src, (h, w)));
        }
        if out.0 * out.1 != self.len() {
            return Err(Error::Input(format!("{} sample points for a {out:?} output", self.len())));
        }
        let flat = t.reshape((c, h * w))?;
        let dev = t.device();
        let mut acc: Option<Tensor> = None;
        for k in 0..4 {
            let idx = Tensor::from_slice(&self.idx[k], self.len(), dev)?;
            let wt = Tensor::from_slice(&self.weight[k], (1, self.len()), dev)?.to_dtype(t.dtype())?;
            let term = flat.index_select(&idx, 1)?.broadcast_mul(&wt)?;
            acc = Some(match acc {
                Some(a) => (a + term)?,
                None => term,
            });
        }
        Ok(acc.expect("four corners").reshape((1, c, out.0, out.1))?)
    }

    /// `(1, 1, out_h, out_w)` tensor of ones at valid points.
    pub fn mask_tensor(&self, out: (usize, usize), dtype: candle_core::DType) -> Result<Tensor> {
        let m: Vec<f32> = self.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        Ok(Tensor::from_vec(m, (1, 1, out.0, out.1), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Texel coordinates, relative to `rect`, of every pixel of `region`
/// (`(y, x, h, w)`) in a frame whose UVs are `uv`.
pub(crate) fn region_texels(
    uv: &UvGrid,
    map: &TexelMap,
    rect: &TexelRect,
    region: (usize, usize, usize, usize),
) -> Vec<(f64, f64)> {
    let (y0, x0, h, w) = region;
    let mut out = Vec::with_capacity(h * w);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let (u, v) = uv.uv(y, x);
            let (r, c) = map.texel(u, v);
            out.push((r - rect.y as f64, c - rect.x as f64));
        }
    }
    out
}

/// An edit layer over a rectangle of one atlas.
#[derive(Debug, Clone)]
pub struct AtlasEdit {
    pub layer: Layer,
    pub rect: TexelRect,
    pub edit: EditLayer,
}

fn sample_image(img: &Image, pts: &SamplePoints, h: usize, w: usize) -> Result<Image> {
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        data.extend(pts.sample_plane(img.channel(c)));
    }
    Image::from_planar(h, w, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Samples an atlas-space edit at the UVs of one frame. Pixels whose UVs
/// fall outside the edit's rectangle get a transparent texel.
pub fn render_layer_to_frame(edit: &AtlasEdit, map: &TexelMap, uv: &UvGrid) -> Result<EditLayer> {
    let (h, w) = (uv.height, uv.width);
    if edit.edit.dims() != (edit.rect.h, edit.rect.w) {
        return Err(Error::shape("atlas edit", (edit.rect.h, edit.rect.w), edit.edit.dims()));
    }
    let pts = SamplePoints::new(edit.edit.dims(), region_texels(uv, map, &edit.rect, (0, 0, h, w)));
    let color = sample_image(edit.edit.color(), &pts, h, w)?;
    let alpha: Vec<f32> = pts.sample_plane(edit.edit.alpha().values()).into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    EditLayer::new(color, OpacityMap::new(h, w, alpha)?)
}

/// The decomposition of one frame: both layers' colors and the foreground
/// opacity.
#[derive(Debug, Clone)]
pub struct FrameLayers {
    pub foreground: Image,
    pub background: Image,
    pub opacity: OpacityMap,
}

impl FrameLayers {
    /// The frame the decomposition reconstructs.
    pub fn original(&self) -> Result<Image> {
        blend_frame(self, None, None)
    }
}

impl AtlasPackage {
    /// Samples both atlases at frame `t`'s UVs.
    pub fn frame_layers(&self, t: usize) -> Result<FrameLayers> {
        if t >= self.frame_count() {
            return Err(Error::Input(format!("frame {t} of {}", self.frame_count())));
        }
        let (h, w) = self.frame_dims();
        let r = self.meta.atlas_resolution;
        let layer = |l: Layer| {
            let pts = SamplePoints::new((r, r), region_texels(self.uv(l, t), &self.texel_map(l), &TexelRect::full(r), (0, 0, h, w)));
            sample_image(self.atlas(l), &pts, h, w)
        };
        Ok(FrameLayers {
            foreground: layer(Layer::Foreground)?,
            background: layer(Layer::Background)?,
            opacity: OpacityMap::new(h, w, self.alpha[t].clone())?,
        })
    }

    /// Frame `t` as reconstructed from the atlases.
    pub fn reconstruct_frame(&self, t: usize) -> Result<Image> {
        self.frame_layers(t)?.original()
    }
}

/// `alpha_fg * edited_fg + (1 - alpha_fg) * edited_bg`, where an edited
/// layer is its edit composited over the layer's color, or the color
/// itself when there is no edit.
pub fn blend_frame(layers: &FrameLayers, edit_fg: Option<&EditLayer>, edit_bg: Option<&EditLayer>) -> Result<Image> {
    let fg = match edit_fg {
        Some(e) => image::composite(e, &layers.foreground)?,
        None => layers.foreground.clone(),
    };
    let bg = match edit_bg {
        Some(e) => image::composite(e, &layers.background)?,
        None => layers.background.clone(),
    };
    let (h, w) = fg.dims();
    if bg.dims() != (h, w) || layers.opacity.dims() != (h, w) {
        return Err(Error::shape("frame layers", (h, w), bg.dims()));
    }
    let a = layers.opacity.values();
    let mut data = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let (f, b) = (fg.channel(c), bg.channel(c));
        data.extend((0..h * w).map(|i| a[i] * f[i] + (1.0 - a[i]) * b[i]));
    }
    Ok(Image::from_planar_clamped(h, w, data))
}

/// Every frame of the edited video.
pub fn render_video(pkg: &AtlasPackage, fg: Option<&AtlasEdit>, bg: Option<&AtlasEdit>) -> Result<Vec<Image>> {
    (0..pkg.frame_count())
        .map(|t| {
            let layers = pkg.frame_layers(t)?;
            let e_fg = fg
                .map(|e| render_layer_to_frame(e, &pkg.texel_map(Layer::Foreground), pkg.uv(Layer::Foreground, t)))
                .transpose()?;
            let e_bg = bg
                .map(|e| render_layer_to_frame(e, &pkg.texel_map(Layer::Background), pkg.uv(Layer::Background, t)))
                .transpose()?;
            blend_frame(&layers, e_fg.as_ref(), e_bg.as_ref())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Var};

    #[test]
    fn gather_matches_plane_sampling_and_backprops() {
        let plane: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let pts = SamplePoints::new((3, 4), [(0.5, 0.5), (2.0, 3.0), (5.0, 0.0)]);
        assert_eq!(pts.valid(), &[true, true, false]);
        let vals = pts.sample_plane(&plane);
        assert!((vals[0] - 2.5).abs() < 1e-6);
        assert_eq!(vals[1], 11.0);
        assert_eq!(vals[2], 0.0);
        let v = Var::from_vec(plane, (1, 1, 3, 4), &Device::Cpu).unwrap();
        let out = pts.sample_tensor(v.as_tensor(), (1, 3)).unwrap();
        assert_eq!(out.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vals);
        let g = out.sum_all().unwrap().backward().unwrap();
        let grad = g.get(v.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!((grad.iter().sum::<f32>() - 2.0).abs() < 1e-6);
        assert_eq!(pts.mask_tensor((1, 3), DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(), [1.0, 1.0, 0.0]);
    }
}
