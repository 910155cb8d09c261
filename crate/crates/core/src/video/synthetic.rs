//! Procedural atlas packages with known UV maps, for tests and demos.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::package::{AtlasPackage, Layer, PackageMeta, UvGrid, UvRect, PACKAGE_VERSION};
use crate::error::{Error, Result};
use crate::image::{Image, Rgb};

/// Frame pixel `(y, x)` of frame `t` maps to foreground texel
/// `(y, x + fg_shift * t)` and background texel `(y, x + bg_shift * t)`.
/// The foreground is opaque inside a disk fixed in atlas space, so it
/// drifts left by `fg_shift` pixels per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub frame_count: usize,
    pub height: usize,
    pub width: usize,
    pub fg_shift: usize,
    pub bg_shift: usize,
    /// Disk radius as a fraction of the frame height.
    pub radius: f64,
    /// Defaults to the smallest square atlas holding every mapped texel.
    pub atlas_resolution: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            frame_count: 8,
            height: 32,
            width: 32,
            fg_shift: 1,
            bg_shift: 0,
            radius: 0.3,
            atlas_resolution: None,
        }
    }
}

impl SyntheticSpec {
    /// Both layers map every frame pixel to the atlas texel of the same
    /// coordinates.
    pub fn identity(frame_count: usize, side: usize) -> Self {
        Self {
            frame_count,
            height: side,
            width: side,
            fg_shift: 0,
            bg_shift: 0,
            atlas_resolution: Some(side),
            ..Self::default()
        }
    }

    fn resolution(&self) -> Result<usize> {
        let span = self.width + self.fg_shift.max(self.bg_shift) * self.frame_count.saturating_sub(1);
        let need = span.max(self.height).max(2);
        match self.atlas_resolution {
            Some(r) if r < need => Err(Error::Input(format!("atlas resolution {r} below the {need} texels mapped"))),
            Some(r) => Ok(r),
            None => Ok(need),
        }
    }
}

fn fg_color(y: usize, x: usize, r: usize) -> Rgb {
    let (fy, fx) = (y as f32 / r as f32, x as f32 / r as f32);
    [0.85, 0.25 + 0.5 * fy, 0.2 + 0.6 * fx]
}

fn bg_color(y: usize, x: usize, r: usize) -> Rgb {
    let (fy, fx) = (y as f32 / r as f32, x as f32 / r as f32);
    let wave = (fx * 12.0).sin() * (fy * 9.0).cos();
    [0.3 + 0.2 * wave, 0.5 + 0.3 * fy, 0.45 - 0.15 * wave]
}

pub fn synthetic_package(spec: &SyntheticSpec) -> Result<AtlasPackage> {
    if spec.frame_count == 0 || spec.height < 2 || spec.width < 2 {
        return Err(Error::Input("synthetic package needs frames of at least 2x2".into()));
    }
    let r = spec.resolution()?;
    let to_uv = |texel: usize| (2.0 * texel as f64 / (r - 1) as f64 - 1.0) as f32;
    let (cy, cx) = (spec.height as f64 / 2.0, spec.width as f64 / 2.0);
    let radius = spec.radius * spec.height as f64;
    let (h, w) = (spec.height, spec.width);
    let mut uv_fg = Vec::new();
    let mut uv_bg = Vec::new();
    let mut alpha = Vec::new();
    for t in 0..spec.frame_count {
        let mut fg = Vec::with_capacity(h * w * 2);
        let mut bg = Vec::with_capacity(h * w * 2);
        let mut a = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let fx = x + spec.fg_shift * t;
                fg.extend([to_uv(fx), to_uv(y)]);
                bg.extend([to_uv(x + spec.bg_shift * t), to_uv(y)]);
                let d = ((y as f64 + 0.5 - cy).powi(2) + (fx as f64 + 0.5 - cx).powi(2)).sqrt();
                a.push(if d <= radius { 1.0 } else { 0.0 });
            }
        }
        uv_fg.push(UvGrid { height: h, width: w, values: fg });
        uv_bg.push(UvGrid { height: h, width: w, values: bg });
        alpha.push(a);
    }
    let meta = PackageMeta {
        version: PACKAGE_VERSION,
        frame_count: spec.frame_count,
        frame_width: w,
        frame_height: h,
        layers: vec![Layer::Foreground, Layer::Background],
        atlas_resolution: r,
        uv_bounds: BTreeMap::from([(Layer::Foreground, UvRect::FULL), (Layer::Background, UvRect::FULL)]),
    };
    let fg_atlas = Image::from_fn(r, r, |y, x| fg_color(y, x, r))?;
    let bg_atlas = Image::from_fn(r, r, |y, x| bg_color(y, x, r))?;
    AtlasPackage::new(meta, fg_atlas, bg_atlas, uv_fg, uv_bg, alpha)
}
