//! Space-time segments of the input video and the atlas crops they cover.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::package::{AtlasPackage, Layer};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Temporal offset of the two outer frames.
    pub frame_offset: usize,
    /// Crop side range as a fraction of the frame side.
    pub crop_min: f64,
    pub crop_max: f64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            frame_offset: 2,
            crop_min: 0.4,
            crop_max: 0.8,
        }
    }
}

impl SegmentConfig {
    pub fn validate(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.crop_min > 0.0 && self.crop_min <= self.crop_max && self.crop_max <= 1.0) {
            return Err(("crop_min", format!("need 0 < crop_min <= crop_max <= 1, got {} and {}", self.crop_min, self.crop_max)));
        }
        Ok(())
    }
}

/// Three frames `t - k, t, t + k` sharing one spatial rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoSegmentSample {
    pub t: usize,
    pub k: usize,
    /// `(y, x, h, w)` in frame pixels.
    pub region: (usize, usize, usize, usize),
}

impl VideoSegmentSample {
    /// The three frame indices, clamped to the video.
    pub fn frames(&self, frame_count: usize) -> [usize; 3] {
        let last = frame_count - 1;
        [self.t.saturating_sub(self.k), self.t.min(last), (self.t + self.k).min(last)]
    }
}

fn side(len: usize, cfg: &SegmentConfig, rng: &mut impl Rng) -> usize {
    let lo = ((cfg.crop_min * len as f64).round() as usize).clamp(1, len);
    let hi = ((cfg.crop_max * len as f64).round() as usize).clamp(lo, len);
    rng.random_range(lo..=hi)
}

pub fn sample_segment(
    frame_count: usize,
    frame_dims: (usize, usize),
    cfg: &SegmentConfig,
    rng: &mut impl Rng,
) -> VideoSegmentSample {
    let k = cfg.frame_offset;
    let t = if frame_count > 2 * k {
        rng.random_range(k..=frame_count - 1 - k)
    } else {
        rng.random_range(0..frame_count)
    };
    let (fh, fw) = frame_dims;
    let h = side(fh, cfg, rng);
    let w = side(fw, cfg, rng);
    let y = rng.random_range(0..=fh - h);
    let x = rng.random_range(0..=fw - w);
    VideoSegmentSample { t, k, region: (y, x, h, w) }
}

/// A rectangle of atlas texels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TexelRect {
    pub y: usize,
    pub x: usize,
    pub h: usize,
    pub w: usize,
}

impl TexelRect {
    pub fn full(resolution: usize) -> Self {
        Self {
            y: 0,
            x: 0,
            h: resolution,
            w: resolution,
        }
    }
}

/// The atlas region covered by a segment.
#[derive(Debug, Clone)]
pub struct AtlasCrop {
    pub layer: Layer,
    pub rect: TexelRect,
    /// Set when the segment collapsed to a single UV coordinate along an
    /// axis; that axis is then one texel wide.
    pub degenerate: bool,
    pub image: Image,
}

// Texel coordinates within this distance of an integer are treated as that
// integer so exact grids do not grow by a texel through rounding noise.
const SNAP: f64 = 1e-4;

fn snap(v: f64) -> f64 {
    if (v - v.round()).abs() < SNAP {
        v.round()
    } else {
        v
    }
}

fn axis_span(lo: f64, hi: f64, resolution: usize) -> (usize, usize, bool) {
    let max = (resolution - 1) as f64;
    let (lo, hi) = (snap(lo).clamp(0.0, max), snap(hi).clamp(0.0, max));
    if hi - lo <= 0.0 {
        return (lo.round() as usize, 1, true);
    }
    let a = lo.floor() as usize;
    let b = hi.ceil() as usize;
    (a, b - a + 1, false)
}

/// Bounding texel rectangle of every UV the segment's pixels map to in
/// `layer`, and the atlas content inside it.
pub fn crop_from_segment(pkg: &AtlasPackage, layer: Layer, sample: &VideoSegmentSample) -> Result<AtlasCrop> {
    let (fh, fw) = pkg.frame_dims();
    let (y0, x0, h, w) = sample.region;
    if h == 0 || w == 0 || y0 + h > fh || x0 + w > fw {
        return Err(Error::Input(format!("segment region {:?} outside {fh}x{fw} frames", sample.region)));
    }
    let map = pkg.texel_map(layer);
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for t in sample.frames(pkg.frame_count()) {
        let grid = pkg.uv(layer, t);
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                let (u, v) = grid.uv(y, x);
                let (r, c) = map.texel(u, v);
                rmin = rmin.min(r);
                rmax = rmax.max(r);
                cmin = cmin.min(c);
                cmax = cmax.max(c);
            }
        }
    }
    let res = map.resolution;
    let (ry, rh, dy) = axis_span(rmin, rmax, res);
    let (rx, rw, dx) = axis_span(cmin, cmax, res);
    let rect = TexelRect { y: ry, x: rx, h: rh, w: rw };
    let image = pkg.atlas(layer).crop(ry, rx, rh, rw)?;
    Ok(AtlasCrop {
        layer,
        rect,
        degenerate: dy || dx,
        image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::TrainRng;
    use rand::SeedableRng;

    #[test]
    fn frames_stay_in_range() {
        let mut rng = TrainRng::seed_from_u64(3);
        for _ in 0..200 {
            let s = sample_segment(9, (20, 30), &SegmentConfig::default(), &mut rng);
            let f = s.frames(9);
            assert_eq!(f, [s.t - 2, s.t, s.t + 2]);
            let (y, x, h, w) = s.region;
            assert!(y + h <= 20 && x + w <= 30);
            assert!((8..=16).contains(&h) && (12..=24).contains(&w));
        }
        let s = sample_segment(2, (4, 4), &SegmentConfig::default(), &mut rng);
        assert!(s.frames(2).iter().all(|&t| t < 2));
    }

    #[test]
    fn snapping_and_degenerate_axes() {
        assert_eq!(axis_span(3.99999, 7.00001, 10), (4, 4, false));
        assert_eq!(axis_span(3.5, 3.5, 10), (4, 1, true));
        assert_eq!(axis_span(2.2, 5.6, 10), (2, 5, false));
    }
}
