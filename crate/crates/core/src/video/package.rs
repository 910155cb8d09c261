//! The on-disk layered-atlas package and its in-memory form.
//!
//! ```text
//! <dir>/meta.json
//! <dir>/atlas_foreground.png     16-bit RGB, R x R
//! <dir>/atlas_background.png
//! <dir>/uv/uv_fg_%05d.raw        f32 LE, H x W x 2, in [-1, 1]
//! <dir>/uv/uv_bg_%05d.raw
//! <dir>/alpha/alpha_%05d.raw     f32 LE, H x W, in [0, 1]
//! <dir>/checksums.txt            "<sha256>  <relative path>" per file
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{self, BitDepth, Image};

pub const PACKAGE_VERSION: u32 = 1;
/// Atlas side written by the reference exporter.
pub const DEFAULT_ATLAS_RESOLUTION: usize = 2000;
/// Foreground pixels above this opacity define the foreground UV bounds.
pub const FG_OPACITY_THRESHOLD: f32 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layer {
    Foreground,
    Background,
}

impl Layer {
    pub fn short(self) -> &'static str {
        match self {
            Layer::Foreground => "fg",
            Layer::Background => "bg",
        }
    }
}

/// An axis-aligned rectangle in UV space; `u` is horizontal, `v` vertical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UvRect {
    pub u_min: f32,
    pub u_max: f32,
    pub v_min: f32,
    pub v_max: f32,
}

impl UvRect {
    pub const FULL: Self = Self {
        u_min: -1.0,
        u_max: 1.0,
        v_min: -1.0,
        v_max: 1.0,
    };

    fn is_valid(&self) -> bool {
        let ok = |a: f32, b: f32| a.is_finite() && b.is_finite() && (-1.0..=1.0).contains(&a) && (-1.0..=1.0).contains(&b) && a < b;
        ok(self.u_min, self.u_max) && ok(self.v_min, self.v_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageMeta {
    pub version: u32,
    pub frame_count: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub layers: Vec<Layer>,
    pub atlas_resolution: usize,
    /// UV rectangle spanned by each discretized atlas.
    pub uv_bounds: BTreeMap<Layer, UvRect>,
}

/// Per-frame UV coordinates, row-major `H x W x 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct UvGrid {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl UvGrid {
    pub fn uv(&self, y: usize, x: usize) -> (f32, f32) {
        let i = 2 * (y * self.width + x);
        (self.values[i], self.values[i + 1])
    }
}

/// Maps UV coordinates to texel coordinates of a discretized atlas
/// (corner-aligned: the rectangle's edges land on texel centers `0` and
/// `R - 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexelMap {
    pub bounds: UvRect,
    pub resolution: usize,
}

impl TexelMap {
    /// `(row, col)` texel coordinates of `(u, v)`.
    pub fn texel(&self, u: f32, v: f32) -> (f64, f64) {
        let r = (self.resolution - 1) as f64;
        let b = &self.bounds;
        let x = (u as f64 - b.u_min as f64) / (b.u_max as f64 - b.u_min as f64) * r;
        let y = (v as f64 - b.v_min as f64) / (b.v_max as f64 - b.v_min as f64) * r;
        (y, x)
    }

    /// Inverse of [`TexelMap::texel`].
    pub fn uv(&self, row: f64, col: f64) -> (f32, f32) {
        let r = (self.resolution - 1) as f64;
        let b = &self.bounds;
        let u = b.u_min as f64 + col / r * (b.u_max as f64 - b.u_min as f64);
        let v = b.v_min as f64 + row / r * (b.v_max as f64 - b.v_min as f64);
        (u as f32, v as f32)
    }
}

/// A validated atlas package.
#[derive(Debug, Clone)]
pub struct AtlasPackage {
    pub meta: PackageMeta,
    pub foreground_atlas: Image,
    pub background_atlas: Image,
    pub uv_fg: Vec<UvGrid>,
    pub uv_bg: Vec<UvGrid>,
    /// Per-frame foreground opacity, row-major `H x W`.
    pub alpha: Vec<Vec<f32>>,
    fg_bounds: Option<UvRect>,
}

fn package_error(file: impl Into<PathBuf>, message: impl Into<String>) -> Error {
    Error::Package {
        file: file.into(),
        message: message.into(),
    }
}

pub(crate) fn uv_name(layer: Layer, t: usize) -> String {
    format!("uv/uv_{}_{t:05}.raw", layer.short())
}

pub(crate) fn alpha_name(t: usize) -> String {
    format!("alpha/alpha_{t:05}.raw")
}

pub(crate) fn atlas_name(layer: Layer) -> &'static str {
    match layer {
        Layer::Foreground => "atlas_foreground.png",
        Layer::Background => "atlas_background.png",
    }
}

fn read_f32s(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(package_error(
            path,
            format!("expected {} bytes, found {}", expected * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Smallest UV rectangle containing the foreground UVs of every pixel whose
/// opacity exceeds [`FG_OPACITY_THRESHOLD`]; `None` when there are none.
pub fn foreground_bounds(uv_fg: &[UvGrid], alpha: &[Vec<f32>]) -> Option<UvRect> {
    let mut r = UvRect {
        u_min: f32::INFINITY,
        u_max: f32::NEG_INFINITY,
        v_min: f32::INFINITY,
        v_max: f32::NEG_INFINITY,
    };
    let mut any = false;
    for (grid, a) in uv_fg.iter().zip(alpha) {
        for (i, &op) in a.iter().enumerate() {
            if op > FG_OPACITY_THRESHOLD {
                let (u, v) = (grid.values[2 * i], grid.values[2 * i + 1]);
                r.u_min = r.u_min.min(u);
                r.u_max = r.u_max.max(u);
                r.v_min = r.v_min.min(v);
                r.v_max = r.v_max.max(v);
                any = true;
            }
        }
    }
    any.then_some(r)
}

impl AtlasPackage {
    /// Builds and validates a package from in-memory parts.
    pub fn new(
        meta: PackageMeta,
        foreground_atlas: Image,
        background_atlas: Image,
        uv_fg: Vec<UvGrid>,
        uv_bg: Vec<UvGrid>,
        alpha: Vec<Vec<f32>>,
    ) -> Result<Self> {
        let meta_file = PathBuf::from("meta.json");
        if meta.version != PACKAGE_VERSION {
            return Err(package_error(
                &meta_file,
                format!("unsupported version {}, expected {PACKAGE_VERSION}", meta.version),
            ));
        }
        if meta.frame_count == 0 || meta.frame_width == 0 || meta.frame_height == 0 {
            return Err(package_error(&meta_file, "frame count and dimensions must be positive"));
        }
        if meta.atlas_resolution < 2 {
            return Err(package_error(&meta_file, "atlas resolution must be at least 2"));
        }
        for layer in [Layer::Foreground, Layer::Background] {
            match meta.uv_bounds.get(&layer) {
                Some(b) if b.is_valid() => {}
                Some(b) => return Err(package_error(&meta_file, format!("invalid {layer:?} uv bounds {b:?}"))),
                None => return Err(package_error(&meta_file, format!("missing {layer:?} uv bounds"))),
            }
        }
        let r = meta.atlas_resolution;
        for (layer, atlas) in [(Layer::Foreground, &foreground_atlas), (Layer::Background, &background_atlas)] {
            if atlas.dims() != (r, r) {
                return Err(package_error(
                    atlas_name(layer),
                    format!("atlas is {:?}, expected {r}x{r}", atlas.dims()),
                ));
            }
        }
        let (h, w) = (meta.frame_height, meta.frame_width);
        for (layer, grids) in [(Layer::Foreground, &uv_fg), (Layer::Background, &uv_bg)] {
            if grids.len() != meta.frame_count {
                return Err(package_error(
                    uv_name(layer, grids.len().min(meta.frame_count)),
                    format!("{} uv grids for {} frames", grids.len(), meta.frame_count),
                ));
            }
            for (t, g) in grids.iter().enumerate() {
                if (g.height, g.width) != (h, w) || g.values.len() != h * w * 2 {
                    return Err(package_error(uv_name(layer, t), "uv grid does not match frame size"));
                }
                if let Some(bad) = g.values.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
                    return Err(package_error(uv_name(layer, t), format!("uv value {bad} outside [-1, 1]")));
                }
            }
        }
        if alpha.len() != meta.frame_count {
            return Err(package_error(alpha_name(alpha.len().min(meta.frame_count)), "missing opacity frames"));
        }
        for (t, a) in alpha.iter().enumerate() {
            if a.len() != h * w {
                return Err(package_error(alpha_name(t), "opacity does not match frame size"));
            }
            if let Some(bad) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(package_error(alpha_name(t), format!("opacity {bad} outside [0, 1]")));
            }
        }
        let fg_bounds = foreground_bounds(&uv_fg, &alpha);
        Ok(Self {
            meta,
            foreground_atlas,
            background_atlas,
            uv_fg,
            uv_bg,
            alpha,
            fg_bounds,
        })
    }

    /// Reads and validates a package directory, verifying every checksum.
    pub fn load(dir: &Path) -> Result<Self> {
        let sums = read_checksums(dir)?;
        let check = |rel: &str| -> Result<PathBuf> {
            let path = dir.join(rel);
            let want = sums
                .get(rel)
                .ok_or_else(|| package_error(&path, "not listed in checksums.txt"))?;
            if !path.is_file() {
                return Err(package_error(&path, "missing file"));
            }
            if sha256_file(&path)? != *want {
                return Err(package_error(&path, "checksum mismatch"));
            }
            Ok(path)
        };
        let meta_path = check("meta.json")?;
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: PackageMeta =
            serde_json::from_str(&meta_text).map_err(|e| package_error(&meta_path, e.to_string()))?;
        let fg = image::load_image(&check(atlas_name(Layer::Foreground))?)?;
        let bg = image::load_image(&check(atlas_name(Layer::Background))?)?;
        let (h, w) = (meta.frame_height, meta.frame_width);
        let mut grids = [Vec::new(), Vec::new()];
        for (slot, layer) in grids.iter_mut().zip([Layer::Foreground, Layer::Background]) {
            for t in 0..meta.frame_count {
                let values = read_f32s(&check(&uv_name(layer, t))?, h * w * 2)?;
                slot.push(UvGrid {
                    height: h,
                    width: w,
                    values,
                });
            }
        }
        let alpha = (0..meta.frame_count)
            .map(|t| read_f32s(&check(&alpha_name(t))?, h * w))
            .collect::<Result<Vec<_>>>()?;
        let [uv_fg, uv_bg] = grids;
        Self::new(meta, fg, bg, uv_fg, uv_bg, alpha)
    }

    /// Writes the package in the directory format, checksums included.
    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["uv", "alpha"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut files = Vec::new();
        let meta_path = dir.join("meta.json");
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
        files.push("meta.json".to_string());
        for (layer, atlas) in [(Layer::Foreground, &self.foreground_atlas), (Layer::Background, &self.background_atlas)] {
            image::save_image(&dir.join(atlas_name(layer)), atlas, BitDepth::Sixteen)?;
            files.push(atlas_name(layer).to_string());
        }
        for (layer, grids) in [(Layer::Foreground, &self.uv_fg), (Layer::Background, &self.uv_bg)] {
            for (t, g) in grids.iter().enumerate() {
                write_f32s(&dir.join(uv_name(layer, t)), &g.values)?;
                files.push(uv_name(layer, t));
            }
        }
        for (t, a) in self.alpha.iter().enumerate() {
            write_f32s(&dir.join(alpha_name(t)), a)?;
            files.push(alpha_name(t));
        }
        let mut sums = String::new();
        for f in &files {
            sums.push_str(&format!("{}  {f}\n", sha256_file(&dir.join(f))?));
        }
        let path = dir.join("checksums.txt");
        std::fs::write(&path, sums).map_err(|e| Error::io(&path, e))
    }

    pub fn frame_count(&self) -> usize {
        self.meta.frame_count
    }

    /// `(height, width)` of a frame.
    pub fn frame_dims(&self) -> (usize, usize) {
        (self.meta.frame_height, self.meta.frame_width)
    }

    pub fn atlas(&self, layer: Layer) -> &Image {
        match layer {
            Layer::Foreground => &self.foreground_atlas,
            Layer::Background => &self.background_atlas,
        }
    }

    pub fn uv(&self, layer: Layer, t: usize) -> &UvGrid {
        match layer {
            Layer::Foreground => &self.uv_fg[t],
            Layer::Background => &self.uv_bg[t],
        }
    }

    pub fn texel_map(&self, layer: Layer) -> TexelMap {
        TexelMap {
            bounds: self.meta.uv_bounds[&layer],
            resolution: self.meta.atlas_resolution,
        }
    }

    /// UV bounds of confidently-foreground pixels.
    pub fn fg_bounds(&self) -> Option<UvRect> {
        self.fg_bounds
    }
}

fn read_checksums(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join("checksums.txt");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (hash, file) = line
            .split_once(char::is_whitespace)
            .ok_or_else(|| package_error(&path, format!("malformed line {}", i + 1)))?;
        let file = file.trim_start().trim_start_matches('*');
        if hash.len() != 64 || !hash.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(package_error(&path, format!("malformed digest on line {}", i + 1)));
        }
        out.insert(file.to_string(), hash.to_ascii_lowercase());
    }
    Ok(out)
}
