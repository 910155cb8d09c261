//! Interpolation weights shared by the value-level image code and the
//! differentiable tensor code, so both paths resample identically.
//!
//! All resizes use half-pixel centers (`align_corners = false`), no
//! antialiasing.

/// One output sample of a separable linear resize: two source taps and the
/// weight of the second one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn linear_taps(in_len: usize, out_len: usize) -> Vec<LinearTap> {
    assert!(in_len > 0 && out_len > 0, "resize of empty axis");
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|dst| {
            let src = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            LinearTap { lo, hi, frac }
        })
        .collect()
}

/// Dense `out_len x in_len` row-major linear interpolation matrix.
pub fn linear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (row, tap) in linear_taps(in_len, out_len).into_iter().enumerate() {
        m[row * in_len + tap.lo] += 1.0 - tap.frac;
        m[row * in_len + tap.hi] += tap.frac;
    }
    m
}

const CUBIC_A: f64 = -0.75;

fn cubic_weights(t: f64) -> [f64; 4] {
    let a = CUBIC_A;
    let near = |x: f64| ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
    let far = |x: f64| ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
    [far(t + 1.0), near(t), near(1.0 - t), far(2.0 - t)]
}

/// Dense `out_len x in_len` bicubic interpolation matrix (Keys kernel,
/// a = -0.75, border-replicated taps).
pub fn cubic_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    assert!(in_len > 0 && out_len > 0, "resize of empty axis");
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    for dst in 0..out_len {
        let src = (dst as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for (k, w) in cubic_weights(t).into_iter().enumerate() {
            let idx = (base as i64 - 1 + k as i64).clamp(0, in_len as i64 - 1) as usize;
            m[dst * in_len + idx] += w;
        }
    }
    m
}

/// Bilinear read of a single-channel row-major plane at fractional pixel
/// coordinates, clamping to the border.
pub fn sample_bilinear(plane: &[f32], height: usize, width: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (height - 1) as f64);
    let x = x.clamp(0.0, (width - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(height - 1);
    let x1 = (x0 + 1).min(width - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    let at = |yy: usize, xx: usize| plane[yy * width + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}
