//! Gradient-weighted attention rollout.
//!
//! For every layer from `start_layer` on, the per-head attention
//! probabilities `A` are weighted by the gradient of the image-text logit
//! with respect to them, clamped at zero and averaged over heads, giving
//! `cam`. The rollout starts from the identity and accumulates
//! `R <- R + cam R`. The class-token row of `R` (patch columns only) is the
//! patch relevance.

use crate::error::{Error, Result};
use crate::image::{resize_planes, OpacityMap};

/// Side of the square relevancy map.
pub const RELEVANCY_SIZE: usize = 224;

/// A `224 x 224` map with values in `[0, 1]`.
#[derive(Clone, PartialEq)]
pub struct RelevancyMap {
    values: Vec<f32>,
}

impl std::fmt::Debug for RelevancyMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RelevancyMap({RELEVANCY_SIZE}x{RELEVANCY_SIZE})")
    }
}

impl RelevancyMap {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        let n = RELEVANCY_SIZE * RELEVANCY_SIZE;
        if values.len() != n {
            return Err(Error::shape("relevancy map values", n, values.len()));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("relevancy value {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn filled(value: f32) -> Result<Self> {
        Self::new(vec![value; RELEVANCY_SIZE * RELEVANCY_SIZE])
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> f32) -> Result<Self> {
        let mut values = Vec::with_capacity(RELEVANCY_SIZE * RELEVANCY_SIZE);
        for y in 0..RELEVANCY_SIZE {
            for x in 0..RELEVANCY_SIZE {
                values.push(f(y, x));
            }
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.values[y * RELEVANCY_SIZE + x]
    }

    pub fn to_opacity(&self) -> OpacityMap {
        OpacityMap::new(RELEVANCY_SIZE, RELEVANCY_SIZE, self.values.clone()).expect("relevancy values are in range")
    }
}

/// One layer's attention probabilities and their gradients, both
/// `heads x N x N` row-major with `N = 1 + patches`.
pub struct LayerAttention {
    pub heads: usize,
    pub tokens: usize,
    pub probs: Vec<f32>,
    pub grads: Vec<f32>,
}

/// Rollout over `layers[start_layer..]`; returns the relevance of each patch
/// token to the class token (`N - 1` values).
pub fn rollout(layers: &[LayerAttention], start_layer: usize) -> Result<Vec<f64>> {
    let n = layers
        .first()
        .map(|l| l.tokens)
        .ok_or_else(|| Error::Input("rollout needs at least one layer".into()))?;
    if start_layer >= layers.len() {
        return Err(Error::Input(format!(
            "relevancy start layer {start_layer} but the model has {} layers",
            layers.len()
        )));
    }
    let mut r = vec![0.0f64; n * n];
    for i in 0..n {
        r[i * n + i] = 1.0;
    }
    for layer in &layers[start_layer..] {
        let size = layer.heads * n * n;
        if layer.tokens != n || layer.probs.len() != size || layer.grads.len() != size {
            return Err(Error::shape("attention layer", size, layer.probs.len()));
        }
        let mut cam = vec![0.0f64; n * n];
        for h in 0..layer.heads {
            for (i, c) in cam.iter_mut().enumerate() {
                let v = layer.grads[h * n * n + i] as f64 * layer.probs[h * n * n + i] as f64;
                *c += v.max(0.0) / layer.heads as f64;
            }
        }
        let mut next = r.clone();
        for i in 0..n {
            for k in 0..n {
                let c = cam[i * n + k];
                if c == 0.0 {
                    continue;
                }
                for j in 0..n {
                    next[i * n + j] += c * r[k * n + j];
                }
            }
        }
        r = next;
    }
    Ok(r[1..n].to_vec())
}

/// Upsamples a `rows x cols` patch relevance bilinearly to 224x224 and
/// min-max normalizes it. A constant positive map becomes all ones, an
/// all-zero map stays zero.
pub fn patch_scores_to_map(scores: &[f64], rows: usize, cols: usize) -> Result<RelevancyMap> {
    if scores.len() != rows * cols {
        return Err(Error::shape("patch scores", rows * cols, scores.len()));
    }
    let plane: Vec<f32> = scores.iter().map(|v| *v as f32).collect();
    let up = resize_planes(&plane, 1, rows, cols, RELEVANCY_SIZE, RELEVANCY_SIZE);
    let lo = up.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = up.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let values = if !span.is_finite() || span <= f32::EPSILON * hi.abs().max(1.0) {
        vec![if hi > 0.0 { 1.0 } else { 0.0 }; up.len()]
    } else {
        up.iter().map(|v| ((v - lo) / span).clamp(0.0, 1.0)).collect()
    };
    RelevancyMap::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(heads: usize, n: usize, p: f32, g: f32) -> LayerAttention {
        LayerAttention {
            heads,
            tokens: n,
            probs: vec![p; heads * n * n],
            grads: vec![g; heads * n * n],
        }
    }

    #[test]
    fn uniform_attention_rolls_out_uniform() {
        let n = 50;
        let layers: Vec<_> = (0..3).map(|_| uniform(4, n, 1.0 / n as f32, 0.7)).collect();
        let r = rollout(&layers, 0).unwrap();
        assert_eq!(r.len(), 49);
        assert!(r.iter().all(|v| (v - r[0]).abs() < 1e-12 && *v > 0.0));
        let map = patch_scores_to_map(&r, 7, 7).unwrap();
        assert!(map.values().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn negative_gradients_are_clamped() {
        let layers = vec![uniform(2, 5, 0.2, -1.0)];
        assert_eq!(rollout(&layers, 0).unwrap(), vec![0.0; 4]);
        let map = patch_scores_to_map(&[0.0; 4], 2, 2).unwrap();
        assert!(map.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_layer_matches_hand_computation() {
        // one head, N = 3; cam = grad * prob where positive
        let probs = vec![0.2, 0.5, 0.3, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4];
        let grads = vec![1.0, 2.0, -1.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let layer = LayerAttention {
            heads: 1,
            tokens: 3,
            probs,
            grads,
        };
        // R = I + cam, row 0 = [1.2, 1.0, 0.0]
        let r = rollout(&[layer], 0).unwrap();
        assert!((r[0] - 1.0).abs() < 1e-7 && r[1].abs() < 1e-12);
    }

    #[test]
    fn start_layer_skips_earlier_layers() {
        let layers = vec![uniform(1, 3, 1.0, 1.0), uniform(1, 3, 0.0, 1.0)];
        assert_eq!(rollout(&layers, 1).unwrap(), vec![0.0, 0.0]);
        assert!(rollout(&layers, 2).is_err());
    }

    #[test]
    fn normalized_map_spans_unit_interval() {
        let scores: Vec<f64> = (0..49).map(|i| i as f64 * 0.3).collect();
        let map = patch_scores_to_map(&scores, 7, 7).unwrap();
        let max = map.values().iter().copied().fold(0.0f32, f32::max);
        let min = map.values().iter().copied().fold(1.0f32, f32::min);
        assert_eq!((min, max), (0.0, 1.0));
    }
}
