//! The pretrained loader against a tiny model written in the Hugging Face
//! CLIP safetensors layout, with a local BPE vocabulary.

use std::collections::HashMap;
use std::path::Path;

use candle_core::DType;
use t2l_core::backend::pretrained::{self, Artifact, PretrainedSpec};
use t2l_core::backend::transformer::random_weights;
use t2l_core::backend::{self, ClipBackend, ClipConfig, EmbeddingBackend};
use t2l_core::image::Image;

fn write_fixture(dir: &Path) -> PretrainedSpec {
    let config = ClipConfig::tiny();
    let weights = random_weights(&config, 9, DType::F32).unwrap();
    let weights_path = dir.join("model.safetensors");
    candle_core::safetensors::save(&weights, &weights_path).unwrap();

    let tokens = [
        "<|startoftext|>", "<|endoftext|>", "r", "e", "d", "b", "a", "l", "l</w>", "d</w>", "re", "red</w>", "ba",
        "bal", "ball</w>",
    ];
    let vocab: HashMap<&str, u32> = tokens.iter().enumerate().map(|(i, t)| (*t, i as u32 + 1)).collect();
    let vocab_path = dir.join("vocab.json");
    std::fs::write(&vocab_path, serde_json::to_string(&vocab).unwrap()).unwrap();
    let merges_path = dir.join("merges.txt");
    std::fs::write(&merges_path, "#version: 0.2\nr e\nre d</w>\nb a\nba l\nl l</w>\nbal l</w>\n").unwrap();

    let local = |p: &Path| Artifact::new(p.to_str().unwrap());
    PretrainedSpec {
        model_id: "fixture".into(),
        weights: local(&weights_path),
        vocab: local(&vocab_path),
        merges: local(&merges_path),
        architecture: config,
    }
}

#[test]
fn loads_hf_layout_and_merges_bpe() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_fixture(dir.path());
    let b = pretrained::load(&spec, &dir.path().join("cache"), DType::F32).unwrap();
    assert_eq!(b.model_id(), "fixture");
    assert_eq!(b.embed_dim(), 32);
    let ids = b.tokenize("Red  ball");
    assert_eq!(ids, vec![1, 12, 15, 2]);

    let img = Image::from_fn(224, 224, |y, x| [y as f32 / 224.0, x as f32 / 224.0, 0.3]).unwrap();
    let e = backend::encode_image(&b, &img).unwrap();
    let norm: f32 = e.as_slice().iter().map(|v| v * v).sum::<f32>().sqrt();
    assert!((norm - 1.0).abs() < 1e-4);
    let red = backend::encode_text(&b, "red ball").unwrap();
    let ball = backend::encode_text(&b, "ball").unwrap();
    assert!(backend::cosine_distance(red.as_slice(), ball.as_slice()).value > 0.0);
}

#[test]
fn missing_tensor_is_a_backend_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_fixture(dir.path());
    let path = Path::new(spec.weights.source.as_str()).to_path_buf();
    let mut weights = candle_core::safetensors::load(&path, &candle_core::Device::Cpu).unwrap();
    weights.remove("visual_projection.weight");
    candle_core::safetensors::save(&weights, &path).unwrap();
    let err = pretrained::load(&spec, &dir.path().join("cache2"), DType::F32).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
    assert!(err.to_string().contains("visual_projection.weight"), "{err}");
}

#[test]
fn pinned_digest_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = write_fixture(dir.path());
    spec.weights = Artifact::pinned(spec.weights.source.clone(), "00".repeat(32));
    let err = pretrained::load(&spec, &dir.path().join("cache"), DType::F32).unwrap_err();
    assert_eq!(err.exit_code(), 4, "{err}");
}

#[test]
fn synthetic_backend_is_deterministic() {
    let a = ClipBackend::synthetic(3).unwrap();
    let b = ClipBackend::synthetic(3).unwrap();
    let ea = backend::encode_text(&a, "a cat").unwrap();
    let eb = backend::encode_text(&b, "a cat").unwrap();
    assert_eq!(ea.as_slice(), eb.as_slice());
}
