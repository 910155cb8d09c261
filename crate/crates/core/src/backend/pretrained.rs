//! Fetching and caching pretrained weights.
//!
//! Artifacts are stored as `<cache_dir>/<model_id>/<sha256>.bin`. The cache
//! directory is `$TEXT2LIVE_CACHE` when set, otherwise
//! `$XDG_CACHE_HOME/t2l` or `~/.cache/t2l`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clip::ClipBackend;
use super::tokenizer::BpeTokenizer;
use super::transformer::ClipConfig;
use crate::error::{Error, Result};

const CONNECT_TIMEOUT: std::time::Duration = std::time::Duration::from_secs(30);

pub const CACHE_ENV: &str = "TEXT2LIVE_CACHE";

/// A remote (`http://`, `https://`) or local file, optionally pinned by its
/// SHA-256 digest (lowercase hex).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    pub source: String,
    #[serde(default)]
    pub sha256: Option<String>,
}

impl Artifact {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            sha256: None,
        }
    }

    pub fn pinned(source: impl Into<String>, sha256: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            sha256: Some(sha256.into()),
        }
    }

    fn is_remote(&self) -> bool {
        self.source.starts_with("http://") || self.source.starts_with("https://")
    }
}

/// Weights plus BPE tokenizer files for a CLIP model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainedSpec {
    pub model_id: String,
    /// Safetensors file in the Hugging Face `CLIPModel` layout.
    pub weights: Artifact,
    pub vocab: Artifact,
    pub merges: Artifact,
    #[serde(default = "ClipConfig::vit_b32")]
    pub architecture: ClipConfig,
}

const HF_BASE: &str = "https://huggingface.co/openai/clip-vit-base-patch32/resolve/main";

impl PretrainedSpec {
    /// ViT-B/32 from the Hugging Face hub. Unpinned: set the digests to
    /// turn on verification.
    pub fn vit_b32() -> Self {
        Self {
            model_id: "clip-vit-base-patch32".into(),
            weights: Artifact::new(format!("{HF_BASE}/model.safetensors")),
            vocab: Artifact::new(format!("{HF_BASE}/vocab.json")),
            merges: Artifact::new(format!("{HF_BASE}/merges.txt")),
            architecture: ClipConfig::vit_b32(),
        }
    }
}

pub fn cache_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|d| !d.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = std::env::var_os("XDG_CACHE_HOME").filter(|d| !d.is_empty()) {
        return PathBuf::from(dir).join("t2l");
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."));
    home.join(".cache").join("t2l")
}

pub fn cache_path(cache_dir: &Path, model_id: &str, sha256: &str) -> PathBuf {
    cache_dir.join(model_id).join(format!("{sha256}.bin"))
}

fn digest_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn copy_hashing(mut src: impl Read, dst: &Path) -> Result<String> {
    let mut out = std::fs::File::create(dst).map_err(|e| Error::io(dst, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = src.read(&mut buf).map_err(|e| Error::io(dst, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        out.write_all(&buf[..n]).map_err(|e| Error::io(dst, e))?;
    }
    out.sync_all().map_err(|e| Error::io(dst, e))?;
    Ok(hex::encode(h.finalize()))
}

/// Returns the cached path of `artifact`, fetching and verifying it first
/// if needed.
pub fn fetch(artifact: &Artifact, model_id: &str, cache_dir: &Path) -> Result<PathBuf> {
    if let Some(sha) = &artifact.sha256 {
        let cached = cache_path(cache_dir, model_id, sha);
        if cached.is_file() {
            return Ok(cached);
        }
    }
    let dir = cache_dir.join(model_id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let tmp = dir.join(format!(".partial-{}", std::process::id()));
    let digest = if artifact.is_remote() {
        log::info!("downloading {}", artifact.source);
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_connect(Some(CONNECT_TIMEOUT))
            .build()
            .into();
        let resp = agent
            .get(&artifact.source)
            .call()
            .map_err(|e| Error::Backend(format!("fetching {}: {e}", artifact.source)))?;
        copy_hashing(resp.into_body().into_reader(), &tmp)
    } else {
        let src = Path::new(&artifact.source);
        let f = std::fs::File::open(src).map_err(|e| Error::io(src, e))?;
        copy_hashing(f, &tmp)
    };
    let digest = match digest {
        Ok(d) => d,
        Err(e) => {
            let _ = std::fs::remove_file(&tmp);
            return Err(e);
        }
    };
    match &artifact.sha256 {
        Some(want) if !want.eq_ignore_ascii_case(&digest) => {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::Backend(format!(
                "checksum mismatch for {}: expected {want}, got {digest}",
                artifact.source
            )));
        }
        None => log::warn!("{} is not pinned; fetched sha256 {digest}", artifact.source),
        _ => {}
    }
    let dst = cache_path(cache_dir, model_id, &digest);
    std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))?;
    Ok(dst)
}

/// Re-hashes a cached file; used to detect cache corruption.
pub fn verify(path: &Path, sha256: &str) -> Result<()> {
    let got = digest_file(path)?;
    if got.eq_ignore_ascii_case(sha256) {
        Ok(())
    } else {
        Err(Error::Backend(format!("{} has sha256 {got}, expected {sha256}", path.display())))
    }
}

/// Fetches (or reuses) the artifacts of `spec` and builds the backend.
pub fn load(spec: &PretrainedSpec, cache_dir: &Path, dtype: DType) -> Result<ClipBackend> {
    let weights_path = fetch(&spec.weights, &spec.model_id, cache_dir)?;
    if let Some(sha) = &spec.weights.sha256 {
        verify(&weights_path, sha)?;
    }
    let vocab = fetch(&spec.vocab, &spec.model_id, cache_dir)?;
    let merges = fetch(&spec.merges, &spec.model_id, cache_dir)?;
    let tokenizer = BpeTokenizer::from_files(&vocab, &merges)?;
    let weights: HashMap<_, _> = candle_core::safetensors::load(&weights_path, &Device::Cpu)
        .map_err(|e| Error::Backend(format!("reading {}: {e}", weights_path.display())))?;
    ClipBackend::from_weights(
        spec.model_id.clone(),
        spec.architecture.clone(),
        weights,
        Box::new(tokenizer),
        dtype,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn local_artifacts_are_cached_by_digest() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("w.txt");
        std::fs::write(&src, b"abc").unwrap();
        let sha = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
        let cache = dir.path().join("cache");
        let got = fetch(&Artifact::pinned(src.to_str().unwrap(), sha), "m", &cache).unwrap();
        assert_eq!(got, cache.join("m").join(format!("{sha}.bin")));
        assert_eq!(std::fs::read(&got).unwrap(), b"abc");
        verify(&got, sha).unwrap();
        // a cache hit does not touch the source
        std::fs::remove_file(&src).unwrap();
        assert_eq!(fetch(&Artifact::pinned("gone", sha), "m", &cache).unwrap(), got);
    }

    #[test]
    fn checksum_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("w.txt");
        std::fs::write(&src, b"abd").unwrap();
        let sha = "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad";
        let err = fetch(&Artifact::pinned(src.to_str().unwrap(), sha), "m", dir.path()).unwrap_err();
        assert!(err.to_string().contains("checksum mismatch"));
        assert!(!cache_path(dir.path(), "m", sha).exists());
    }
}
