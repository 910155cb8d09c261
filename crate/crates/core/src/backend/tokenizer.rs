//! Text tokenizers: CLIP's byte-level BPE, and a hashing stand-in for the
//! synthetic backend.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Mutex;

use regex::Regex;

use crate::error::{Error, Result};

pub trait Tokenizer: Send + Sync {
    /// Token ids including the start and end markers, truncated to
    /// `context_length` (the end marker is always kept).
    fn encode(&self, text: &str, context_length: usize) -> Vec<u32>;
}

fn pretokenizer() -> Regex {
    Regex::new(r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+")
        .expect("valid pre-tokenizer pattern")
}

fn clean(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

fn finish(mut ids: Vec<u32>, sot: u32, eot: u32, context_length: usize) -> Vec<u32> {
    let budget = context_length.saturating_sub(2);
    if ids.len() > budget {
        log::warn!(
            "prompt has {} tokens, truncating to the {context_length}-token context",
            ids.len() + 2
        );
        ids.truncate(budget);
    }
    let mut out = Vec::with_capacity(ids.len() + 2);
    out.push(sot);
    out.extend(ids);
    out.push(eot);
    out
}

/// Maps every byte to a printable char, as in GPT-2/CLIP vocabularies.
fn byte_alphabet() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..=255u8 {
        let printable = matches!(b, b'!'..=b'~' | 0xA1..=0xAC | 0xAE..=0xFF);
        table[b as usize] = if printable {
            b as char
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

pub struct BpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    bytes: [char; 256],
    pattern: Regex,
    sot: u32,
    eot: u32,
    cache: Mutex<HashMap<String, Vec<u32>>>,
}

impl BpeTokenizer {
    /// From a `vocab.json` (token -> id) and a `merges.txt` (one merge per
    /// line, optional `#version` header).
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab_text).map_err(|e| Error::Codec {
            path: vocab.to_path_buf(),
            message: e.to_string(),
        })?;
        let merges_text = std::fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
        Self::new(encoder, &merges_text)
    }

    pub fn new(encoder: HashMap<String, u32>, merges: &str) -> Result<Self> {
        let mut ranks = HashMap::new();
        for line in merges.lines().filter(|l| !l.starts_with("#version") && !l.trim().is_empty()) {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) => {
                    let n = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(n);
                }
                _ => return Err(Error::Backend(format!("malformed merge rule `{line}`"))),
            }
        }
        let special = |s: &str| {
            encoder
                .get(s)
                .copied()
                .ok_or_else(|| Error::Backend(format!("vocabulary lacks `{s}`")))
        };
        Ok(Self {
            sot: special("<|startoftext|>")?,
            eot: special("<|endoftext|>")?,
            encoder,
            ranks,
            bytes: byte_alphabet(),
            pattern: pretokenizer(),
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn bpe(&self, word: &str) -> Vec<u32> {
        if let Some(ids) = self.cache.lock().expect("bpe cache poisoned").get(word) {
            return ids.clone();
        }
        let mut parts: Vec<String> = word.bytes().map(|b| self.bytes[b as usize].to_string()).collect();
        if let Some(last) = parts.last_mut() {
            last.push_str("</w>");
        }
        while parts.len() > 1 {
            let best = parts
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((_, i)) = best else { break };
            let (a, b) = (parts[i].clone(), parts[i + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(parts[i].clone());
                    i += 1;
                }
            }
            parts = merged;
        }
        let ids: Vec<u32> = parts.iter().filter_map(|p| self.encoder.get(p).copied()).collect();
        self.cache
            .lock()
            .expect("bpe cache poisoned")
            .insert(word.to_string(), ids.clone());
        ids
    }
}

impl Tokenizer for BpeTokenizer {
    fn encode(&self, text: &str, context_length: usize) -> Vec<u32> {
        let text = clean(text);
        let ids = self
            .pattern
            .find_iter(&text)
            .flat_map(|m| self.bpe(m.as_str()))
            .collect();
        finish(ids, self.sot, self.eot, context_length)
    }
}

/// Hashes each pre-token into a fixed vocabulary. Case-insensitive.
pub struct HashTokenizer {
    vocab_size: u32,
    pattern: Regex,
}

impl HashTokenizer {
    /// The last two ids are reserved for the start and end markers.
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 2, "hash vocabulary too small");
        Self {
            vocab_size: vocab_size as u32,
            pattern: pretokenizer(),
        }
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
}

impl Tokenizer for HashTokenizer {
    fn encode(&self, text: &str, context_length: usize) -> Vec<u32> {
        let text = clean(text);
        let n = self.vocab_size as u64 - 2;
        let ids = self
            .pattern
            .find_iter(&text)
            .map(|m| (fnv1a(m.as_str()) % n) as u32)
            .collect();
        finish(ids, self.vocab_size - 2, self.vocab_size - 1, context_length)
    }
}
