use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EOS: u32 = 0;
pub const UNK: u32 = 1;
const EOS_TEXT: &str = "<eos>";
const UNK_TEXT: &str = "<unk>";

fn pieces_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r" ?[A-Za-z']+| ?[0-9]| ?[^\sA-Za-z0-9]|\s").expect("valid regex"))
}

/// Splits text into word pieces that carry their leading space, so the
/// pieces concatenate back to the input exactly. Digits are split singly.
pub fn pieces(text: &str) -> impl Iterator<Item = &str> {
    pieces_re().find_iter(text).map(|m| m.as_str())
}

/// Word-level tokenizer with optional byte fallback.
///
/// Ids: `0` end of sequence, `1` unknown, then (with byte fallback) the 256
/// byte tokens, then word pieces by descending corpus frequency.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToyTokenizer {
    vocab: Vec<String>,
    byte_fallback: bool,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl PartialEq for ToyTokenizer {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.byte_fallback == other.byte_fallback
    }
}

fn byte_token(b: u8) -> String {
    format!("<0x{b:02X}>")
}

impl ToyTokenizer {
    /// Builds a vocabulary from `texts`, keeping at most `max_words` pieces
    /// (ties broken lexicographically).
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_words: Option<usize>, byte_fallback: bool) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for p in pieces(t) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        if let Some(m) = max_words {
            words.truncate(m);
        }
        let mut vocab = vec![EOS_TEXT.to_string(), UNK_TEXT.to_string()];
        if byte_fallback {
            vocab.extend((0..=255u8).map(byte_token));
        }
        vocab.extend(words.into_iter().map(|(w, _)| w.to_string()));
        Self::from_vocab(vocab, byte_fallback)
    }

    fn from_vocab(vocab: Vec<String>, byte_fallback: bool) -> Self {
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        ToyTokenizer {
            vocab,
            byte_fallback,
            index,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn byte_fallback(&self) -> bool {
        self.byte_fallback
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    fn push_fallback(&self, p: &[u8], out: &mut Vec<u32>) {
        if self.byte_fallback {
            out.extend(p.iter().map(|&b| 2 + b as u32));
        } else {
            out.push(UNK);
        }
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for p in pieces(text) {
            match self.index.get(p) {
                Some(&id) => out.push(id),
                _ => self.push_fallback(p.as_bytes(), &mut out),
            }
        }
        out
    }

    /// Tokenizes arbitrary bytes; invalid UTF-8 goes through byte fallback.
    pub fn tokenize_bytes(&self, bytes: &[u8]) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in bytes.utf8_chunks() {
            out.extend(self.tokenize(chunk.valid()));
            if !chunk.invalid().is_empty() {
                self.push_fallback(chunk.invalid(), &mut out);
            }
        }
        out
    }

    pub fn detokenize_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if self.byte_fallback && (2..258).contains(&id) {
                out.push((id - 2) as u8);
            } else if let Some(p) = self.piece(id) {
                out.extend_from_slice(p.as_bytes());
            } else {
                out.extend_from_slice(UNK_TEXT.as_bytes());
            }
        }
        out
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.detokenize_bytes(ids)).into_owned()
    }

    /// Hex SHA-256 over the vocabulary and fallback flag.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update([self.byte_fallback as u8]);
        for w in &self.vocab {
            h.update((w.len() as u64).to_le_bytes());
            h.update(w.as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let t: ToyTokenizer = serde_json::from_str(&text)?;
        if t.vocab.first().map(String::as_str) != Some(EOS_TEXT) || t.vocab.get(1).map(String::as_str) != Some(UNK_TEXT) {
            return Err(Error::Data(format!("{}: not a tokenizer file", path.display())));
        }
        Ok(Self::from_vocab(t.vocab, t.byte_fallback))
    }
}
