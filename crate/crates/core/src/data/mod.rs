//! Tokenization and the pre-tokenization protocol.
//!
//! Each corpus becomes one contiguous token stream with an end-of-sequence
//! token after every document. For each of the two epochs the stream is cut
//! into non-overlapping fixed-length chunks starting at an epoch-specific
//! random offset, and each epoch's chunks are split at random into a 60%
//! and a 40% sub-collection. Every chunk carries `(corpus, sub-collection,
//! epoch, stream offset)` so the trainer can prove which data each phase
//! consumed.

pub mod synth;
pub mod tokenizer;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngState;

pub use tokenizer::{pieces, ToyTokenizer, EOS, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Story,
    Math,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Story => "story",
            Domain::Math => "math",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "story" => Ok(Domain::Story),
            "math" => Ok(Domain::Math),
            other => Err(Error::Data(format!("unknown domain {other:?} (story or math)"))),
        }
    }

    /// Index of the path pretrained on this domain.
    pub fn path_index(self) -> usize {
        match self {
            Domain::Story => 0,
            Domain::Math => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub domain: Domain,
    pub documents: Vec<String>,
}

impl Corpus {
    /// One document per non-blank line.
    pub fn from_lines(text: &str, domain: Domain) -> Result<Self> {
        let documents: Vec<String> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.trim().is_empty())
            .map(String::from)
            .collect();
        if documents.is_empty() {
            return Err(Error::Data(format!("{domain} corpus is empty")));
        }
        Ok(Corpus { domain, documents })
    }

    pub fn load(path: &Path, domain: Domain) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_lines(&text, domain)
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.documents.join("\n");
        s.push('\n');
        s
    }
}

/// `doc₁ EOS doc₂ EOS …` in document order.
pub fn build_stream(corpus: &Corpus, tok: &ToyTokenizer) -> Result<Vec<u32>> {
    if corpus.documents.is_empty() {
        return Err(Error::Data(format!("{} corpus is empty", corpus.domain)));
    }
    let mut out = Vec::new();
    for d in &corpus.documents {
        out.extend(tok.tokenize(d));
        out.push(EOS);
    }
    Ok(out)
}

/// Distinct start offsets in `[0, seq_len)` for the two epochs.
pub fn epoch_offsets(seq_len: usize, rng: &mut RngState) -> Result<[usize; 2]> {
    if seq_len < 2 {
        return Err(Error::Data("seq_len must be ≥ 2 for distinct epoch offsets".into()));
    }
    let a = rng.below(seq_len);
    let b = (a + 1 + rng.below(seq_len - 1)) % seq_len;
    Ok([a, b])
}

/// Non-overlapping windows `[offset + i·L, offset + (i+1)·L)`; the head
/// before `offset` and the tail remainder are dropped.
pub fn chunk_stream(stream: &[u32], seq_len: usize, offset: usize) -> Result<Vec<(usize, Vec<u32>)>> {
    if seq_len == 0 || offset >= seq_len {
        return Err(Error::Data(format!("offset {offset} outside [0, {seq_len})")));
    }
    if stream.len() < 2 * seq_len {
        return Err(Error::Data(format!(
            "stream of {} tokens is shorter than two chunks of {seq_len}",
            stream.len()
        )));
    }
    Ok(stream[offset..]
        .chunks_exact(seq_len)
        .enumerate()
        .map(|(i, c)| (offset + i * seq_len, c.to_vec()))
        .collect())
}

/// Random disjoint partition into `round(fraction·n)` and the rest; both
/// halves keep their original relative order.
pub fn split_collections<X>(items: Vec<X>, fraction: f64, rng: &mut RngState) -> Result<(Vec<X>, Vec<X>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("split_fraction", format!("must lie in (0, 1), got {fraction}")));
    }
    let n = items.len();
    let take = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let mut first = vec![false; n];
    for &i in &order[..take] {
        first[i] = true;
    }
    let (mut a, mut b) = (Vec::with_capacity(take), Vec::with_capacity(n - take));
    for (item, f) in items.into_iter().zip(first) {
        if f {
            a.push(item);
        } else {
            b.push(item);
        }
    }
    Ok((a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubCollection {
    #[serde(rename = "60")]
    Sixty,
    #[serde(rename = "40")]
    Forty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChunkTag {
    pub corpus: Domain,
    pub sub: SubCollection,
    pub epoch: u8,
    /// Token offset of the chunk in its corpus stream.
    pub start: u64,
}

/// Token counts of one corpus and epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChunkSummary {
    pub corpus: Domain,
    pub epoch: u8,
    pub stream_tokens: usize,
    pub offset: usize,
    pub chunks: usize,
    pub chunk_tokens: usize,
    pub remainder: usize,
    pub sub60: usize,
    pub sub40: usize,
}

const CHUNK_MAGIC: &[u8; 4] = b"PPCH";
const CHUNK_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ChunkMeta {
    fingerprint: String,
    tags: Vec<ChunkTag>,
}

/// Fixed-length chunks with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkStore {
    pub seq_len: usize,
    pub fingerprint: String,
    tokens: Vec<u32>,
    tags: Vec<ChunkTag>,
}

impl ChunkStore {
    pub fn new(seq_len: usize, fingerprint: impl Into<String>) -> Self {
        ChunkStore {
            seq_len,
            fingerprint: fingerprint.into(),
            tokens: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn push(&mut self, chunk: &[u32], tag: ChunkTag) -> Result<()> {
        if chunk.len() != self.seq_len {
            return Err(Error::Data(format!("chunk of {} tokens in a {}-token store", chunk.len(), self.seq_len)));
        }
        self.tokens.extend_from_slice(chunk);
        self.tags.push(tag);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn chunk(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn tag(&self, i: usize) -> &ChunkTag {
        &self.tags[i]
    }

    pub fn tags(&self) -> &[ChunkTag] {
        &self.tags
    }

    pub fn indices(&self, mut keep: impl FnMut(&ChunkTag) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(&self.tags[i])).collect()
    }

    pub fn max_token(&self) -> Option<u32> {
        self.tokens.iter().copied().max()
    }

    /// Concatenates stores built with the same tokenizer and chunk length.
    pub fn merge(stores: &[ChunkStore]) -> Result<ChunkStore> {
        let first = stores.first().ok_or_else(|| Error::Data("no chunk stores given".into()))?;
        let mut out = ChunkStore::new(first.seq_len, first.fingerprint.clone());
        for s in stores {
            if s.seq_len != out.seq_len || s.fingerprint != out.fingerprint {
                return Err(Error::Data("chunk stores disagree on seq_len or tokenizer".into()));
            }
            out.tokens.extend_from_slice(&s.tokens);
            out.tags.extend_from_slice(&s.tags);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(20 + 4 * self.tokens.len());
        b.extend_from_slice(CHUNK_MAGIC);
        b.extend_from_slice(&CHUNK_VERSION.to_le_bytes());
        b.extend_from_slice(&(self.seq_len as u32).to_le_bytes());
        b.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for t in &self.tokens {
            b.extend_from_slice(&t.to_le_bytes());
        }
        let meta = ChunkMeta {
            fingerprint: self.fingerprint.clone(),
            tags: self.tags.clone(),
        };
        b.extend_from_slice(serde_json::to_string(&meta).expect("meta serializes").as_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("chunk store: {m}"));
        if b.len() < 20 || &b[..4] != CHUNK_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
        if version != CHUNK_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let seq_len = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(b[12..20].try_into().expect("8 bytes")) as usize;
        let end = count
            .checked_mul(seq_len)
            .and_then(|n| n.checked_mul(4))
            .and_then(|n| n.checked_add(20))
            .filter(|&e| e <= b.len())
            .ok_or_else(|| bad("truncated token payload"))?;
        let tokens = b[20..end]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let meta: ChunkMeta = serde_json::from_slice(&b[end..]).map_err(|e| bad(&e.to_string()))?;
        if meta.tags.len() != count {
            return Err(bad("provenance table length differs from chunk count"));
        }
        Ok(ChunkStore {
            seq_len,
            fingerprint: meta.fingerprint,
            tokens,
            tags: meta.tags,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&b)
    }
}

/// Chunks one corpus for both epochs and splits each epoch 60/40.
pub fn pretokenize(
    corpus: &Corpus,
    tok: &ToyTokenizer,
    seq_len: usize,
    fraction: f64,
    seed: u64,
) -> Result<(ChunkStore, Vec<ChunkSummary>)> {
    let stream = build_stream(corpus, tok)?;
    let mut rng = RngState::derived(seed, &format!("chunks:{}", corpus.domain));
    let offsets = epoch_offsets(seq_len, &mut rng)?;
    let mut store = ChunkStore::new(seq_len, tok.fingerprint());
    let mut summary = Vec::new();
    for (e, &offset) in offsets.iter().enumerate() {
        let epoch = e as u8 + 1;
        let chunks = chunk_stream(&stream, seq_len, offset)?;
        let n = chunks.len();
        let tagged: Vec<(usize, Vec<u32>, SubCollection)> = {
            let (a, b) = split_collections(chunks, fraction, &mut rng)?;
            let mut all: Vec<_> = a
                .into_iter()
                .map(|(s, c)| (s, c, SubCollection::Sixty))
                .chain(b.into_iter().map(|(s, c)| (s, c, SubCollection::Forty)))
                .collect();
            all.sort_by_key(|x| x.0);
            all
        };
        let sub60 = tagged.iter().filter(|x| x.2 == SubCollection::Sixty).count();
        for (start, chunk, sub) in tagged {
            store.push(
                &chunk,
                ChunkTag {
                    corpus: corpus.domain,
                    sub,
                    epoch,
                    start: start as u64,
                },
            )?;
        }
        summary.push(ChunkSummary {
            corpus: corpus.domain,
            epoch,
            stream_tokens: stream.len(),
            offset,
            chunks: n,
            chunk_tokens: n * seq_len,
            remainder: stream.len() - n * seq_len,
            sub60,
            sub40: n - sub60,
        });
    }
    Ok((store, summary))
}

/// Which slice of the data a training phase may consume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Everything: both corpora, both sub-collections.
    Baseline,
    /// Story chunks from the 60% sub-collection.
    Path1,
    /// Math chunks from the 60% sub-collection.
    Path2,
    /// Both corpora, 40% sub-collection only.
    Composite,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Baseline => "baseline",
            Role::Path1 => "path1",
            Role::Path2 => "path2",
            Role::Composite => "composite",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "baseline" => Role::Baseline,
            "path1" => Role::Path1,
            "path2" => Role::Path2,
            "composite" => Role::Composite,
            other => return Err(Error::config("role", format!("unknown role {other:?}"))),
        })
    }

    pub fn accepts(self, tag: &ChunkTag) -> bool {
        match self {
            Role::Baseline => true,
            Role::Path1 => tag.corpus == Domain::Story && tag.sub == SubCollection::Sixty,
            Role::Path2 => tag.corpus == Domain::Math && tag.sub == SubCollection::Sixty,
            Role::Composite => tag.sub == SubCollection::Forty,
        }
    }

    /// Chunks this role trains on in `epoch`.
    pub fn select(self, store: &ChunkStore, epoch: u8) -> Result<Vec<usize>> {
        let idx = store.indices(|t| t.epoch == epoch && self.accepts(t));
        if idx.is_empty() {
            return Err(Error::Data(format!(
                "no chunks with {} provenance for epoch {epoch}",
                self.as_str()
            )));
        }
        Ok(idx)
    }

    /// Fails if any chunk lies outside this role's provenance.
    pub fn verify(self, store: &ChunkStore, indices: &[usize]) -> Result<()> {
        match indices.iter().find(|&&i| !self.accepts(store.tag(i))) {
            Some(&i) => Err(Error::Data(format!(
                "chunk {i} ({:?}) is outside {} provenance",
                store.tag(i),
                self.as_str()
            ))),
            None => Ok(()),
        }
    }
}

/// Seeded shuffle into full batches; a trailing partial batch is dropped.
pub fn make_batches(indices: &[usize], batch_size: usize, rng: &mut RngState) -> Result<Vec<Vec<usize>>> {
    if indices.is_empty() {
        return Err(Error::Data("no chunks to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::config("train.batch_size", "must be ≥ 1"));
    }
    let mut order = indices.to_vec();
    rng.shuffle(&mut order);
    Ok(order.chunks_exact(batch_size).map(|c| c.to_vec()).collect())
}
