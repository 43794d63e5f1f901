//! Token-embedding store files (`SDTE`) and a deterministic hash-based
//! generator used when no contextual encoder export is available.
//!
//! Layout, all integers little-endian, strings as `u32` byte length + UTF-8:
//!
//! ```text
//! "SDTE" u32:version u32:dim str:encoder str:vocab
//! u32:n_stats { str:key u64:value }
//! u64:n_records {
//!     str:paragraph_id u32:n_clauses {
//!         u32:n_tokens { str:token } f32[n_tokens·dim]
//!     }
//! }
//! ```

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::binio::{put_str, Reader};
use crate::corpus::Paragraph;
use crate::encoder::EmbeddedParagraph;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SDTE";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreHeader {
    pub dim: usize,
    pub encoder: String,
    pub vocab: String,
    pub stats: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClauseEmbedding {
    pub tokens: Vec<String>,
    /// `tokens.len() · dim` values, row-major.
    pub vectors: Vec<f32>,
}

impl ClauseEmbedding {
    pub fn vector(&self, token: usize, dim: usize) -> &[f32] {
        &self.vectors[token * dim..(token + 1) * dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParagraphEmbedding {
    pub id: String,
    pub clauses: Vec<ClauseEmbedding>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    header: StoreHeader,
    records: Vec<ParagraphEmbedding>,
    index: HashMap<String, usize>,
}

impl EmbeddingStore {
    pub fn new(header: StoreHeader) -> Result<Self> {
        if header.dim == 0 || header.dim > u32::MAX as usize {
            return Err(Error::Format(format!("embedding dim {} out of range", header.dim)));
        }
        Ok(EmbeddingStore { header, records: Vec::new(), index: HashMap::new() })
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ParagraphEmbedding] {
        &self.records
    }

    pub fn get(&self, id: &str) -> Option<&ParagraphEmbedding> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn push(&mut self, record: ParagraphEmbedding) -> Result<()> {
        if self.index.contains_key(&record.id) {
            return Err(Error::Format(format!("duplicate paragraph id {:?}", record.id)));
        }
        for clause in &record.clauses {
            if clause.vectors.len() != clause.tokens.len() * self.header.dim {
                return Err(Error::Format(format!(
                    "paragraph {:?}: {} values for {} tokens of dim {}",
                    record.id,
                    clause.vectors.len(),
                    clause.tokens.len(),
                    self.header.dim
                )));
            }
            if clause.vectors.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("embedding in paragraph {:?}", record.id)));
            }
        }
        self.index.insert(record.id.clone(), self.records.len());
        self.records.push(record);
        Ok(())
    }

    /// Embeds clauses `range` of `paragraph`, truncating clauses to `max_tokens`.
    pub fn embed(&self, paragraph: &Paragraph, range: std::ops::Range<usize>, max_tokens: usize) -> Result<EmbeddedParagraph> {
        let record = self
            .get(&paragraph.id)
            .ok_or_else(|| Error::MissingEmbedding(paragraph.id.clone()))?;
        if record.clauses.len() != paragraph.clauses.len() {
            return Err(Error::Length {
                what: "embedded clauses vs paragraph clauses",
                left: record.clauses.len(),
                right: paragraph.clauses.len(),
            });
        }
        EmbeddedParagraph::from_clauses(&record.clauses[range], self.header.dim, max_tokens)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.header.dim as u32).to_le_bytes());
        put_str(&mut out, &self.header.encoder);
        put_str(&mut out, &self.header.vocab);
        out.extend_from_slice(&(self.header.stats.len() as u32).to_le_bytes());
        for (k, v) in &self.header.stats {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.id);
            out.extend_from_slice(&(r.clauses.len() as u32).to_le_bytes());
            for c in &r.clauses {
                out.extend_from_slice(&(c.tokens.len() as u32).to_le_bytes());
                for t in &c.tokens {
                    put_str(&mut out, t);
                }
                for v in &c.vectors {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an embedding store (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding store version {version}")));
        }
        let dim = r.u32()? as usize;
        let encoder = r.string()?;
        let vocab = r.string()?;
        let mut stats = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            stats.insert(k, r.u64()?);
        }
        let mut store = EmbeddingStore::new(StoreHeader { dim, encoder, vocab, stats })?;
        let n = r.u64()?;
        for _ in 0..n {
            let id = r.string()?;
            let n_clauses = r.u32()?;
            let mut clauses = Vec::new();
            for _ in 0..n_clauses {
                let n_tokens = r.u32()? as usize;
                let tokens = (0..n_tokens).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
                let n_values = n_tokens.checked_mul(dim * 4).ok_or_else(|| Error::Format("clause too large".into()))?;
                let raw = r.take(n_values)?;
                let vectors = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                clauses.push(ClauseEmbedding { tokens, vectors });
            }
            store.push(ParagraphEmbedding { id, clauses })?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

// FNV-1a, stable across platforms and releases.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Deterministic pseudo-embedding of a token, uniform in `[-1, 1]^dim`.
pub fn token_vector(token: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token) ^ seed.rotate_left(17));
    (0..dim).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()
}

/// Store whose tokens are the clause tokens and whose vectors come from
/// [`token_vector`]; context-free, but enough to exercise the full pipeline.
pub fn synthetic_store<'a>(paragraphs: impl IntoIterator<Item = &'a Paragraph>, dim: usize, seed: u64) -> Result<EmbeddingStore> {
    let mut store = EmbeddingStore::new(StoreHeader {
        dim,
        encoder: "synthetic-hash".into(),
        vocab: format!("whitespace/seed={seed}"),
        stats: BTreeMap::new(),
    })?;
    let mut cache: HashMap<String, Vec<f32>> = HashMap::new();
    let (mut n_clauses, mut n_tokens) = (0u64, 0u64);
    for p in paragraphs {
        let clauses = p
            .clauses
            .iter()
            .map(|c| {
                let vectors = c
                    .tokens
                    .iter()
                    .flat_map(|t| cache.entry(t.clone()).or_insert_with(|| token_vector(t, dim, seed)).clone())
                    .collect();
                n_tokens += c.tokens.len() as u64;
                ClauseEmbedding { tokens: c.tokens.clone(), vectors }
            })
            .collect::<Vec<_>>();
        n_clauses += clauses.len() as u64;
        store.push(ParagraphEmbedding { id: p.id.clone(), clauses })?;
    }
    store.header.stats.insert("clauses".into(), n_clauses);
    store.header.stats.insert("tokens".into(), n_tokens);
    Ok(store)
}
