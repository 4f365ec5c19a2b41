//! Corpus ingestion: whitespace tokenization, frequency vocabularies,
//! fixed-length packing, and MLM-style corruption.
//!
//! The pipeline is deliberately tiny and deterministic. Text is lowercased
//! and split on whitespace; the vocabulary keeps the most frequent tokens
//! after five reserved slots; the token stream is chunked into sequences of
//! exactly `seq_len` ids (remainders dropped); and masking corrupts a batch
//! position-by-position with a fixed RNG draw order so a given seed always
//! produces the same batch.
//!
//! Datasets can be cached on disk as a JSON manifest plus a flat array of
//! little-endian `u32` ids, keyed by corpus and vocabulary hashes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{LabError, Result};

// ---------------------------------------------------------------------------
// Reserved ids
// ---------------------------------------------------------------------------

pub const PAD_ID: usize = 0;
pub const MASK_ID: usize = 1;
pub const CLS_ID: usize = 2;
pub const SEP_ID: usize = 3;
pub const UNK_ID: usize = 4;
/// Number of reserved ids at the bottom of every vocabulary.
pub const NUM_RESERVED: usize = 5;

const RESERVED_TOKENS: [&str; NUM_RESERVED] = ["[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"];

/// True for ids in the reserved band, which are never masked or replaced.
pub fn is_reserved_id(id: usize) -> bool {
    id < NUM_RESERVED
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// A frequency-ranked whitespace vocabulary with five reserved ids.
///
/// Ids are dense from 0: the reserved tokens occupy `0..5`, then corpus
/// tokens follow in order of descending frequency, ties broken
/// lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Build from raw text, keeping at most `max_size - 5` corpus tokens.
    pub fn build(corpus: &str, max_size: usize) -> Result<Vocab> {
        if max_size <= NUM_RESERVED {
            return Err(LabError::config(
                "data.vocab_size",
                format!("must exceed the {NUM_RESERVED} reserved slots, got {max_size}"),
            ));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let lowered = corpus.to_lowercase();
        for tok in lowered.split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
        if counts.is_empty() {
            return Err(LabError::Data("corpus contains no tokens".into()));
        }
        let mut ranked: Vec<(&str, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - NUM_RESERVED);

        let mut id_to_token: Vec<String> =
            RESERVED_TOKENS.iter().map(|t| t.to_string()).collect();
        id_to_token.extend(ranked.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    /// Total number of ids, reserved slots included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // five reserved tokens are always present
    }

    /// Id for one token, `[UNK]` when absent. The lookup is case-insensitive
    /// to match [`Vocab::build`]'s lowercasing.
    pub fn encode_token(&self, token: &str) -> usize {
        let lowered = token.to_lowercase();
        *self.token_to_id.get(lowered.as_str()).unwrap_or(&UNK_ID)
    }

    /// Whitespace-split and encode a text.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.encode_token(t))
            .collect()
    }

    /// The token string for an id.
    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    /// Space-join the tokens for a run of ids.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self
                .token(id)
                .ok_or_else(|| LabError::Data(format!("id {id} out of vocabulary range")))?;
            parts.push(tok);
        }
        Ok(parts.join(" "))
    }

    /// Content hash of the id→token table: two vocabularies with the same
    /// hash encode identically.
    pub fn hash(&self) -> String {
        sha256_hex(self.id_to_token.join("\n").as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Packing
// ---------------------------------------------------------------------------

/// How the token stream is chunked into fixed-length sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackMode {
    /// All documents are concatenated into one stream before chunking;
    /// sequences may span document boundaries.
    Concat,
    /// Each blank-line-separated document is chunked independently, so no
    /// sequence crosses a document boundary; per-document remainders drop.
    DocBounded,
}

impl Default for PackMode {
    fn default() -> Self {
        PackMode::Concat
    }
}

/// A corpus packed into sequences of exactly `seq_len` token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedDataset {
    seq_len: usize,
    mode: PackMode,
    /// Flat row-major storage, `num_sequences * seq_len` ids.
    tokens: Vec<u32>,
    corpus_hash: String,
}

impl PackedDataset {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn mode(&self) -> PackMode {
        self.mode
    }

    pub fn num_sequences(&self) -> usize {
        self.tokens.len() / self.seq_len
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Hash of the raw corpus text this dataset was packed from.
    pub fn corpus_hash(&self) -> &str {
        &self.corpus_hash
    }

    /// One packed sequence.
    pub fn sequence(&self, index: usize) -> &[u32] {
        let start = index * self.seq_len;
        &self.tokens[start..start + self.seq_len]
    }

    /// Flatten the given sequences into one `len(indices) * seq_len` id
    /// buffer, ready to feed an embedding lookup.
    pub fn gather_batch(&self, indices: &[usize]) -> Vec<usize> {
        let mut out = Vec::with_capacity(indices.len() * self.seq_len);
        for &i in indices {
            out.extend(self.sequence(i).iter().map(|&t| t as usize));
        }
        out
    }

    /// Hash of the packed id stream plus its sequence length; equal hashes
    /// mean byte-identical datasets.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(8 + self.tokens.len() * 4);
        bytes.extend_from_slice(&(self.seq_len as u64).to_le_bytes());
        for &t in &self.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        sha256_hex(&bytes)
    }

    /// Re-chunk the packed id stream into sequences of a different length,
    /// dropping the trailing remainder. The stream is treated as one
    /// concatenation regardless of how it was originally packed, so the
    /// result always carries [`PackMode::Concat`]. Repacking at the current
    /// length reproduces this dataset's rows exactly.
    pub fn repack(&self, seq_len: usize) -> Result<PackedDataset> {
        if seq_len < 2 {
            return Err(LabError::config(
                "data.seq_len",
                format!("must be at least 2, got {seq_len}"),
            ));
        }
        let n = self.tokens.len() / seq_len;
        if n == 0 {
            return Err(LabError::Data(format!(
                "dataset of {} tokens yields no complete sequence of length {seq_len}",
                self.tokens.len()
            )));
        }
        Ok(PackedDataset {
            seq_len,
            mode: PackMode::Concat,
            tokens: self.tokens[..n * seq_len].to_vec(),
            corpus_hash: self.corpus_hash.clone(),
        })
    }

    /// Reorder sequences by the given permutation of `0..num_sequences()`.
    /// Evaluation metrics must not depend on sequence order; this exists so
    /// that invariance can be exercised directly.
    pub fn permuted(&self, order: &[usize]) -> Result<PackedDataset> {
        let n = self.num_sequences();
        let mut seen = vec![false; n];
        if order.len() != n || !order.iter().all(|&i| i < n && !std::mem::replace(&mut seen[i], true)) {
            return Err(LabError::invalid(
                "permuted",
                format!("order must be a permutation of 0..{n}"),
            ));
        }
        let mut tokens = Vec::with_capacity(self.tokens.len());
        for &i in order {
            tokens.extend_from_slice(self.sequence(i));
        }
        Ok(PackedDataset {
            seq_len: self.seq_len,
            mode: self.mode,
            tokens,
            corpus_hash: self.corpus_hash.clone(),
        })
    }

    /// Split off the last `val_frac` of sequences (by position, before any
    /// shuffling) as a validation set. A positive fraction always yields at
    /// least one validation sequence.
    pub fn split_validation(&self, val_frac: f64) -> Result<(PackedDataset, PackedDataset)> {
        if !(0.0..1.0).contains(&val_frac) {
            return Err(LabError::config(
                "data.val_frac",
                format!("must lie in [0, 1), got {val_frac}"),
            ));
        }
        let n = self.num_sequences();
        let n_val = if val_frac == 0.0 {
            0
        } else {
            (((n as f64) * val_frac).floor() as usize).max(1)
        };
        if n_val >= n {
            return Err(LabError::Data(format!(
                "validation split of {val_frac} leaves no training sequences (have {n})"
            )));
        }
        let cut = (n - n_val) * self.seq_len;
        let train = PackedDataset {
            seq_len: self.seq_len,
            mode: self.mode,
            tokens: self.tokens[..cut].to_vec(),
            corpus_hash: self.corpus_hash.clone(),
        };
        let val = PackedDataset {
            seq_len: self.seq_len,
            mode: self.mode,
            tokens: self.tokens[cut..].to_vec(),
            corpus_hash: self.corpus_hash.clone(),
        };
        Ok((train, val))
    }
}

/// Encode a corpus and chunk it into exact-length sequences. Trailing
/// remainders (per stream in [`PackMode::Concat`], per document in
/// [`PackMode::DocBounded`]) are dropped.
pub fn pack(corpus: &str, vocab: &Vocab, seq_len: usize, mode: PackMode) -> Result<PackedDataset> {
    if seq_len < 2 {
        return Err(LabError::config(
            "data.seq_len",
            format!("must be at least 2, got {seq_len}"),
        ));
    }
    let mut tokens: Vec<u32> = Vec::new();
    match mode {
        PackMode::Concat => {
            let ids = vocab.encode(corpus);
            push_full_chunks(&mut tokens, &ids, seq_len);
        }
        PackMode::DocBounded => {
            for doc in split_documents(corpus) {
                let ids = vocab.encode(doc);
                push_full_chunks(&mut tokens, &ids, seq_len);
            }
        }
    }
    if tokens.is_empty() {
        return Err(LabError::Data(format!(
            "corpus yields no complete sequence of length {seq_len}"
        )));
    }
    Ok(PackedDataset {
        seq_len,
        mode,
        tokens,
        corpus_hash: sha256_hex(corpus.as_bytes()),
    })
}

fn push_full_chunks(out: &mut Vec<u32>, ids: &[usize], seq_len: usize) {
    for chunk in ids.chunks_exact(seq_len) {
        out.extend(chunk.iter().map(|&id| id as u32));
    }
}

/// Documents are blank-line-separated blocks of text.
fn split_documents(corpus: &str) -> impl Iterator<Item = &str> {
    corpus
        .split("\n\n")
        .map(str::trim)
        .filter(|d| !d.is_empty())
}

// ---------------------------------------------------------------------------
// MLM masking
// ---------------------------------------------------------------------------

/// A corrupted batch plus the positions and original ids to predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedBatch {
    /// The batch after corruption, flat, same length as the input.
    pub corrupted: Vec<usize>,
    /// Flat indices of the selected positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at those positions, parallel to `positions`.
    pub targets: Vec<usize>,
}

/// Corrupt a flat batch of token ids for masked-token prediction.
///
/// Every non-reserved position is independently selected with probability
/// `mlm_prob`. A selected position becomes `[MASK]` with probability 0.8, a
/// uniformly random non-reserved token with probability 0.1, and stays
/// unchanged with probability 0.1; its original id is recorded as a target
/// either way. Reserved positions are skipped without consuming randomness.
///
/// Draw order is fixed — selection draw, then branch draw, then (for the
/// random-token branch only) the replacement id — so a seeded RNG reproduces
/// the same corruption exactly.
pub fn mask_batch<R: Rng + ?Sized>(
    batch: &[usize],
    vocab_len: usize,
    mlm_prob: f64,
    rng: &mut R,
) -> MaskedBatch {
    assert!(
        (0.0..=1.0).contains(&mlm_prob),
        "mask_batch: mlm_prob must lie in [0, 1], got {mlm_prob}"
    );
    assert!(
        vocab_len > NUM_RESERVED,
        "mask_batch: vocabulary has no maskable tokens"
    );
    let mut corrupted = batch.to_vec();
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for (i, &id) in batch.iter().enumerate() {
        if is_reserved_id(id) {
            continue;
        }
        if rng.random::<f64>() >= mlm_prob {
            continue;
        }
        positions.push(i);
        targets.push(id);
        let branch: f64 = rng.random();
        if branch < 0.8 {
            corrupted[i] = MASK_ID;
        } else if branch < 0.9 {
            corrupted[i] = rng.random_range(NUM_RESERVED..vocab_len);
        }
        // else: keep the original token, but still predict it.
    }
    MaskedBatch {
        corrupted,
        positions,
        targets,
    }
}

// ---------------------------------------------------------------------------
// Disk cache
// ---------------------------------------------------------------------------

const MANIFEST_FILE: &str = "manifest.json";
const IDS_FILE: &str = "ids.bin";
const CACHE_SCHEMA_VERSION: u32 = 1;

/// Sidecar metadata for a cached dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub schema_version: u32,
    pub seq_len: usize,
    pub pack_mode: PackMode,
    pub corpus_hash: String,
    pub vocab_hash: String,
    pub num_sequences: usize,
    pub total_tokens: usize,
}

/// Write `manifest.json` and `ids.bin` (little-endian `u32`s) into `dir`.
pub fn save_cache(dataset: &PackedDataset, vocab: &Vocab, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = CacheManifest {
        schema_version: CACHE_SCHEMA_VERSION,
        seq_len: dataset.seq_len,
        pack_mode: dataset.mode,
        corpus_hash: dataset.corpus_hash.clone(),
        vocab_hash: vocab.hash(),
        num_sequences: dataset.num_sequences(),
        total_tokens: dataset.total_tokens(),
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| LabError::Data(format!("manifest serialization failed: {e}")))?;
    std::fs::write(dir.join(MANIFEST_FILE), json)?;
    let mut bytes = Vec::with_capacity(dataset.tokens.len() * 4);
    for &t in &dataset.tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    std::fs::write(dir.join(IDS_FILE), bytes)?;
    Ok(())
}

/// Read a dataset cached by [`save_cache`], validating sizes against the
/// manifest.
pub fn load_cache(dir: &Path) -> Result<(PackedDataset, CacheManifest)> {
    let json = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CacheManifest = serde_json::from_str(&json)
        .map_err(|e| LabError::Data(format!("manifest parse failed: {e}")))?;
    if manifest.schema_version != CACHE_SCHEMA_VERSION {
        return Err(LabError::Data(format!(
            "cache schema version {} unsupported (expected {CACHE_SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    let bytes = std::fs::read(dir.join(IDS_FILE))?;
    if bytes.len() != manifest.total_tokens * 4 {
        return Err(LabError::Data(format!(
            "ids.bin holds {} bytes but manifest expects {}",
            bytes.len(),
            manifest.total_tokens * 4
        )));
    }
    if manifest.total_tokens != manifest.num_sequences * manifest.seq_len {
        return Err(LabError::Data(
            "manifest token count is not num_sequences * seq_len".into(),
        ));
    }
    let tokens: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let dataset = PackedDataset {
        seq_len: manifest.seq_len,
        mode: manifest.pack_mode,
        tokens,
        corpus_hash: manifest.corpus_hash.clone(),
    };
    Ok((dataset, manifest))
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

/// Number of distinct words [`synth_corpus`] can emit (punctuation aside).
pub const SYNTH_WORD_COUNT: usize = 240;

/// Generate a deterministic pseudo-text of at least `target_bytes` bytes.
///
/// The generator walks a fixed word graph in which every word has exactly
/// three possible successors (one of them the next word in a global cycle, so
/// all words stay reachable). That keeps the conditional entropy of the
/// stream low — roughly `ln 3` nats — which makes the corpus learnable by
/// small models in a few hundred steps while still exercising a few hundred
/// vocabulary entries. Sentences end with a standalone `.` token and
/// paragraphs are separated by blank lines, so document-bounded packing has
/// real boundaries to respect.
pub fn synth_corpus(seed: u64, target_bytes: usize) -> String {
    use rand::SeedableRng;

    let words = synth_words();
    let successors: Vec<[usize; 3]> = (0..words.len())
        .map(|i| {
            [
                (i + 1) % words.len(),
                crate::rng::fnv1a(format!("jump-a:{i}").as_bytes()) as usize % words.len(),
                crate::rng::fnv1a(format!("jump-b:{i}").as_bytes()) as usize % words.len(),
            ]
        })
        .collect();

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(target_bytes + 128);
    let mut current: usize = rng.random_range(0..words.len());
    while out.len() < target_bytes {
        let sentences = rng.random_range(3..=7usize);
        for s in 0..sentences {
            let len = rng.random_range(6..=14usize);
            for w in 0..len {
                if s > 0 || w > 0 {
                    out.push(' ');
                }
                out.push_str(&words[current]);
                current = successors[current][rng.random_range(0..3usize)];
            }
            out.push_str(" .");
        }
        out.push_str("\n\n");
    }
    out
}

fn synth_words() -> Vec<String> {
    const ONSETS: [&str; 20] = [
        "b", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "w", "z", "br",
        "st", "tr", "pl",
    ];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 6] = ["", "n", "r", "s", "t", "l"];
    let mut words = Vec::with_capacity(SYNTH_WORD_COUNT);
    'outer: for coda in CODAS {
        for onset in ONSETS {
            for vowel in VOWELS {
                words.push(format!("{onset}{vowel}{coda}"));
                if words.len() == SYNTH_WORD_COUNT {
                    break 'outer;
                }
            }
        }
    }
    words
}

// ---------------------------------------------------------------------------
