//! Frozen per-token section encoders.
//!
//! A backbone turns one tokenized section into a matrix with one row per
//! token — no pooling, no projection — and its weights never change after
//! construction. Two implementations are provided: a deterministic,
//! seed-initialized stub, and a loader for precomputed embedding files.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{TokenSequence, DEFAULT_MAX_SECTION_TOKENS, DEFAULT_VOCAB_SIZE};
use crate::numerics::transformer::{attention_block, sinusoidal_positions, BlockParams};
use crate::numerics::{NumericsError, Tape, Tensor};

/// Errors from backbone construction, loading, and encoding.
#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("no precomputed embedding for document \"{doc_id}\" section \"{section}\"")]
    SectionNotFound { doc_id: String, section: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid precomputed-embedding file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Configuration of the stub backbone.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: u32,
    pub seed: u64,
    pub max_section_tokens: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            d_model: 128,
            n_layers: 2,
            n_heads: 4,
            vocab_size: DEFAULT_VOCAB_SIZE,
            seed: 0,
            max_section_tokens: DEFAULT_MAX_SECTION_TOKENS,
        }
    }
}

/// A frozen section encoder: one output row per input token.
pub trait Backbone: Send + Sync {
    /// Output embedding width.
    fn d_model(&self) -> usize;

    /// Encodes one section. `doc_id`/`section` identify the section for
    /// implementations backed by precomputed files; the stub keys only on the
    /// token ids.
    fn encode_section(&self, doc_id: &str, section: &str, tokens: &TokenSequence) -> Result<Tensor, BackboneError>;

    /// Checksum over every weight byte; stable across calls, used to prove
    /// the backbone stays frozen through training.
    fn checksum(&self) -> u64;
}

/// Deterministic frozen encoder: seeded token embedding table, sinusoidal
/// positions restarting per section, and a stack of frozen attention blocks.
pub struct StubBackbone {
    config: BackboneConfig,
    token_table: Tensor,
    blocks: Vec<BlockParams>,
    aliases: BTreeMap<u32, u32>,
    cache: Mutex<HashMap<Vec<u32>, Tensor>>,
}

impl StubBackbone {
    pub fn new(config: BackboneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = (3.0 / config.d_model as f64).sqrt() as f32;
        let table: Vec<f32> = (0..config.vocab_size as usize * config.d_model)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        let token_table = Tensor::new(table, &[config.vocab_size as usize, config.d_model]).expect("nonzero dims");
        let blocks = (0..config.n_layers)
            .map(|_| BlockParams::init(config.d_model, 4 * config.d_model, &mut rng))
            .collect();
        StubBackbone {
            config,
            token_table,
            blocks,
            aliases: BTreeMap::new(),
            cache: Mutex::new(HashMap::new()),
        }
    }

    /// Installs a dialect→latent token alias map, applied before embedding
    /// lookup. Alias targets must fit the vocabulary.
    pub fn with_aliases(mut self, aliases: BTreeMap<u32, u32>) -> Result<Self, BackboneError> {
        for (&from, &to) in &aliases {
            if from >= self.config.vocab_size || to >= self.config.vocab_size {
                return Err(BackboneError::TokenOutOfRange {
                    id: from.max(to),
                    vocab: self.config.vocab_size,
                });
            }
        }
        self.aliases = aliases;
        self.cache = Mutex::new(HashMap::new());
        Ok(self)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn aliases(&self) -> &BTreeMap<u32, u32> {
        &self.aliases
    }

    fn forward(&self, ids: &[u32]) -> Result<Tensor, BackboneError> {
        let d = self.config.d_model;
        let k = ids.len();
        let mut rows = Vec::with_capacity(k * d);
        for &id in ids {
            rows.extend_from_slice(self.token_table.row(id as usize));
        }
        // Token embeddings are scaled by sqrt(d_model) before the positional
        // signal is added (the standard transformer input recipe). Without
        // the scale the shared positional pattern drowns the content: every
        // section encodes to nearly the same ray and downstream contrastive
        // training starts on a uniform-softmax plateau.
        let scale = (d as f32).sqrt();
        for v in rows.iter_mut() {
            *v *= scale;
        }
        let positions = sinusoidal_positions(k, d);
        let mut tape = Tape::new();
        let tokens = tape.constant(Tensor::new(rows, &[k, d])?);
        let pos = tape.constant(positions);
        let mut x = tape.add(tokens, pos)?;
        for block in &self.blocks {
            let vars = block.register(&mut tape, false);
            x = attention_block(&mut tape, x, &vars, self.config.n_heads)?;
        }
        Ok(tape.value(x).clone())
    }
}

impl Backbone for StubBackbone {
    fn d_model(&self) -> usize {
        self.config.d_model
    }

    fn encode_section(&self, _doc_id: &str, _section: &str, tokens: &TokenSequence) -> Result<Tensor, BackboneError> {
        let mut ids = Vec::with_capacity(tokens.len());
        for &t in tokens.tokens() {
            let mapped = *self.aliases.get(&t).unwrap_or(&t);
            if mapped >= self.config.vocab_size {
                return Err(BackboneError::TokenOutOfRange {
                    id: mapped,
                    vocab: self.config.vocab_size,
                });
            }
            ids.push(mapped);
        }
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&ids) {
            return Ok(hit.clone());
        }
        let out = self.forward(&ids)?;
        self.cache.lock().expect("cache lock").insert(ids, out.clone());
        Ok(out)
    }

    fn checksum(&self) -> u64 {
        let mut hash = FnvHasher::new();
        hash.update_tensor(&self.token_table);
        for block in &self.blocks {
            for (_, t) in block.named_params() {
                hash.update_tensor(t);
            }
        }
        hash.finish()
    }
}

/// Incremental 64-bit FNV-1a over weight bytes.
struct FnvHasher(u64);

impl FnvHasher {
    fn new() -> Self {
        FnvHasher(0xcbf29ce484222325)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    fn update_tensor(&mut self, t: &Tensor) {
        for v in t.data() {
            self.update(&v.to_le_bytes());
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

const PRECOMPUTED_MAGIC: &[u8; 4] = b"SMBK";
const PRECOMPUTED_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PrecomputedIndex {
    d_model: usize,
    entries: Vec<PrecomputedEntry>,
}

#[derive(Serialize, Deserialize)]
struct PrecomputedEntry {
    doc_id: String,
    section: String,
    rows: usize,
}

/// Section encoder backed by a file of precomputed matrices, keyed by
/// (document id, section label). Returns the stored matrix verbatim.
pub struct PrecomputedBackbone {
    d_model: usize,
    sections: HashMap<(String, String), Tensor>,
}

impl PrecomputedBackbone {
    /// Loads a precomputed-embedding file (see [`save_precomputed`]).
    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != PRECOMPUTED_MAGIC {
            return Err(BackboneError::BadFile("bad magic bytes".to_string()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let version = u32::from_le_bytes(u32buf);
        if version != PRECOMPUTED_VERSION {
            return Err(BackboneError::BadFile(format!("unsupported version {version}")));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let json_len = u64::from_le_bytes(u64buf) as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json)?;
        let index: PrecomputedIndex =
            serde_json::from_slice(&json).map_err(|e| BackboneError::BadFile(format!("index: {e}")))?;
        if index.d_model == 0 {
            return Err(BackboneError::BadFile("d_model must be positive".to_string()));
        }
        let mut sections = HashMap::with_capacity(index.entries.len());
        for entry in index.entries {
            if entry.rows == 0 {
                return Err(BackboneError::BadFile(format!(
                    "entry ({}, {}) has zero rows",
                    entry.doc_id, entry.section
                )));
            }
            let mut bytes = vec![0u8; entry.rows * index.d_model * 4];
            r.read_exact(&mut bytes).map_err(|_| {
                BackboneError::BadFile(format!(
                    "entry ({}, {}) is truncated or has the wrong width",
                    entry.doc_id, entry.section
                ))
            })?;
            let data: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let matrix = Tensor::new(data, &[entry.rows, index.d_model])?;
            sections.insert((entry.doc_id, entry.section), matrix);
        }
        // A well-formed file is fully consumed.
        let mut probe = [0u8; 1];
        if r.read(&mut probe)? != 0 {
            return Err(BackboneError::BadFile("trailing bytes after last entry".to_string()));
        }
        Ok(PrecomputedBackbone {
            d_model: index.d_model,
            sections,
        })
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }
}

impl Backbone for PrecomputedBackbone {
    fn d_model(&self) -> usize {
        self.d_model
    }

    fn encode_section(&self, doc_id: &str, section: &str, _tokens: &TokenSequence) -> Result<Tensor, BackboneError> {
        self.sections
            .get(&(doc_id.to_string(), section.to_string()))
            .cloned()
            .ok_or_else(|| BackboneError::SectionNotFound {
                doc_id: doc_id.to_string(),
                section: section.to_string(),
            })
    }

    fn checksum(&self) -> u64 {
        let mut keys: Vec<&(String, String)> = self.sections.keys().collect();
        keys.sort();
        let mut hash = FnvHasher::new();
        for key in keys {
            hash.update(key.0.as_bytes());
            hash.update(key.1.as_bytes());
            hash.update_tensor(&self.sections[key]);
        }
        hash.finish()
    }
}

/// Writes a precomputed-embedding file: magic, version, JSON index, then
/// little-endian f32 matrices back to back. Every matrix must be rank-2 with
/// width `d_model`.
pub fn save_precomputed(
    path: &Path,
    d_model: usize,
    entries: &[(String, String, Tensor)],
) -> Result<(), BackboneError> {
    let mut index = PrecomputedIndex {
        d_model,
        entries: Vec::with_capacity(entries.len()),
    };
    for (doc_id, section, matrix) in entries {
        let (rows, cols) = matrix.dims2()?;
        if cols != d_model {
            return Err(BackboneError::BadFile(format!(
                "entry ({doc_id}, {section}) has width {cols}, expected {d_model}"
            )));
        }
        index.entries.push(PrecomputedEntry {
            doc_id: doc_id.clone(),
            section: section.clone(),
            rows,
        });
    }
    let json = serde_json::to_vec(&index).map_err(|e| BackboneError::BadFile(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PRECOMPUTED_MAGIC)?;
    w.write_all(&PRECOMPUTED_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, _, matrix) in entries {
        for v in matrix.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}
