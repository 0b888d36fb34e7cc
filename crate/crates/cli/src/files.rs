//! On-disk file formats owned by the command-line layer.
//!
//! * **Embeddings** (`.jsonl`): a header line naming the format, version,
//!   dimension, and document kind, then one JSON record per document with
//!   its vector and the metadata the evaluator and index need.
//! * **Model meta** (`<checkpoint>.meta.json`): everything required to
//!   rebuild the frozen side of a checkpointed model — backbone
//!   configuration, token alias table, and the section registry.
//! * **Projection CSV**: `id,tag,v0..v{d-1}` rows for external embedding
//!   projectors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use skillmatch_core::backbone::BackboneConfig;
use skillmatch_core::corpus::{DocumentKind, SectionRegistry};
use skillmatch_core::evaluation::EvalItem;

pub const EMBEDDINGS_FORMAT: &str = "skillmatch-embeddings";
pub const EMBEDDINGS_VERSION: u32 = 1;
pub const META_FORMAT: &str = "skillmatch-model-meta";
pub const META_VERSION: u32 = 1;

/// First line of an embeddings file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EmbeddingsHeader {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub kind: DocumentKind,
}

/// Writes an embeddings file: header line, then one record per item in the
/// given order.
pub fn save_embeddings(path: &Path, kind: DocumentKind, items: &[EvalItem]) -> Result<()> {
    let dim = items.first().map(|i| i.vector.len()).unwrap_or(0);
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let header = EmbeddingsHeader { format: EMBEDDINGS_FORMAT.into(), version: EMBEDDINGS_VERSION, dim, kind };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an embeddings file, validating the header and that every record
/// matches the declared dimension.
pub fn load_embeddings(path: &Path) -> Result<(EmbeddingsHeader, Vec<EvalItem>)> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .transpose()?
        .with_context(|| format!("{}: empty embeddings file", path.display()))?;
    let header: EmbeddingsHeader = serde_json::from_str(&first)
        .with_context(|| format!("{}: bad embeddings header", path.display()))?;
    if header.format != EMBEDDINGS_FORMAT {
        bail!("{}: not an embeddings file (format {:?})", path.display(), header.format);
    }
    if header.version != EMBEDDINGS_VERSION {
        bail!("{}: unsupported embeddings version {}", path.display(), header.version);
    }
    let mut items = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem =
            serde_json::from_str(&line).with_context(|| format!("{}: record {}", path.display(), n + 1))?;
        if item.vector.len() != header.dim {
            bail!(
                "{}: record {} has dimension {}, header says {}",
                path.display(),
                n + 1,
                item.vector.len(),
                header.dim
            );
        }
        items.push(item);
    }
    Ok((header, items))
}

/// Sidecar describing the frozen parts of a model: enough to rebuild the
/// backbone, tokenizer, and section layout that a checkpoint was trained
/// against.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMeta {
    pub format: String,
    pub version: u32,
    pub backbone: BackboneConfig,
    /// Surface token id → latent token id folds applied by the backbone.
    #[serde(default)]
    pub token_aliases: BTreeMap<u32, u32>,
    pub registry: SectionRegistry,
}

impl ModelMeta {
    pub fn new(backbone: BackboneConfig, token_aliases: BTreeMap<u32, u32>, registry: SectionRegistry) -> Self {
        ModelMeta { format: META_FORMAT.into(), version: META_VERSION, backbone, token_aliases, registry }
    }
}

/// The sidecar path for a checkpoint: the same name with `.meta.json`
/// appended.
pub fn meta_path(checkpoint: &Path) -> PathBuf {
    let mut name = OsString::from(checkpoint.as_os_str());
    name.push(".meta.json");
    PathBuf::from(name)
}

pub fn save_meta(meta: &ModelMeta, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), meta)?;
    Ok(())
}

pub fn load_meta(path: &Path) -> Result<ModelMeta> {
    let file = File::open(path).with_context(|| {
        format!("opening {} (is the checkpoint's .meta.json sidecar missing?)", path.display())
    })?;
    let meta: ModelMeta = serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("{}: bad model meta", path.display()))?;
    if meta.format != META_FORMAT {
        bail!("{}: not a model meta file (format {:?})", path.display(), meta.format);
    }
    if meta.version != META_VERSION {
        bail!("{}: unsupported model meta version {}", path.display(), meta.version);
    }
    Ok(meta)
}

/// Writes `id,tag,v0..v{d-1}` rows (tag = category) for external projection
/// tools.
pub fn export_csv(items: &[EvalItem], path: &Path) -> Result<()> {
    let dim = items.first().map(|i| i.vector.len()).unwrap_or(0);
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let mut header = String::from("id,tag");
    for i in 0..dim {
        header.push_str(&format!(",v{i}"));
    }
    writeln!(w, "{header}")?;
    for item in items {
        write!(w, "{},{}", item.id, item.category)?;
        for v in &item.vector {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a token alias JSON file (surface id → latent id), as written by
/// `synth --aliases-out`.
pub fn load_aliases(path: &Path) -> Result<BTreeMap<u32, u32>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("{}: bad alias table", path.display()))
}

pub fn save_aliases(aliases: &BTreeMap<u32, u32>, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), aliases)?;
    Ok(())
}
