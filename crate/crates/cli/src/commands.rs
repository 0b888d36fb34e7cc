//! Implementations of the subcommands, shared between the binary and the
//! HTTP server. `run_retrieval` is the single retrieval code path: the
//! `retrieve` subcommand and the `/retrieve` endpoint both call it, so their
//! results are identical by construction.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use skillmatch_core::backbone::StubBackbone;
use skillmatch_core::corpus::{
    generate_synthetic, load_corpus, save_corpus, temporal_split, Corpus, CorpusSplit, Document,
    DocumentKind, Interaction, SynthConfig,
};
use skillmatch_core::encoder::{EncoderConfig, EncoderError};
use skillmatch_core::evaluation::{evaluate, EvalConfig, EvalItem, EvalReport, ScoreMode};
use skillmatch_core::index::{
    FilterPredicate, IndexError, IndexParams, IndexedVector, Neighbor, QueryMode, VectorIndex,
};
use skillmatch_core::trainer::{train, write_history_csv, Checkpoint, LossKind, TrainConfig};
use thiserror::Error;

use crate::files::{self, ModelMeta};
use crate::model::Model;

/// How a corpus's interactions are split before training or evaluation.
/// Nothing set means no split: train on everything, evaluate everything.
#[derive(Clone, Copy, Debug, Default)]
pub struct SplitOpts {
    /// Absolute timestamp cutoff; interactions at or after it are test.
    pub cutoff: Option<i64>,
    /// Alternative to `cutoff`: put roughly this fraction of interactions
    /// (the latest ones) into test.
    pub test_fraction: Option<f64>,
    /// Fraction of pre-cutoff interactions held out for validation.
    pub val_ratio: f64,
    /// Seed for the validation shuffle.
    pub split_seed: u64,
}

impl SplitOpts {
    /// Resolves the options against a corpus. `None` when no split was
    /// requested.
    pub fn resolve(&self, corpus: &Corpus) -> Result<Option<CorpusSplit>> {
        let cutoff = match (self.cutoff, self.test_fraction) {
            (Some(c), _) => c,
            (None, Some(f)) => {
                if !(f > 0.0 && f < 1.0) {
                    bail!("--test-fraction must be strictly between 0 and 1, got {f}");
                }
                let mut ts: Vec<i64> = corpus.interactions.iter().map(|i| i.ts).collect();
                if ts.is_empty() {
                    bail!("corpus has no interactions to split");
                }
                ts.sort_unstable();
                let idx = ((ts.len() as f64) * (1.0 - f)).floor() as usize;
                ts[idx.min(ts.len() - 1)]
            }
            (None, None) => return Ok(None),
        };
        let split = temporal_split(corpus, cutoff, self.val_ratio, self.split_seed)
            .context("splitting interactions")?;
        Ok(Some(split))
    }
}

/// `synth`: generates a corpus and writes it as JSONL, optionally with the
/// latent-dialect twin and the token alias table.
pub fn cmd_synth(
    config: &SynthConfig,
    seed: u64,
    out: &Path,
    latent_out: Option<&Path>,
    aliases_out: Option<&Path>,
) -> Result<()> {
    let output = generate_synthetic(config, seed).context("generating corpus")?;
    save_corpus(&output.corpus, out).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = latent_out {
        save_corpus(&output.latent_corpus, path).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = aliases_out {
        files::save_aliases(&output.token_aliases, path)?;
    }
    println!(
        "wrote {} documents and {} interactions to {}",
        output.corpus.documents.len(),
        output.corpus.interactions.len(),
        out.display()
    );
    Ok(())
}

/// Resolved inputs for `train`.
pub struct TrainInputs<'a> {
    pub corpus_path: &'a Path,
    pub out: &'a Path,
    pub history: Option<&'a Path>,
    pub aliases: Option<&'a Path>,
    pub split: SplitOpts,
    pub train_config: TrainConfig,
    pub encoder_config: EncoderConfig,
    pub backbone_config: skillmatch_core::backbone::BackboneConfig,
}

/// `train`: temporal split, contrastive training, checkpoint + sidecar +
/// history outputs. The checkpoint holds the towers from the epoch with the
/// lowest validation loss (the final towers when nothing was held out).
pub fn cmd_train(inputs: &TrainInputs) -> Result<()> {
    let corpus = load_corpus(inputs.corpus_path)
        .with_context(|| format!("loading corpus {}", inputs.corpus_path.display()))?;
    let aliases = match inputs.aliases {
        Some(path) => files::load_aliases(path)?,
        None => BTreeMap::new(),
    };
    let backbone = StubBackbone::new(inputs.backbone_config.clone())
        .with_aliases(aliases.clone())
        .context("building backbone")?;
    let tokenizer = skillmatch_core::corpus::Tokenizer::new(
        inputs.backbone_config.vocab_size,
        inputs.backbone_config.max_section_tokens,
    )?;

    let (train_set, validation): (Vec<Interaction>, Vec<Interaction>) =
        match inputs.split.resolve(&corpus)? {
            Some(split) => {
                println!(
                    "split: {} train / {} validation / {} test interactions",
                    split.train.len(),
                    split.validation.len(),
                    split.test.len()
                );
                (split.train, split.validation)
            }
            None => (corpus.interactions.clone(), Vec::new()),
        };

    let outcome = train(
        &corpus,
        &train_set,
        &validation,
        &backbone,
        &inputs.encoder_config,
        &inputs.train_config,
        &tokenizer,
    )
    .context("training")?;

    if let Some(path) = inputs.history {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_history_csv(BufWriter::new(file), &outcome.history)?;
    }

    let checkpoint = Checkpoint {
        encoder: inputs.encoder_config.clone(),
        train: inputs.train_config.clone(),
        freelancer: outcome.best_freelancer,
        project: outcome.best_project,
    };
    let meta = ModelMeta::new(inputs.backbone_config.clone(), aliases, corpus.registry.clone());
    let model = Model::assemble(checkpoint, meta.clone())?;
    model.save(inputs.out, &meta)?;

    let last = outcome.history.last().map(|r| r.loss);
    println!(
        "trained {} steps; kept epoch {}; final loss {}",
        outcome.history.len(),
        outcome.best_epoch,
        last.map(|l| format!("{l:.6}")).unwrap_or_else(|| "-".into())
    );
    Ok(())
}

/// Encodes documents in id order, returning evaluation-ready items.
pub fn encode_documents<'a>(
    model: &Model,
    docs: impl Iterator<Item = &'a Document>,
) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for doc in docs {
        let emb = model.encode(doc).with_context(|| format!("encoding document {}", doc.id))?;
        items.push(EvalItem::from_document(doc, emb.vector));
    }
    Ok(items)
}

/// `encode`: embeds one side of a corpus and writes an embeddings file.
pub fn cmd_encode(checkpoint: &Path, corpus_path: &Path, kind: DocumentKind, out: &Path) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let corpus =
        load_corpus(corpus_path).with_context(|| format!("loading corpus {}", corpus_path.display()))?;
    let docs: Vec<&Document> = corpus.documents.values().filter(|d| d.kind == kind).collect();
    if docs.is_empty() {
        bail!("corpus has no {kind:?} documents");
    }
    let items = encode_documents(&model, docs.into_iter())?;
    files::save_embeddings(out, kind, &items)?;
    println!("encoded {} documents to {}", items.len(), out.display());
    Ok(())
}

/// `index-build`: loads an embeddings file and builds a persisted vector
/// index, tagging each entry with its category and language.
pub fn cmd_index_build(embeddings: &Path, out: &Path, params: IndexParams) -> Result<()> {
    let (_, items) = files::load_embeddings(embeddings)?;
    let vectors: Vec<IndexedVector> = items
        .into_iter()
        .map(|item| {
            let mut tags = BTreeMap::new();
            tags.insert("category".to_string(), item.category);
            tags.insert("language".to_string(), item.language);
            IndexedVector { doc_id: item.id, vector: item.vector, tags }
        })
        .collect();
    let index = VectorIndex::build(vectors, params).context("building index")?;
    index.save(out).with_context(|| format!("writing {}", out.display()))?;
    println!("indexed {} vectors ({} dims) to {}", index.len(), index.dim(), out.display());
    Ok(())
}

/// A retrieval call: the document to encode on the fly, how many neighbors,
/// an optional tag filter, and the query strategy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub document: Document,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub filter: FilterPredicate,
    #[serde(default)]
    pub mode: QueryMode,
}

fn default_k() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub results: Vec<Neighbor>,
}

/// Why a retrieval failed, split by whose fault it is: bad request content
/// encodes as a client error, a model/index width disagreement is a server
/// misconfiguration.
#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("encoding failed: {0}")]
    Encode(#[from] EncoderError),
    #[error("dimension mismatch: model produces {model}-dim vectors, index stores {index}-dim")]
    Dimension { model: usize, index: usize },
    #[error("bad query: {0}")]
    BadQuery(IndexError),
}

/// The one retrieval path: encode the document with the tower matching its
/// kind, then query the index.
pub fn run_retrieval(
    model: &Model,
    index: &VectorIndex,
    request: &RetrieveRequest,
) -> Result<RetrieveResponse, RetrievalError> {
    if model.dim() != index.dim() {
        return Err(RetrievalError::Dimension { model: model.dim(), index: index.dim() });
    }
    let embedding = model.encode(&request.document)?;
    let results = index
        .knn(&embedding.vector, request.k, &request.filter, request.mode)
        .map_err(RetrievalError::BadQuery)?;
    Ok(RetrieveResponse { results })
}

/// `retrieve`: reads a document JSON (path or `-` for stdin), runs the
/// shared retrieval path, and prints the ranked results as JSON on stdout.
pub fn cmd_retrieve(
    checkpoint: &Path,
    index_path: &Path,
    document_path: &Path,
    k: usize,
    filter: Option<&str>,
    mode: QueryMode,
) -> Result<()> {
    let model = Model::load(checkpoint)?;
    let index =
        VectorIndex::load(index_path).with_context(|| format!("loading index {}", index_path.display()))?;
    let raw = if document_path.as_os_str() == "-" {
        let mut buf = String::new();
        std::io::stdin().read_to_string(&mut buf)?;
        buf
    } else {
        std::fs::read_to_string(document_path)
            .with_context(|| format!("reading {}", document_path.display()))?
    };
    let document: Document = serde_json::from_str(&raw).context("parsing document JSON")?;
    let filter: FilterPredicate = match filter {
        Some(raw) => serde_json::from_str(raw).context("parsing --filter JSON")?,
        None => FilterPredicate::all(),
    };
    let request = RetrieveRequest { document, k, filter, mode };
    let response = run_retrieval(&model, &index, &request)?;
    println!("{}", serde_json::to_string_pretty(&response)?);
    Ok(())
}

/// Resolved inputs for `eval`.
pub struct EvalInputs<'a> {
    pub checkpoint: &'a Path,
    pub corpus_path: &'a Path,
    pub split: SplitOpts,
    /// Comparison mode; `None` follows the checkpoint's objective (score
    /// for softmax training, distance for margin training).
    pub mode: Option<ScoreMode>,
    pub overlap_ks: Vec<usize>,
    pub retrieval_k: usize,
    pub approximate: bool,
    pub out: Option<&'a Path>,
}

/// `eval`: encodes the test proposals and the full profile pool, scores the
/// held-out interactions, and prints the metric table (writing the JSON
/// report when asked).
pub fn cmd_eval(inputs: &EvalInputs) -> Result<EvalReport> {
    let model = Model::load(inputs.checkpoint)?;
    let mode = inputs.mode.unwrap_or(match model.checkpoint.train.loss_kind {
        LossKind::DualAInfoNce => ScoreMode::Score,
        LossKind::DualATriplets => ScoreMode::Distance,
    });
    let config = EvalConfig {
        mode,
        overlap_ks: inputs.overlap_ks.clone(),
        retrieval_k: inputs.retrieval_k,
        approximate: inputs.approximate,
        ..EvalConfig::default()
    };
    let corpus = load_corpus(inputs.corpus_path)
        .with_context(|| format!("loading corpus {}", inputs.corpus_path.display()))?;

    let interactions: Vec<Interaction> = match inputs.split.resolve(&corpus)? {
        Some(split) => split.test,
        None => corpus.interactions.clone(),
    };
    let referenced = CorpusSplit::referenced_document_ids(&interactions);
    let proposals: Vec<&Document> = if interactions.is_empty() {
        corpus.proposals().collect()
    } else {
        corpus.proposals().filter(|d| referenced.contains(&d.id)).collect()
    };
    if proposals.is_empty() {
        bail!("nothing to evaluate: no proposals referenced by the selected interactions");
    }
    let projects = encode_documents(&model, proposals.into_iter())?;
    let freelancers = encode_documents(&model, corpus.profiles())?;
    println!(
        "evaluating {} projects against {} profiles ({} interactions)",
        projects.len(),
        freelancers.len(),
        interactions.len()
    );

    let report = evaluate(&projects, &freelancers, &interactions, &config).context("evaluating")?;
    print!("{}", report.to_table());
    if let Some(path) = inputs.out {
        let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &report)?;
        println!("report written to {}", path.display());
    }
    Ok(report)
}

/// `export-embeddings`: converts an embeddings file to `id,tag,vector` CSV.
pub fn cmd_export(embeddings: &Path, out: &Path) -> Result<()> {
    let (header, items) = files::load_embeddings(embeddings)?;
    files::export_csv(&items, out)?;
    println!("exported {} rows ({} dims) to {}", items.len(), header.dim, out.display());
    Ok(())
}

/// Shared by `train` presets: the loss kind decides whether embeddings are
/// L2-normalized (cosine regimes) or left raw (distance regimes).
pub fn default_normalize(config: &TrainConfig) -> bool {
    matches!(config.loss_kind, skillmatch_core::trainer::LossKind::DualAInfoNce)
}

/// Keeps the backbone in lockstep with the trainable width.
pub fn align_backbone(backbone: &mut skillmatch_core::backbone::BackboneConfig, encoder: &EncoderConfig) {
    backbone.d_model = encoder.d_model;
}
