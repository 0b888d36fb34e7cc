//! A fully loaded model: trained towers plus the frozen pieces they were
//! trained against (backbone, tokenizer, section registry).

use std::path::Path;

use anyhow::{Context, Result};
use skillmatch_core::backbone::StubBackbone;
use skillmatch_core::corpus::{Document, DocumentKind, SectionRegistry, Tokenizer};
use skillmatch_core::encoder::{encode_document, DocumentEmbedding, EncoderError};
use skillmatch_core::trainer::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::files::{load_meta, meta_path, save_meta, ModelMeta};

/// Checkpointed towers together with the reconstructed frozen stack.
pub struct Model {
    pub checkpoint: Checkpoint,
    pub backbone: StubBackbone,
    pub tokenizer: Tokenizer,
    pub registry: SectionRegistry,
}

impl Model {
    /// Loads a checkpoint and its `.meta.json` sidecar, rebuilding the
    /// backbone and tokenizer the checkpoint was trained with.
    pub fn load(checkpoint_path: &Path) -> Result<Model> {
        let checkpoint = load_checkpoint(checkpoint_path)
            .with_context(|| format!("loading checkpoint {}", checkpoint_path.display()))?;
        let meta = load_meta(&meta_path(checkpoint_path))?;
        Model::assemble(checkpoint, meta)
    }

    /// Builds a model from in-memory parts (used right after training).
    pub fn assemble(checkpoint: Checkpoint, meta: ModelMeta) -> Result<Model> {
        let backbone = StubBackbone::new(meta.backbone.clone())
            .with_aliases(meta.token_aliases.clone())
            .context("rebuilding backbone from model meta")?;
        let tokenizer = Tokenizer::new(meta.backbone.vocab_size, meta.backbone.max_section_tokens)
            .context("rebuilding tokenizer from model meta")?;
        anyhow::ensure!(
            meta.backbone.d_model == checkpoint.encoder.d_model,
            "model meta backbone width {} does not match checkpoint width {}",
            meta.backbone.d_model,
            checkpoint.encoder.d_model
        );
        Ok(Model { checkpoint, backbone, tokenizer, registry: meta.registry })
    }

    /// Writes the checkpoint and its sidecar next to each other.
    pub fn save(&self, checkpoint_path: &Path, meta: &ModelMeta) -> Result<()> {
        save_checkpoint(&self.checkpoint, checkpoint_path)
            .with_context(|| format!("writing checkpoint {}", checkpoint_path.display()))?;
        save_meta(meta, &meta_path(checkpoint_path))?;
        Ok(())
    }

    /// Embedding width.
    pub fn dim(&self) -> usize {
        self.checkpoint.encoder.d_model
    }

    /// Encodes one document with the tower matching its kind: profiles go
    /// through the freelancer tower, proposals through the project tower.
    pub fn encode(&self, doc: &Document) -> Result<DocumentEmbedding, EncoderError> {
        let tower = match doc.kind {
            DocumentKind::Profile => &self.checkpoint.freelancer,
            DocumentKind::Proposal => &self.checkpoint.project,
        };
        encode_document(doc, tower, &self.checkpoint.encoder, &self.registry, &self.tokenizer, &self.backbone)
    }
}
