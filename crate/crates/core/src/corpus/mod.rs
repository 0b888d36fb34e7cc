//! Sectioned documents, interactions, tokenization, temporal splitting, and
//! synthetic corpus generation.
//!
//! A corpus is a set of freelancer profiles and project proposals, each made
//! of a fixed registry of text sections, plus timestamped positive/negative
//! interactions between proposals and profiles.

mod io;
mod split;
mod synth;
mod tokenizer;

pub use io::{load_corpus, save_corpus};
pub use split::{temporal_split, CorpusSplit};
pub use synth::{generate_synthetic, SynthConfig, SynthOutput};
pub use tokenizer::{TokenSequence, Tokenizer, CLS_TOKEN, DEFAULT_MAX_SECTION_TOKENS, DEFAULT_VOCAB_SIZE, END_TOKEN};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Section labels of a freelancer profile, in canonical concatenation order.
pub const PROFILE_SECTIONS: [&str; 5] = ["job_title", "description", "job_family", "job_category", "skills"];

/// Section labels of a project proposal, in canonical concatenation order.
pub const PROPOSAL_SECTIONS: [&str; 7] = [
    "mission_title",
    "job_title",
    "description",
    "job_family",
    "job_category",
    "mandatory_skills",
    "bonus_skills",
];

/// Errors produced while loading, splitting, or generating corpora.
#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {detail}")]
    MalformedLine { line: usize, detail: String },
    #[error("corpus file is missing its schema header line")]
    MissingHeader,
    #[error("unsupported corpus schema version {0}")]
    UnsupportedVersion(u32),
    #[error("line {line}: document \"{id}\" declares unknown section \"{label}\"")]
    UnknownSection { line: usize, id: String, label: String },
    #[error("duplicate document id \"{0}\"")]
    DuplicateDocument(String),
    #[error("interaction ({project_id}, {freelancer_id}): {detail}")]
    BadReference {
        project_id: String,
        freelancer_id: String,
        detail: String,
    },
    #[error("profile \"{0}\" has an empty category")]
    EmptyCategory(String),
    #[error("validation ratio must lie strictly between 0 and 1, got {0}")]
    BadValidationRatio(f64),
    #[error("temporal split produced an empty {0} set")]
    EmptySplit(&'static str),
    #[error("infeasible synthetic config: {0}")]
    InfeasibleConfig(String),
    #[error("invalid tokenizer config: {0}")]
    BadTokenizerConfig(String),
}

/// Whether a document is a freelancer profile or a project proposal.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentKind {
    Profile,
    Proposal,
}

/// The section registry of a corpus: one ordered label list per document
/// kind. The order is canonical and defines concatenation order everywhere
/// downstream.
#[derive(Clone, Debug, Eq, PartialEq, Serialize, Deserialize)]
pub struct SectionRegistry {
    pub profile: Vec<String>,
    pub proposal: Vec<String>,
}

impl Default for SectionRegistry {
    fn default() -> Self {
        SectionRegistry {
            profile: PROFILE_SECTIONS.iter().map(|s| s.to_string()).collect(),
            proposal: PROPOSAL_SECTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl SectionRegistry {
    /// Ordered section labels for a document kind.
    pub fn sections(&self, kind: DocumentKind) -> &[String] {
        match kind {
            DocumentKind::Profile => &self.profile,
            DocumentKind::Proposal => &self.proposal,
        }
    }
}

/// One sectioned document. `sections` holds exactly one entry per registered
/// label for the document's kind (possibly empty text).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub kind: DocumentKind,
    pub category: String,
    pub language: String,
    pub sections: BTreeMap<String, String>,
}

impl Document {
    /// Text of one section; empty string if absent.
    pub fn section_text(&self, label: &str) -> &str {
        self.sections.get(label).map(String::as_str).unwrap_or("")
    }
}

/// Outcome of a past proposal/freelancer contact.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
}

/// A labelled, timestamped project/freelancer interaction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Interaction {
    pub project_id: String,
    pub freelancer_id: String,
    pub label: Label,
    pub ts: i64,
}

/// An immutable corpus: documents indexed by id plus interaction history.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub registry: SectionRegistry,
    pub documents: BTreeMap<String, Document>,
    pub interactions: Vec<Interaction>,
}

impl Corpus {
    /// Empty corpus with the default section registry.
    pub fn empty() -> Self {
        Corpus {
            registry: SectionRegistry::default(),
            documents: BTreeMap::new(),
            interactions: Vec::new(),
        }
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.get(id)
    }

    pub fn profiles(&self) -> impl Iterator<Item = &Document> {
        self.documents.values().filter(|d| d.kind == DocumentKind::Profile)
    }

    pub fn proposals(&self) -> impl Iterator<Item = &Document> {
        self.documents.values().filter(|d| d.kind == DocumentKind::Proposal)
    }

    /// Validates a document against the registry and normalizes it: unknown
    /// sections are rejected, missing registered sections become empty text.
    pub(crate) fn normalize_document(&self, mut doc: Document, line: usize) -> Result<Document, CorpusError> {
        let allowed = self.registry.sections(doc.kind);
        for label in doc.sections.keys() {
            if !allowed.iter().any(|a| a == label) {
                return Err(CorpusError::UnknownSection {
                    line,
                    id: doc.id,
                    label: label.clone(),
                });
            }
        }
        for label in allowed {
            doc.sections.entry(label.clone()).or_default();
        }
        if doc.kind == DocumentKind::Profile && doc.category.is_empty() {
            return Err(CorpusError::EmptyCategory(doc.id));
        }
        Ok(doc)
    }

    /// Inserts a document, rejecting duplicate ids.
    pub(crate) fn insert_document(&mut self, doc: Document) -> Result<(), CorpusError> {
        if self.documents.contains_key(&doc.id) {
            return Err(CorpusError::DuplicateDocument(doc.id));
        }
        self.documents.insert(doc.id.clone(), doc);
        Ok(())
    }

    /// Checks that an interaction references an existing proposal and an
    /// existing profile.
    pub(crate) fn check_reference(&self, it: &Interaction) -> Result<(), CorpusError> {
        let bad = |detail: String| CorpusError::BadReference {
            project_id: it.project_id.clone(),
            freelancer_id: it.freelancer_id.clone(),
            detail,
        };
        match self.documents.get(&it.project_id) {
            None => return Err(bad(format!("unknown project document \"{}\"", it.project_id))),
            Some(d) if d.kind != DocumentKind::Proposal => {
                return Err(bad(format!("document \"{}\" is not a proposal", it.project_id)))
            }
            _ => {}
        }
        match self.documents.get(&it.freelancer_id) {
            None => return Err(bad(format!("unknown freelancer document \"{}\"", it.freelancer_id))),
            Some(d) if d.kind != DocumentKind::Profile => {
                return Err(bad(format!("document \"{}\" is not a profile", it.freelancer_id)))
            }
            _ => {}
        }
        Ok(())
    }

    /// Collapses duplicate (project, freelancer) interactions, keeping the
    /// latest by timestamp; on equal timestamps the later record wins.
    pub(crate) fn dedup_interactions(&mut self) {
        let mut chosen: BTreeMap<(String, String), Interaction> = BTreeMap::new();
        let mut order: Vec<(String, String)> = Vec::new();
        for it in self.interactions.drain(..) {
            let key = (it.project_id.clone(), it.freelancer_id.clone());
            match chosen.get_mut(&key) {
                Some(cur) => {
                    if it.ts >= cur.ts {
                        *cur = it;
                    }
                }
                None => {
                    order.push(key.clone());
                    chosen.insert(key, it);
                }
            }
        }
        self.interactions = order.into_iter().map(|k| chosen.remove(&k).expect("recorded key")).collect();
    }
}
