//! Line-delimited JSON corpus files.
//!
//! The first line is a header declaring the schema version and the section
//! registry; every further line is either a document or an interaction
//! record.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusError, Document, Interaction, SectionRegistry};

const SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    profile_sections: Vec<String>,
    proposal_sections: Vec<String>,
}

/// Loads a corpus file, validating sections, document references, and
/// collapsing duplicate interactions (latest record wins).
pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();

    let header_line = loop {
        match lines.next() {
            None => return Err(CorpusError::MissingHeader),
            Some(line) => {
                let line = line?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|_| CorpusError::MissingHeader)?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(CorpusError::UnsupportedVersion(header.schema_version));
    }

    let mut corpus = Corpus {
        registry: SectionRegistry {
            profile: header.profile_sections,
            proposal: header.proposal_sections,
        },
        documents: Default::default(),
        interactions: Vec::new(),
    };

    let mut pending: Vec<Interaction> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2; // 1-based, after the header
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
            line: line_no,
            detail: e.to_string(),
        })?;
        if value.get("id").is_some() {
            let doc: Document = serde_json::from_value(value).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                detail: format!("document record: {e}"),
            })?;
            let doc = corpus.normalize_document(doc, line_no)?;
            corpus.insert_document(doc)?;
        } else if value.get("project_id").is_some() {
            let it: Interaction = serde_json::from_value(value).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                detail: format!("interaction record: {e}"),
            })?;
            pending.push(it);
        } else {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                detail: "record is neither a document (\"id\") nor an interaction (\"project_id\")".to_string(),
            });
        }
    }

    for it in &pending {
        corpus.check_reference(it)?;
    }
    corpus.interactions = pending;
    corpus.dedup_interactions();
    Ok(corpus)
}

/// Writes a corpus as line-delimited JSON: header, documents in id order,
/// then interactions. Byte-deterministic for a given corpus.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = Header {
        schema_version: SCHEMA_VERSION,
        profile_sections: corpus.registry.profile.clone(),
        proposal_sections: corpus.registry.proposal.clone(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for doc in corpus.documents.values() {
        writeln!(w, "{}", serde_json::to_string(doc).expect("document serializes"))?;
    }
    for it in &corpus.interactions {
        writeln!(w, "{}", serde_json::to_string(it).expect("interaction serializes"))?;
    }
    w.flush()?;
    Ok(())
}
