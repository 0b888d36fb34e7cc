//! Temporal train/validation/test splitting.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corpus, CorpusError, Interaction};

/// A partition of a corpus's interactions. Everything at or after the cutoff
/// timestamp is test; the rest is shuffled deterministically into train and
/// validation.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub train: Vec<Interaction>,
    pub validation: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

impl CorpusSplit {
    /// Ids of all documents referenced by a set of interactions.
    pub fn referenced_document_ids(interactions: &[Interaction]) -> BTreeSet<String> {
        let mut ids = BTreeSet::new();
        for it in interactions {
            ids.insert(it.project_id.clone());
            ids.insert(it.freelancer_id.clone());
        }
        ids
    }
}

/// Splits interactions temporally at `cutoff`, then shuffles the pre-cutoff
/// remainder with `seed` and takes `round(n · val_ratio)` for validation.
pub fn temporal_split(corpus: &Corpus, cutoff: i64, val_ratio: f64, seed: u64) -> Result<CorpusSplit, CorpusError> {
    if !(val_ratio > 0.0 && val_ratio < 1.0) {
        return Err(CorpusError::BadValidationRatio(val_ratio));
    }
    let mut pre: Vec<Interaction> = Vec::new();
    let mut test: Vec<Interaction> = Vec::new();
    for it in &corpus.interactions {
        if it.ts >= cutoff {
            test.push(it.clone());
        } else {
            pre.push(it.clone());
        }
    }
    if test.is_empty() {
        return Err(CorpusError::EmptySplit("test"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pre.shuffle(&mut rng);
    let n_val = (pre.len() as f64 * val_ratio).round() as usize;
    if pre.len() - n_val == 0 {
        return Err(CorpusError::EmptySplit("train"));
    }
    let train = pre.split_off(n_val);
    Ok(CorpusSplit {
        train,
        validation: pre,
        test,
    })
}
