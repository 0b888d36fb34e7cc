//! Offline quality metrics for trained towers over a held-out split.
//!
//! Three complementary views, mirroring how the matching system is used:
//!
//! * **Interaction recall** — using only historical interactions: the
//!   fraction of positives that beat every negative (`recall_single`) and
//!   the mean-positive vs mean-negative decision (`recall_all`).
//! * **Retrieval overlap** — a k-NN retrieval is simulated over *all*
//!   freelancers in the split, and lexical overlap between the proposal's
//!   category/skills terms and the retrieved profiles' terms is averaged.
//! * **Retrieved fractions** — combining both: how many of the interacted
//!   positives (and negatives) surface in the top retrieved set.
//!
//! Projects lacking the inputs a metric needs (no negatives, empty term
//! set) are excluded from that metric's mean rather than zero-filled; every
//! reported mean carries its support count. Reports aggregate overall and
//! per proposal language.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Document, DocumentKind, Interaction, Label};
use crate::index::{FilterPredicate, IndexError, IndexParams, IndexedVector, Metric, QueryMode, VectorIndex};

/// Errors produced while assembling an evaluation run.
#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation needs at least one freelancer")]
    NoFreelancers,
    #[error("dimension mismatch: expected {expected}, got {got} for {id:?}")]
    DimensionMismatch { expected: usize, got: usize, id: String },
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Index(#[from] IndexError),
}

/// How a proposal-profile pair is scored: a similarity (higher is better)
/// or a distance (lower is better). Matches the training objective: cosine
/// scores for softmax-trained towers, Euclidean distances for margin-trained
/// ones.
#[derive(Clone, Copy, Debug, Default, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Score,
    Distance,
}

impl ScoreMode {
    /// Index metric implementing this mode.
    pub fn metric(self) -> Metric {
        match self {
            ScoreMode::Score => Metric::Cosine,
            ScoreMode::Distance => Metric::Euclidean,
        }
    }

    /// True when `a` is a strictly better value than `b` under this mode.
    fn strictly_better(self, a: f64, b: f64) -> bool {
        match self {
            ScoreMode::Score => a > b,
            ScoreMode::Distance => a < b,
        }
    }
}

/// One document prepared for evaluation: its embedding plus the lexical
/// term sets the overlap metrics compare.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub vector: Vec<f32>,
    pub category: String,
    pub skills: BTreeSet<String>,
    pub language: String,
}

impl EvalItem {
    /// Extracts the term sets from a corpus document: the declared category,
    /// and the whitespace-split words of the skill sections (`skills` for
    /// profiles; `mandatory_skills` + `bonus_skills` for proposals).
    pub fn from_document(doc: &Document, vector: Vec<f32>) -> Self {
        let sections: &[&str] = match doc.kind {
            DocumentKind::Profile => &["skills"],
            DocumentKind::Proposal => &["mandatory_skills", "bonus_skills"],
        };
        let mut skills = BTreeSet::new();
        for s in sections {
            skills.extend(doc.section_text(s).split_whitespace().map(str::to_string));
        }
        Self {
            id: doc.id.clone(),
            vector,
            category: doc.category.clone(),
            skills,
            language: doc.language.clone(),
        }
    }
}

/// Evaluation knobs. Defaults follow the reporting layout: overlaps at
/// k ∈ {10, 100}, retrieved fractions at k = 100, exact retrieval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mode: ScoreMode,
    pub overlap_ks: Vec<usize>,
    pub retrieval_k: usize,
    /// Use the approximate graph search instead of the exact scan for the
    /// simulated retrieval.
    pub approximate: bool,
    /// Index build parameters (metric is overridden by `mode`).
    pub index: IndexParams,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: ScoreMode::Score,
            overlap_ks: vec![10, 100],
            retrieval_k: 100,
            approximate: false,
            index: IndexParams::default(),
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<(), EvalError> {
        if self.overlap_ks.is_empty() || self.overlap_ks.contains(&0) {
            return Err(EvalError::BadConfig("overlap_ks must be nonempty positive".into()));
        }
        if self.retrieval_k == 0 {
            return Err(EvalError::BadConfig("retrieval_k must be at least 1".into()));
        }
        Ok(())
    }
}

/// A mean over the projects that qualified for a metric, with the count of
/// qualifying projects. `mean` is `None` when nothing qualified.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub mean: Option<f64>,
    pub support: usize,
}

/// All metric means for one group of projects.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    /// Number of projects in the group.
    pub projects: usize,
    pub recall_single: MetricValue,
    pub recall_all: MetricValue,
    /// Keyed by k.
    pub category_overlap: BTreeMap<usize, MetricValue>,
    /// Keyed by k.
    pub skills_overlap: BTreeMap<usize, MetricValue>,
    pub retrieved_positives: MetricValue,
    pub retrieved_negatives: MetricValue,
}

/// The full evaluation output: corpus-level means plus a per-language
/// breakdown of the same block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ScoreMode,
    pub overlap_ks: Vec<usize>,
    pub retrieval_k: usize,
    pub overall: MetricBlock,
    pub by_language: BTreeMap<String, MetricBlock>,
}

/// Fraction of positives whose score strictly beats every negative's.
/// `None` when either side is empty (the project is excluded).
pub fn recall_single_from_scores(pos: &[f64], neg: &[f64], mode: ScoreMode) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let wins = pos.iter().filter(|&&p| neg.iter().all(|&n| mode.strictly_better(p, n))).count();
    Some(wins as f64 / pos.len() as f64)
}

/// 1 when the mean positive score strictly beats the mean negative score,
/// else 0. `None` when either side is empty.
pub fn recall_all_from_scores(pos: &[f64], neg: &[f64], mode: ScoreMode) -> Option<f64> {
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mp = pos.iter().sum::<f64>() / pos.len() as f64;
    let mn = neg.iter().sum::<f64>() / neg.len() as f64;
    Some(if mode.strictly_better(mp, mn) { 1.0 } else { 0.0 })
}

/// Proposal-profile score under `mode`, computed in f64: cosine similarity,
/// or squared Euclidean distance. The squared form orders pairs identically
/// to the true distance, and on unit-norm embeddings satisfies
/// ‖a−b‖² = 2 − 2·cos(a,b) exactly, so mean-level comparisons
/// ([`recall_all_from_scores`]) mirror the cosine ones too.
pub fn pair_score(a: &[f32], b: &[f32], mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Score => {
            let na = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            let nb = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if na * nb > 0.0 {
                a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() / (na * nb)
            } else {
                0.0
            }
        }
        ScoreMode::Distance => a
            .iter()
            .zip(b)
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>(),
    }
}

/// Embedding-level [`recall_single_from_scores`].
pub fn recall_single(project: &[f32], positives: &[Vec<f32>], negatives: &[Vec<f32>], mode: ScoreMode) -> Option<f64> {
    let pos: Vec<f64> = positives.iter().map(|f| pair_score(project, f, mode)).collect();
    let neg: Vec<f64> = negatives.iter().map(|f| pair_score(project, f, mode)).collect();
    recall_single_from_scores(&pos, &neg, mode)
}

/// Embedding-level [`recall_all_from_scores`].
pub fn recall_all(project: &[f32], positives: &[Vec<f32>], negatives: &[Vec<f32>], mode: ScoreMode) -> Option<f64> {
    let pos: Vec<f64> = positives.iter().map(|f| pair_score(project, f, mode)).collect();
    let neg: Vec<f64> = negatives.iter().map(|f| pair_score(project, f, mode)).collect();
    recall_all_from_scores(&pos, &neg, mode)
}

/// Mean fractional term overlap between the project's term set and each
/// retrieved profile's: mean over `retrieved` of |A_p ∩ A_f| / |A_p|.
/// `None` when the project's set or the retrieved list is empty.
pub fn a_overlap<'a, I>(project_terms: &BTreeSet<String>, retrieved: I) -> Option<f64>
where
    I: IntoIterator<Item = &'a BTreeSet<String>>,
{
    if project_terms.is_empty() {
        return None;
    }
    let mut n = 0usize;
    let mut sum = 0.0f64;
    for terms in retrieved {
        sum += project_terms.intersection(terms).count() as f64 / project_terms.len() as f64;
        n += 1;
    }
    if n == 0 {
        None
    } else {
        Some(sum / n as f64)
    }
}

/// |retrieved ∩ reference| / |reference|; `None` when the reference set is
/// empty.
pub fn retrieved_fraction(retrieved: &BTreeSet<String>, reference: &BTreeSet<String>) -> Option<f64> {
    if reference.is_empty() {
        return None;
    }
    let hit = reference.iter().filter(|id| retrieved.contains(*id)).count();
    Some(hit as f64 / reference.len() as f64)
}

/// Running (sum, support) pair for one metric.
#[derive(Clone, Copy, Default)]
struct Accumulator {
    sum: f64,
    support: usize,
}

impl Accumulator {
    fn push(&mut self, value: Option<f64>) {
        if let Some(v) = value {
            self.sum += v;
            self.support += 1;
        }
    }

    fn finish(self) -> MetricValue {
        MetricValue {
            mean: if self.support > 0 { Some(self.sum / self.support as f64) } else { None },
            support: self.support,
        }
    }
}

#[derive(Clone, Default)]
struct BlockAccumulator {
    projects: usize,
    recall_single: Accumulator,
    recall_all: Accumulator,
    category_overlap: BTreeMap<usize, Accumulator>,
    skills_overlap: BTreeMap<usize, Accumulator>,
    retrieved_positives: Accumulator,
    retrieved_negatives: Accumulator,
}

impl BlockAccumulator {
    fn finish(self) -> MetricBlock {
        MetricBlock {
            projects: self.projects,
            recall_single: self.recall_single.finish(),
            recall_all: self.recall_all.finish(),
            category_overlap: self.category_overlap.into_iter().map(|(k, a)| (k, a.finish())).collect(),
            skills_overlap: self.skills_overlap.into_iter().map(|(k, a)| (k, a.finish())).collect(),
            retrieved_positives: self.retrieved_positives.finish(),
            retrieved_negatives: self.retrieved_negatives.finish(),
        }
    }
}

/// Per-project metric values, before aggregation.
struct ProjectMetrics {
    language: String,
    recall_single: Option<f64>,
    recall_all: Option<f64>,
    category_overlap: BTreeMap<usize, Option<f64>>,
    skills_overlap: BTreeMap<usize, Option<f64>>,
    retrieved_positives: Option<f64>,
    retrieved_negatives: Option<f64>,
}

/// Runs the full evaluation: interaction recalls from `interactions`,
/// simulated retrieval over all `freelancers`, overlap and retrieved
/// fractions from the combination. Aggregates overall and per proposal
/// language.
pub fn evaluate(
    projects: &[EvalItem],
    freelancers: &[EvalItem],
    interactions: &[Interaction],
    config: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    config.validate()?;
    if freelancers.is_empty() {
        return Err(EvalError::NoFreelancers);
    }
    let dim = freelancers[0].vector.len();
    for item in freelancers.iter().chain(projects) {
        if item.vector.len() != dim {
            return Err(EvalError::DimensionMismatch {
                expected: dim,
                got: item.vector.len(),
                id: item.id.clone(),
            });
        }
    }

    let indexed: Vec<IndexedVector> = freelancers
        .iter()
        .map(|f| {
            let mut tags = BTreeMap::new();
            tags.insert("category".to_string(), f.category.clone());
            tags.insert("language".to_string(), f.language.clone());
            IndexedVector { doc_id: f.id.clone(), vector: f.vector.clone(), tags }
        })
        .collect();
    let params = IndexParams { metric: config.mode.metric(), ..config.index.clone() };
    let index = VectorIndex::build(indexed, params)?;
    let query_mode = if config.approximate { QueryMode::Approximate } else { QueryMode::Exact };

    let by_id: BTreeMap<&str, &EvalItem> = freelancers.iter().map(|f| (f.id.as_str(), f)).collect();
    let mut per_project: BTreeMap<&str, (Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for it in interactions {
        if let Some(f) = by_id.get(it.freelancer_id.as_str()) {
            let entry = per_project.entry(it.project_id.as_str()).or_default();
            match it.label {
                Label::Positive => entry.0.push(&f.id),
                Label::Negative => entry.1.push(&f.id),
            }
        }
    }

    let k_max = config.retrieval_k.max(*config.overlap_ks.iter().max().expect("validated nonempty"));

    let mut overall = BlockAccumulator::default();
    let mut by_language: BTreeMap<String, BlockAccumulator> = BTreeMap::new();
    for project in projects {
        let metrics = project_metrics(project, &index, &by_id, &per_project, config, query_mode, k_max)?;
        for block in [&mut overall, by_language.entry(metrics.language.clone()).or_default()] {
            block.projects += 1;
            block.recall_single.push(metrics.recall_single);
            block.recall_all.push(metrics.recall_all);
            for (&k, &v) in &metrics.category_overlap {
                block.category_overlap.entry(k).or_default().push(v);
            }
            for (&k, &v) in &metrics.skills_overlap {
                block.skills_overlap.entry(k).or_default().push(v);
            }
            block.retrieved_positives.push(metrics.retrieved_positives);
            block.retrieved_negatives.push(metrics.retrieved_negatives);
        }
    }

    Ok(EvalReport {
        mode: config.mode,
        overlap_ks: config.overlap_ks.clone(),
        retrieval_k: config.retrieval_k,
        overall: overall.finish(),
        by_language: by_language.into_iter().map(|(l, b)| (l, b.finish())).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn project_metrics(
    project: &EvalItem,
    index: &VectorIndex,
    by_id: &BTreeMap<&str, &EvalItem>,
    per_project: &BTreeMap<&str, (Vec<&str>, Vec<&str>)>,
    config: &EvalConfig,
    query_mode: QueryMode,
    k_max: usize,
) -> Result<ProjectMetrics, EvalError> {
    let empty = (Vec::new(), Vec::new());
    let (pos_ids, neg_ids) = per_project.get(project.id.as_str()).unwrap_or(&empty);
    let pos_scores: Vec<f64> =
        pos_ids.iter().map(|id| pair_score(&project.vector, &by_id[id].vector, config.mode)).collect();
    let neg_scores: Vec<f64> =
        neg_ids.iter().map(|id| pair_score(&project.vector, &by_id[id].vector, config.mode)).collect();

    let retrieved = index.knn(&project.vector, k_max, &FilterPredicate::all(), query_mode)?;
    let retrieved_items: Vec<&EvalItem> =
        retrieved.iter().map(|n| by_id[n.doc_id.as_str()]).collect();

    let project_category: BTreeSet<String> = if project.category.is_empty() {
        BTreeSet::new()
    } else {
        BTreeSet::from([project.category.clone()])
    };
    let mut category_overlap = BTreeMap::new();
    let mut skills_overlap = BTreeMap::new();
    for &k in &config.overlap_ks {
        let top = &retrieved_items[..k.min(retrieved_items.len())];
        let cat_sets: Vec<BTreeSet<String>> = top
            .iter()
            .map(|f| {
                if f.category.is_empty() {
                    BTreeSet::new()
                } else {
                    BTreeSet::from([f.category.clone()])
                }
            })
            .collect();
        category_overlap.insert(k, a_overlap(&project_category, cat_sets.iter()));
        skills_overlap.insert(k, a_overlap(&project.skills, top.iter().map(|f| &f.skills)));
    }

    let top_ids: BTreeSet<String> = retrieved
        .iter()
        .take(config.retrieval_k)
        .map(|n| n.doc_id.clone())
        .collect();
    let pos_set: BTreeSet<String> = pos_ids.iter().map(|s| s.to_string()).collect();
    let neg_set: BTreeSet<String> = neg_ids.iter().map(|s| s.to_string()).collect();

    Ok(ProjectMetrics {
        language: project.language.clone(),
        recall_single: recall_single_from_scores(&pos_scores, &neg_scores, config.mode),
        recall_all: recall_all_from_scores(&pos_scores, &neg_scores, config.mode),
        category_overlap,
        skills_overlap,
        retrieved_positives: retrieved_fraction(&top_ids, &pos_set),
        retrieved_negatives: retrieved_fraction(&top_ids, &neg_set),
    })
}

fn fmt_metric(v: &MetricValue) -> String {
    match v.mean {
        Some(m) => format!("{m:.3} ({})", v.support),
        None => format!("-     ({})", v.support),
    }
}

impl EvalReport {
    /// Renders the report as an aligned text table: one row per group
    /// (overall first, then each language), one column per metric, support
    /// counts in parentheses.
    pub fn to_table(&self) -> String {
        let mut header: Vec<String> =
            vec!["group".into(), "projects".into(), "recall_single".into(), "recall_all".into()];
        for k in &self.overlap_ks {
            header.push(format!("cat@{k}"));
        }
        for k in &self.overlap_ks {
            header.push(format!("skills@{k}"));
        }
        header.push(format!("pos@{}", self.retrieval_k));
        header.push(format!("neg@{}", self.retrieval_k));

        let row = |name: &str, b: &MetricBlock| -> Vec<String> {
            let mut cells = vec![name.to_string(), b.projects.to_string()];
            cells.push(fmt_metric(&b.recall_single));
            cells.push(fmt_metric(&b.recall_all));
            for k in &self.overlap_ks {
                cells.push(fmt_metric(b.category_overlap.get(k).unwrap_or(&MetricValue::default())));
            }
            for k in &self.overlap_ks {
                cells.push(fmt_metric(b.skills_overlap.get(k).unwrap_or(&MetricValue::default())));
            }
            cells.push(fmt_metric(&b.retrieved_positives));
            cells.push(fmt_metric(&b.retrieved_negatives));
            cells
        };

        let mut rows = vec![header, row("overall", &self.overall)];
        for (language, block) in &self.by_language {
            rows.push(row(language, block));
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> =
                r.iter().zip(&widths).map(|(cell, w)| format!("{cell:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
