//! Training loop for the two towers: batch assembly from interaction splits,
//! adjacency construction, dual contrastive losses, SGD/Adam updates over
//! tower parameters only, per-epoch validation with best-epoch selection,
//! and checkpoint round-tripping.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adjacency::{
    add_weak_negatives, build_interaction_adjacency, transitive_freelancer_adjacency, AdjacencyError, SignedAdjacency,
};
use crate::backbone::Backbone;
use crate::corpus::{Corpus, Document, DocumentKind, Interaction, Label, SectionRegistry, Tokenizer};
use crate::encoder::{encode_document_on_tape, EncoderConfig, EncoderError, TowerKind, TowerParams, TowerVars};
use crate::losses::{
    dual_a_info_nce_on_tape, dual_a_triplets_on_tape, DualLoss, LossError, DEFAULT_MARGIN, DEFAULT_TEMPERATURE,
};
use crate::numerics::{NumericsError, Tape, Tensor, VarId};

/// Errors from training and checkpointing.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    BadConfig(String),
    #[error("need {needed} eligible projects (≥{min_pos} positives, ≥{min_neg} negatives each), found {found}")]
    NoEligibleProjects { needed: usize, found: usize, min_pos: usize, min_neg: usize },
    #[error(
        "non-finite loss at step {step} (epoch {epoch}); batch projects {project_ids:?}, freelancers {freelancer_ids:?}"
    )]
    NonFiniteLoss { step: usize, epoch: usize, project_ids: Vec<String>, freelancer_ids: Vec<String> },
    #[error("document {0} referenced by an interaction is missing from the corpus")]
    MissingDocument(String),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Adjacency(#[from] AdjacencyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which dual loss drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    DualATriplets,
    DualAInfoNce,
}

/// Gradient-descent rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerKind {
    pub fn adam_default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Full training recipe. The two presets mirror the published regimes; every
/// field can be overridden.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub epochs: usize,
    pub learning_rate: f32,
    pub optimizer: OptimizerKind,
    pub temperature: f32,
    pub margin: f32,
    pub batch_projects: usize,
    pub positives_per_project: usize,
    pub negatives_per_project: usize,
    pub weak_negatives_per_batch: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Margin-based regime: ten epochs, two projects per batch, two
    /// positives and one negative per project.
    pub fn triplet_preset() -> Self {
        TrainConfig {
            loss_kind: LossKind::DualATriplets,
            epochs: 10,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::adam_default(),
            temperature: DEFAULT_TEMPERATURE,
            margin: DEFAULT_MARGIN,
            batch_projects: 2,
            positives_per_project: 2,
            negatives_per_project: 1,
            weak_negatives_per_batch: 30,
            seed: 0,
        }
    }

    /// Temperature-based regime: two epochs, one project per batch, thirty
    /// weak negatives added to each batch.
    pub fn info_nce_preset() -> Self {
        TrainConfig {
            loss_kind: LossKind::DualAInfoNce,
            epochs: 2,
            batch_projects: 1,
            ..TrainConfig::triplet_preset()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::BadConfig(msg));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive and finite, got {}", self.learning_rate));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive and finite, got {}", self.temperature));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return bad(format!("margin must be non-negative and finite, got {}", self.margin));
        }
        if self.batch_projects == 0 {
            return bad("batch_projects must be at least 1".into());
        }
        if self.positives_per_project == 0 {
            return bad("positives_per_project must be at least 1".into());
        }
        if self.negatives_per_project == 0 {
            return bad("negatives_per_project must be at least 1".into());
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            // `!(eps > 0.0)` rather than `eps <= 0.0`: the negation also rejects NaN.
            #[allow(clippy::neg_cmp_op_on_partial_ord)]
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return bad(format!("adam parameters out of range: beta1={beta1} beta2={beta2} eps={eps}"));
            }
        }
        Ok(())
    }
}

/// One sampled training batch: the documents to encode plus the signed
/// relation matrices the loss reads. `a_pf` covers exactly the sampled
/// interactions; `a_ff` is the transitive freelancer matrix (with weak
/// negatives added in the temperature regime).
#[derive(Clone, Debug)]
pub struct Batch {
    pub projects: Vec<Document>,
    pub freelancers: Vec<Document>,
    pub a_pf: SignedAdjacency,
    pub a_ff: SignedAdjacency,
}

impl Batch {
    pub fn project_ids(&self) -> Vec<String> {
        self.projects.iter().map(|d| d.id.clone()).collect()
    }

    pub fn freelancer_ids(&self) -> Vec<String> {
        self.freelancers.iter().map(|d| d.id.clone()).collect()
    }
}

/// Per-project positive/negative freelancer pools drawn from one
/// interaction list, in first-appearance order.
fn project_pools(interactions: &[Interaction]) -> BTreeMap<String, (Vec<String>, Vec<String>)> {
    let mut pools: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
    for it in interactions {
        let entry = pools.entry(it.project_id.clone()).or_default();
        let side = match it.label {
            Label::Positive => &mut entry.0,
            Label::Negative => &mut entry.1,
        };
        if !side.contains(&it.freelancer_id) {
            side.push(it.freelancer_id.clone());
        }
    }
    pools
}

/// Projects with enough positives and negatives to fill a batch slot.
pub fn eligible_projects(interactions: &[Interaction], min_positives: usize, min_negatives: usize) -> Vec<String> {
    project_pools(interactions)
        .into_iter()
        .filter(|(_, (pos, neg))| pos.len() >= min_positives && neg.len() >= min_negatives)
        .map(|(id, _)| id)
        .collect()
}

fn require_document(corpus: &Corpus, id: &str) -> Result<Document, TrainError> {
    corpus.document(id).cloned().ok_or_else(|| TrainError::MissingDocument(id.to_string()))
}

fn push_unique(freelancers: &mut Vec<Document>, seen: &mut BTreeSet<String>, doc: Document) {
    if seen.insert(doc.id.clone()) {
        freelancers.push(doc);
    }
}

struct SampledCore {
    projects: Vec<Document>,
    freelancers: Vec<Document>,
    sampled: Vec<Interaction>,
}

/// Shared sampling core: `batch_projects` eligible projects, each with
/// `positives_per_project` positives and `negatives_per_project` negatives
/// drawn without replacement, independently per project.
fn sample_core(
    corpus: &Corpus,
    interactions: &[Interaction],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SampledCore, TrainError> {
    let pools = project_pools(interactions);
    let eligible: Vec<&String> = pools
        .iter()
        .filter(|(_, (pos, neg))| pos.len() >= config.positives_per_project && neg.len() >= config.negatives_per_project)
        .map(|(id, _)| id)
        .collect();
    if eligible.len() < config.batch_projects {
        return Err(TrainError::NoEligibleProjects {
            needed: config.batch_projects,
            found: eligible.len(),
            min_pos: config.positives_per_project,
            min_neg: config.negatives_per_project,
        });
    }
    let chosen: Vec<String> =
        eligible.choose_multiple(rng, config.batch_projects).map(|id| (*id).clone()).collect();
    let mut projects = Vec::with_capacity(chosen.len());
    let mut freelancers = Vec::new();
    let mut seen = BTreeSet::new();
    let mut sampled = Vec::new();
    for project_id in &chosen {
        let (pos_pool, neg_pool) = &pools[project_id];
        let positives: Vec<String> =
            pos_pool.choose_multiple(rng, config.positives_per_project).cloned().collect();
        let negatives: Vec<String> =
            neg_pool.choose_multiple(rng, config.negatives_per_project).cloned().collect();
        projects.push(require_document(corpus, project_id)?);
        for fid in positives.iter().chain(&negatives) {
            push_unique(&mut freelancers, &mut seen, require_document(corpus, fid)?);
        }
        for (list, label) in [(&positives, Label::Positive), (&negatives, Label::Negative)] {
            for fid in list.iter() {
                sampled.push(Interaction {
                    project_id: project_id.clone(),
                    freelancer_id: fid.clone(),
                    label,
                    ts: 0,
                });
            }
        }
    }
    Ok(SampledCore { projects, freelancers, sampled })
}

fn batch_adjacency(core: &SampledCore) -> (SignedAdjacency, SignedAdjacency) {
    let project_ids: Vec<String> = core.projects.iter().map(|d| d.id.clone()).collect();
    let freelancer_ids: Vec<String> = core.freelancers.iter().map(|d| d.id.clone()).collect();
    let a_pf = build_interaction_adjacency(&core.sampled, &project_ids, &freelancer_ids);
    let a_ff = transitive_freelancer_adjacency(&a_pf);
    (a_pf, a_ff)
}

/// Batch for the margin regime: sampled projects and freelancers with the
/// interaction and transitive matrices, no weak negatives.
pub fn sample_triplet_batch(
    corpus: &Corpus,
    interactions: &[Interaction],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, TrainError> {
    let core = sample_core(corpus, interactions, config, rng)?;
    let (a_pf, a_ff) = batch_adjacency(&core);
    Ok(Batch { projects: core.projects, freelancers: core.freelancers, a_pf, a_ff })
}

/// Batch for the temperature regime: the sampled core plus
/// `weak_negatives_per_batch` freelancers drawn uniformly from profiles
/// whose category differs from every sampled positive's category. The
/// freelancer matrix gains weak negative entries for all differing-category
/// pairs. A short candidate pool is taken whole, with a warning.
pub fn sample_infonce_batch(
    corpus: &Corpus,
    interactions: &[Interaction],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, TrainError> {
    let mut core = sample_core(corpus, interactions, config, rng)?;
    let positive_categories: BTreeSet<String> = core
        .sampled
        .iter()
        .filter(|it| it.label == Label::Positive)
        .filter_map(|it| core.freelancers.iter().find(|d| d.id == it.freelancer_id))
        .map(|d| d.category.clone())
        .collect();
    let in_batch: BTreeSet<String> = core.freelancers.iter().map(|d| d.id.clone()).collect();
    let pool: Vec<&Document> = corpus
        .profiles()
        .filter(|d| !in_batch.contains(&d.id) && !positive_categories.contains(&d.category))
        .collect();
    let take = config.weak_negatives_per_batch.min(pool.len());
    if take < config.weak_negatives_per_batch {
        log::warn!(
            "weak-negative pool has only {} candidates of differing category; taking all (wanted {})",
            pool.len(),
            config.weak_negatives_per_batch
        );
    }
    let mut seen = in_batch;
    for doc in pool.choose_multiple(rng, take) {
        push_unique(&mut core.freelancers, &mut seen, (*doc).clone());
    }
    let (a_pf, a_ff) = batch_adjacency(&core);
    let categories: BTreeMap<String, String> =
        core.freelancers.iter().map(|d| (d.id.clone(), d.category.clone())).collect();
    let a_ff = add_weak_negatives(&a_ff, &categories)?;
    Ok(Batch { projects: core.projects, freelancers: core.freelancers, a_pf, a_ff })
}

/// One history record per optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub project_term: Option<f64>,
    pub freelancer_term: Option<f64>,
}

/// Writes history as CSV with columns step, epoch, loss, loss_pf, loss_ff.
/// Dropped terms leave their field empty.
pub fn write_history_csv<W: Write>(mut w: W, rows: &[HistoryRow]) -> std::io::Result<()> {
    writeln!(w, "step,epoch,loss,loss_pf,loss_ff")?;
    let fmt = |t: Option<f64>| t.map(|v| format!("{v}")).unwrap_or_default();
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.step, r.epoch, r.loss, fmt(r.project_term), fmt(r.freelancer_term))?;
    }
    Ok(())
}

/// Everything `train` returns: final towers, the best-validation towers,
/// step history, and per-epoch validation losses.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub freelancer: TowerParams,
    pub project: TowerParams,
    /// Towers from the epoch with the lowest validation loss (the final
    /// towers when no validation batch was available).
    pub best_freelancer: TowerParams,
    pub best_project: TowerParams,
    pub best_epoch: usize,
    pub history: Vec<HistoryRow>,
    pub validation: Vec<Option<f64>>,
}

struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f32,
    step: usize,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, learning_rate: f32, sizes: &[usize]) -> Self {
        Optimizer {
            kind,
            learning_rate,
            step: 0,
            first_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Applies one update. `grads[i]` may be `None` (parameter untouched by
    /// this step's loss), which is treated as an all-zero gradient.
    fn apply(&mut self, params: &mut [&mut Tensor], grads: &[Option<&Tensor>]) {
        self.step += 1;
        let lr = self.learning_rate as f64;
        for (slot, param) in params.iter_mut().enumerate() {
            let data = param.data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    if let Some(g) = grads[slot] {
                        for (p, &gv) in data.iter_mut().zip(g.data()) {
                            *p = (*p as f64 - lr * gv as f64) as f32;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2, eps) = (beta1 as f64, beta2 as f64, eps as f64);
                    let bias1 = 1.0 - b1.powi(self.step as i32);
                    let bias2 = 1.0 - b2.powi(self.step as i32);
                    let m = &mut self.first_moment[slot];
                    let v = &mut self.second_moment[slot];
                    for i in 0..data.len() {
                        let g = grads[slot].map_or(0.0, |g| g.data()[i] as f64);
                        let mi = b1 * m[i] as f64 + (1.0 - b1) * g;
                        let vi = b2 * v[i] as f64 + (1.0 - b2) * g * g;
                        m[i] = mi as f32;
                        v[i] = vi as f32;
                        let update = lr * (mi / bias1) / ((vi / bias2).sqrt() + eps);
                        data[i] = (data[i] as f64 - update) as f32;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn encode_batch_rows(
    tape: &mut Tape,
    docs: &[Document],
    kind: TowerKind,
    vars: &TowerVars,
    config: &EncoderConfig,
    registry: &SectionRegistry,
    tokenizer: &Tokenizer,
    backbone: &dyn Backbone,
) -> Result<VarId, TrainError> {
    let mut rows = Vec::with_capacity(docs.len());
    for doc in docs {
        let fwd = encode_document_on_tape(tape, doc, kind, vars, config, registry, tokenizer, backbone)?;
        rows.push(fwd.embedding);
    }
    Ok(tape.concat_rows(&rows)?)
}

fn batch_loss_on_tape(
    tape: &mut Tape,
    batch: &Batch,
    projects: VarId,
    freelancers: VarId,
    config: &TrainConfig,
) -> Result<DualLoss, LossError> {
    match config.loss_kind {
        LossKind::DualATriplets => {
            dual_a_triplets_on_tape(tape, projects, freelancers, &batch.a_pf, &batch.a_ff, config.margin)
        }
        LossKind::DualAInfoNce => {
            dual_a_info_nce_on_tape(tape, projects, freelancers, &batch.a_pf, &batch.a_ff, config.temperature)
        }
    }
}

fn sample_batch(
    corpus: &Corpus,
    interactions: &[Interaction],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Batch, TrainError> {
    match config.loss_kind {
        LossKind::DualATriplets => sample_triplet_batch(corpus, interactions, config, rng),
        LossKind::DualAInfoNce => sample_infonce_batch(corpus, interactions, config, rng),
    }
}

/// Loss of one batch under the given towers, without recording gradients.
/// `None` when the batch carries no supervision for the configured loss.
#[allow(clippy::too_many_arguments)]
fn evaluate_batch(
    corpus_registry: &SectionRegistry,
    batch: &Batch,
    freelancer: &TowerParams,
    project: &TowerParams,
    encoder: &EncoderConfig,
    train: &TrainConfig,
    tokenizer: &Tokenizer,
    backbone: &dyn Backbone,
) -> Result<Option<f64>, TrainError> {
    let mut tape = Tape::new();
    let f_vars = freelancer.register(&mut tape, false);
    let p_vars = project.register(&mut tape, false);
    let p_rows = encode_batch_rows(
        &mut tape,
        &batch.projects,
        TowerKind::Project,
        &p_vars,
        encoder,
        corpus_registry,
        tokenizer,
        backbone,
    )?;
    let f_rows = encode_batch_rows(
        &mut tape,
        &batch.freelancers,
        TowerKind::Freelancer,
        &f_vars,
        encoder,
        corpus_registry,
        tokenizer,
        backbone,
    )?;
    match batch_loss_on_tape(&mut tape, batch, p_rows, f_rows, train) {
        Ok(dual) => Ok(Some(tape.scalar_f64(dual.total)?)),
        Err(LossError::NoPositives) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Trains both towers on the split's training interactions. Steps per epoch
/// is the number of eligible projects divided by the batch size (rounded
/// up), so each epoch sees roughly every project once. Validation loss is
/// measured each epoch on batches pre-sampled from the validation
/// interactions; the epoch with the lowest validation loss provides
/// `best_*` towers.
pub fn train(
    corpus: &Corpus,
    train_interactions: &[Interaction],
    validation_interactions: &[Interaction],
    backbone: &dyn Backbone,
    encoder: &EncoderConfig,
    config: &TrainConfig,
    tokenizer: &Tokenizer,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let registry = &corpus.registry;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut freelancer = TowerParams::init(
        TowerKind::Freelancer,
        registry.sections(DocumentKind::Profile).len(),
        encoder,
        &mut rng,
    );
    let mut project = TowerParams::init(
        TowerKind::Project,
        registry.sections(DocumentKind::Proposal).len(),
        encoder,
        &mut rng,
    );

    let eligible =
        eligible_projects(train_interactions, config.positives_per_project, config.negatives_per_project);
    if eligible.len() < config.batch_projects {
        return Err(TrainError::NoEligibleProjects {
            needed: config.batch_projects,
            found: eligible.len(),
            min_pos: config.positives_per_project,
            min_neg: config.negatives_per_project,
        });
    }
    let steps_per_epoch = eligible.len().div_ceil(config.batch_projects);

    // Fixed validation batches so epochs are compared on identical data.
    let mut val_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x76616c69);
    let mut validation_batches = Vec::new();
    let val_eligible =
        eligible_projects(validation_interactions, config.positives_per_project, config.negatives_per_project);
    if val_eligible.len() >= config.batch_projects {
        let n_batches = val_eligible.len().div_ceil(config.batch_projects).min(16);
        for _ in 0..n_batches {
            validation_batches.push(sample_batch(corpus, validation_interactions, config, &mut val_rng)?);
        }
    }

    let sizes: Vec<usize> = freelancer
        .named_params()
        .iter()
        .chain(project.named_params().iter())
        .map(|(_, t)| t.data().len())
        .collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &sizes);

    let mut history = Vec::new();
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, TowerParams, TowerParams)> = None;
    let mut step = 0usize;

    for epoch in 1..=config.epochs {
        for _ in 0..steps_per_epoch {
            let batch = sample_batch(corpus, train_interactions, config, &mut rng)?;
            step += 1;

            let mut tape = Tape::new();
            let f_vars = freelancer.register(&mut tape, true);
            let p_vars = project.register(&mut tape, true);
            let p_rows = encode_batch_rows(
                &mut tape,
                &batch.projects,
                TowerKind::Project,
                &p_vars,
                encoder,
                registry,
                tokenizer,
                backbone,
            )?;
            let f_rows = encode_batch_rows(
                &mut tape,
                &batch.freelancers,
                TowerKind::Freelancer,
                &f_vars,
                encoder,
                registry,
                tokenizer,
                backbone,
            )?;
            let dual = match batch_loss_on_tape(&mut tape, &batch, p_rows, f_rows, config) {
                Ok(dual) => dual,
                Err(LossError::NoPositives) => continue,
                Err(e) => return Err(e.into()),
            };
            let loss = tape.scalar_f64(dual.total)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    epoch,
                    project_ids: batch.project_ids(),
                    freelancer_ids: batch.freelancer_ids(),
                });
            }
            let project_term = dual.project_term.map(|v| tape.scalar_f64(v)).transpose()?;
            let freelancer_term = dual.freelancer_term.map(|v| tape.scalar_f64(v)).transpose()?;
            tape.backward(dual.total)?;

            let var_ids: Vec<VarId> = TowerParams::ordered_vars(&f_vars)
                .into_iter()
                .chain(TowerParams::ordered_vars(&p_vars))
                .collect();
            let grads: Vec<Option<Tensor>> = var_ids.iter().map(|&v| tape.grad(v).cloned()).collect();
            let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(|g| g.as_ref()).collect();
            {
                let mut params: Vec<&mut Tensor> = Vec::with_capacity(sizes.len());
                for (_, t) in freelancer.named_params_mut() {
                    params.push(t);
                }
                for (_, t) in project.named_params_mut() {
                    params.push(t);
                }
                optimizer.apply(&mut params, &grad_refs);
            }

            history.push(HistoryRow { step, epoch, loss, project_term, freelancer_term });
        }

        let epoch_validation = if validation_batches.is_empty() {
            None
        } else {
            let mut total = 0.0f64;
            let mut counted = 0usize;
            for batch in &validation_batches {
                if let Some(loss) =
                    evaluate_batch(registry, batch, &freelancer, &project, encoder, config, tokenizer, backbone)?
                {
                    total += loss;
                    counted += 1;
                }
            }
            (counted > 0).then(|| total / counted as f64)
        };
        validation.push(epoch_validation);
        if let Some(v) = epoch_validation {
            let better = best.as_ref().is_none_or(|(b, ..)| v < *b);
            if better {
                best = Some((v, epoch, freelancer.clone(), project.clone()));
            }
        }
    }

    let (best_epoch, best_freelancer, best_project) = match best {
        Some((_, epoch, f, p)) => (epoch, f, p),
        None => (config.epochs, freelancer.clone(), project.clone()),
    };
    Ok(TrainOutcome { freelancer, project, best_freelancer, best_project, best_epoch, history, validation })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained artifact: both towers plus the configuration needed to rebuild
/// the encoding path (including the output-normalization mode).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub freelancer: TowerParams,
    pub project: TowerParams,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    encoder: EncoderConfig,
    train: TrainConfig,
    freelancer_sections: usize,
    project_sections: usize,
}

fn tower_len(sections: usize, encoder: &EncoderConfig) -> usize {
    let d = encoder.d_model;
    let per_block = 4 * (d * d + d) // attention projections + biases
        + d * encoder.ff_dim + encoder.ff_dim // ff in
        + encoder.ff_dim * d + d // ff out
        + 4 * d; // two layer norms
    sections * d + encoder.n_head_layers * per_block
}

/// Serializes a checkpoint. The layout is `SMCK`, a version, a JSON header
/// (configs and section counts), then both towers' parameters in canonical
/// order as little-endian f32.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let bad = |msg: String| TrainError::BadCheckpoint(msg);
    if checkpoint.freelancer.d_model() != checkpoint.encoder.d_model
        || checkpoint.project.d_model() != checkpoint.encoder.d_model
    {
        return Err(bad(format!(
            "tower widths {}/{} do not match configured d_model {}",
            checkpoint.freelancer.d_model(),
            checkpoint.project.d_model(),
            checkpoint.encoder.d_model
        )));
    }
    let header = CheckpointHeader {
        encoder: checkpoint.encoder.clone(),
        train: checkpoint.train.clone(),
        freelancer_sections: checkpoint.freelancer.n_sections(),
        project_sections: checkpoint.project.n_sections(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| bad(format!("header serialization failed: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for tower in [&checkpoint.freelancer, &checkpoint.project] {
        for v in tower.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a checkpoint saved by [`save_checkpoint`], validating magic,
/// version, and that the weight payload exactly matches the configured
/// shapes.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let bad = |msg: String| TrainError::BadCheckpoint(msg);
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    if bytes.len() < 16 {
        return Err(bad("file too short for header".into()));
    }
    if &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(bad("bad magic; not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json_end = 16usize.checked_add(json_len).ok_or_else(|| bad("header length overflows".into()))?;
    if bytes.len() < json_end {
        return Err(bad("truncated header".into()));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[16..json_end]).map_err(|e| bad(format!("malformed header: {e}")))?;
    header.train.validate()?;
    let expected_floats = tower_len(header.freelancer_sections, &header.encoder)
        + tower_len(header.project_sections, &header.encoder);
    let payload = &bytes[json_end..];
    if payload.len() != expected_floats * 4 {
        return Err(bad(format!(
            "weight payload holds {} bytes but configuration (d_model {}) requires {}",
            payload.len(),
            header.encoder.d_model,
            expected_floats * 4
        )));
    }
    let floats: Vec<f32> =
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut freelancer =
        TowerParams::init(TowerKind::Freelancer, header.freelancer_sections, &header.encoder, &mut rng);
    let mut project = TowerParams::init(TowerKind::Project, header.project_sections, &header.encoder, &mut rng);
    let split = tower_len(header.freelancer_sections, &header.encoder);
    freelancer.load_flat(&floats[..split])?;
    project.load_flat(&floats[split..])?;
    Ok(Checkpoint { encoder: header.encoder, train: header.train, freelancer, project })
}
