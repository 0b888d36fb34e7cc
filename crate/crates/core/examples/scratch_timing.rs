//! Memorization probe: trained cat@10 on train projects vs test projects.
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skillmatch_core::backbone::{Backbone, BackboneConfig, StubBackbone};
use skillmatch_core::corpus::{generate_synthetic, temporal_split, Corpus, DocumentKind, Interaction, SynthConfig, Tokenizer};
use skillmatch_core::encoder::{encode_document, EncoderConfig, TowerKind, TowerParams};
use skillmatch_core::evaluation::{evaluate, EvalConfig, EvalItem};
use skillmatch_core::trainer::{train, TrainConfig};
use std::collections::BTreeSet;

fn cat10(
    corpus: &Corpus,
    interactions: &[Interaction],
    freelancer: &TowerParams,
    project: &TowerParams,
    encoder: &EncoderConfig,
    tokenizer: &Tokenizer,
    backbone: &dyn Backbone,
) -> (f64, f64) {
    let registry = &corpus.registry;
    let project_ids: BTreeSet<&str> = interactions.iter().map(|i| i.project_id.as_str()).collect();
    let mut profiles = Vec::new();
    let mut proposals = Vec::new();
    for doc in corpus.documents.values() {
        match doc.kind {
            DocumentKind::Profile => {
                let e = encode_document(doc, freelancer, encoder, registry, tokenizer, backbone).unwrap();
                profiles.push(EvalItem::from_document(doc, e.vector));
            }
            DocumentKind::Proposal if project_ids.contains(doc.id.as_str()) => {
                let e = encode_document(doc, project, encoder, registry, tokenizer, backbone).unwrap();
                proposals.push(EvalItem::from_document(doc, e.vector));
            }
            _ => {}
        }
    }
    let block = evaluate(&proposals, &profiles, interactions, &EvalConfig::default()).unwrap().overall;
    (
        block.category_overlap[&10].mean.unwrap_or(f64::NAN),
        block.recall_all.mean.unwrap_or(f64::NAN),
    )
}

fn main() {
    let seed = 1u64;
    let out = generate_synthetic(&SynthConfig::default(), seed).unwrap();
    let mut ts: Vec<i64> = out.corpus.interactions.iter().map(|i| i.ts).collect();
    ts.sort_unstable();
    let cutoff = ts[((ts.len() as f64) * 0.8).floor() as usize];
    let split = temporal_split(&out.corpus, cutoff, 0.1, 0).unwrap();

    let backbone = StubBackbone::new(BackboneConfig::default());
    let encoder = EncoderConfig { normalize_output: true, ..EncoderConfig::default() };
    let tokenizer = Tokenizer::new(backbone.config().vocab_size, backbone.config().max_section_tokens).unwrap();
    let registry = &out.corpus.registry;

    // Train-interaction subset of comparable size to the test set.
    let train_sample: Vec<Interaction> = split.train.iter().take(160).cloned().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_f = TowerParams::init(TowerKind::Freelancer, registry.profile.len(), &encoder, &mut rng);
    let base_p = TowerParams::init(TowerKind::Project, registry.proposal.len(), &encoder, &mut rng);
    let (bt, br) = cat10(&out.corpus, &split.test, &base_f, &base_p, &encoder, &tokenizer, &backbone);
    let (btr, brr) = cat10(&out.corpus, &train_sample, &base_f, &base_p, &encoder, &tokenizer, &backbone);
    println!("baseline: test cat@10 {bt:.4} recall_all {br:.4} | train cat@10 {btr:.4} recall_all {brr:.4}");

    let config = TrainConfig { seed, learning_rate: 1e-4, ..TrainConfig::info_nce_preset() };
    let outcome = train(&out.corpus, &split.train, &split.validation, &backbone, &encoder, &config, &tokenizer).unwrap();
    let (tt, tr) = cat10(&out.corpus, &split.test, &outcome.best_freelancer, &outcome.best_project, &encoder, &tokenizer, &backbone);
    let (ttr, trr) = cat10(&out.corpus, &train_sample, &outcome.best_freelancer, &outcome.best_project, &encoder, &tokenizer, &backbone);
    println!("trained:  test cat@10 {tt:.4} recall_all {tr:.4} | train cat@10 {ttr:.4} recall_all {trr:.4}");
}
