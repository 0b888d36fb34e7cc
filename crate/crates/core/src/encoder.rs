//! The document tower: section encodings → categorical encoding and
//! concatenation → transformer head → skip connection with two-stage
//! weighted pooling → one embedding vector per document.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneError};
use crate::corpus::{Document, DocumentKind, SectionRegistry, Tokenizer};
use crate::numerics::transformer::{attention_block, xavier_uniform, BlockParams, BlockVars};
use crate::numerics::{NumericsError, Tape, Tensor, VarId};

/// Errors from tower assembly and document encoding.
#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("document \"{doc_id}\" has kind {doc_kind:?} but the tower encodes {expected:?} documents")]
    KindMismatch {
        doc_id: String,
        doc_kind: DocumentKind,
        expected: TowerKind,
    },
    #[error("expected {expected} section encodings, got {got}")]
    SectionCount { expected: usize, got: usize },
    #[error("backbone produced width {got}, tower expects {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which document kind a tower encodes.
#[derive(Clone, Copy, Debug, Eq, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TowerKind {
    Freelancer,
    Project,
}

impl TowerKind {
    pub fn document_kind(self) -> DocumentKind {
        match self {
            TowerKind::Freelancer => DocumentKind::Profile,
            TowerKind::Project => DocumentKind::Proposal,
        }
    }
}

/// Hyperparameters shared by both towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_head_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    /// L2-normalize pooled embeddings (cosine training regime). Stored with
    /// checkpoints so retrieval uses the matching geometry.
    pub normalize_output: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_model: 128,
            n_head_layers: 2,
            n_heads: 4,
            ff_dim: 512,
            normalize_output: false,
        }
    }
}

/// Trainable weights of one tower: per-section categorical embeddings plus
/// the transformer head. The backbone is deliberately not part of this.
#[derive(Clone, Debug)]
pub struct TowerParams {
    pub kind: TowerKind,
    pub categorical: Tensor,
    pub blocks: Vec<BlockParams>,
}

/// Tape handles for one registered tower.
#[derive(Clone, Debug)]
pub struct TowerVars {
    pub categorical: VarId,
    pub blocks: Vec<BlockVars>,
}

impl TowerParams {
    /// Fresh tower for `n_sections` registered section types.
    pub fn init(kind: TowerKind, n_sections: usize, config: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        TowerParams {
            kind,
            categorical: xavier_uniform(n_sections, config.d_model, rng),
            blocks: (0..config.n_head_layers)
                .map(|_| BlockParams::init(config.d_model, config.ff_dim, rng))
                .collect(),
        }
    }

    pub fn n_sections(&self) -> usize {
        self.categorical.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.categorical.shape()[1]
    }

    /// All trainable tensors in canonical order, with stable names.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("categorical".to_string(), &self.categorical)];
        for (i, block) in self.blocks.iter().enumerate() {
            for (name, t) in block.named_params() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out
    }

    /// Mutable tensors in the same canonical order as [`TowerParams::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = vec![("categorical".to_string(), &mut self.categorical)];
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (name, t) in block.named_params_mut() {
                out.push((format!("block{i}.{name}"), t));
            }
        }
        out
    }

    /// Registers the tower on a tape; `trainable` controls gradient tracking.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TowerVars {
        let categorical = if trainable {
            tape.param(self.categorical.clone())
        } else {
            tape.constant(self.categorical.clone())
        };
        TowerVars {
            categorical,
            blocks: self.blocks.iter().map(|b| b.register(tape, trainable)).collect(),
        }
    }

    /// Registered variables in the same order as [`TowerParams::named_params`].
    pub fn ordered_vars(vars: &TowerVars) -> Vec<VarId> {
        let mut out = vec![vars.categorical];
        for b in &vars.blocks {
            out.extend_from_slice(&[
                b.w_q, b.b_q, b.w_k, b.b_k, b.w_v, b.b_v, b.w_o, b.b_o, b.ff_w1, b.ff_b1, b.ff_w2, b.ff_b2,
                b.ln1_gain, b.ln1_bias, b.ln2_gain, b.ln2_bias,
            ]);
        }
        out
    }

    /// Concatenation of all parameters in canonical order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for (_, t) in self.named_params() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Replaces all parameters from a flat vector in canonical order.
    pub fn load_flat(&mut self, flat: &[f32]) -> Result<(), EncoderError> {
        let expected: usize = self.named_params().iter().map(|(_, t)| t.numel()).sum();
        if flat.len() != expected {
            return Err(EncoderError::SectionCount {
                expected,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for (_, t) in self.named_params_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }
}

/// One document embedding with its retrieval metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DocumentEmbedding {
    pub doc_id: String,
    pub vector: Vec<f32>,
    pub category: String,
    pub language: String,
}

/// Adds the per-section categorical embedding to every token row of its
/// section, then concatenates the sections in registry order.
pub fn assemble_sequence(
    tape: &mut Tape,
    sections: &[VarId],
    categorical: VarId,
) -> Result<VarId, NumericsError> {
    let n_rows = tape.value(categorical).shape()[0];
    if sections.len() != n_rows {
        return Err(NumericsError::shape(
            "assemble_sequence",
            format!("{} section encodings but {} categorical rows", sections.len(), n_rows),
        ));
    }
    let d = tape.value(categorical).shape()[1];
    let mut tagged = Vec::with_capacity(sections.len());
    for (l, &section) in sections.iter().enumerate() {
        let row2 = tape.slice_rows(categorical, l, 1)?;
        let row = tape.reshape(row2, &[d])?;
        tagged.push(tape.add_row_broadcast(section, row)?);
    }
    tape.concat_rows(&tagged)
}

/// Runs the stacked attention blocks over the assembled sequence.
pub fn head_forward(
    tape: &mut Tape,
    x: VarId,
    blocks: &[BlockVars],
    n_heads: usize,
) -> Result<VarId, NumericsError> {
    let mut cur = x;
    for vars in blocks {
        cur = attention_block(tape, cur, vars, n_heads)?;
    }
    Ok(cur)
}

/// Two-stage weighted pooling with the backbone skip connection:
/// every token row contributes `(head + backbone) / (k_l · |L|)`, so each
/// section weighs equally regardless of its length. Optionally L2-normalizes.
pub fn pool_on_tape(
    tape: &mut Tape,
    e_head: VarId,
    e_backbone: VarId,
    lengths: &[usize],
    normalize: bool,
) -> Result<VarId, NumericsError> {
    let summed = tape.add(e_head, e_backbone)?;
    let pooled = tape.section_pool(summed, lengths)?;
    if normalize {
        tape.l2_normalize_rows(pooled)
    } else {
        Ok(pooled)
    }
}

/// Everything needed to run a document through a tower on an existing tape.
pub struct DocumentForward {
    /// Pooled embedding, shape `[1, d]`.
    pub embedding: VarId,
    /// Per-section token counts, registry order.
    pub lengths: Vec<usize>,
}

/// Tokenizes, backbone-encodes, and runs one document through a registered
/// tower on the given tape. Gradients flow to the tower variables only; the
/// backbone enters as constants.
#[allow(clippy::too_many_arguments)]
pub fn encode_document_on_tape(
    tape: &mut Tape,
    doc: &Document,
    kind: TowerKind,
    vars: &TowerVars,
    config: &EncoderConfig,
    registry: &SectionRegistry,
    tokenizer: &Tokenizer,
    backbone: &dyn Backbone,
) -> Result<DocumentForward, EncoderError> {
    if doc.kind != kind.document_kind() {
        return Err(EncoderError::KindMismatch {
            doc_id: doc.id.clone(),
            doc_kind: doc.kind,
            expected: kind,
        });
    }
    let labels = registry.sections(doc.kind);
    let mut sections = Vec::with_capacity(labels.len());
    let mut lengths = Vec::with_capacity(labels.len());
    for label in labels {
        let tokens = tokenizer.tokenize(doc.section_text(label));
        let encoded = backbone.encode_section(&doc.id, label, &tokens)?;
        let (rows, width) = encoded.dims2()?;
        if width != config.d_model {
            return Err(EncoderError::WidthMismatch {
                expected: config.d_model,
                got: width,
            });
        }
        lengths.push(rows);
        sections.push(tape.constant(encoded));
    }
    let assembled = assemble_sequence(tape, &sections, vars.categorical)?;
    let head = head_forward(tape, assembled, &vars.blocks, config.n_heads)?;
    let backbone_concat = tape.concat_rows(&sections)?;
    let embedding = pool_on_tape(tape, head, backbone_concat, &lengths, config.normalize_output)?;
    Ok(DocumentForward { embedding, lengths })
}

/// Value-level document encoding on a private tape.
pub fn encode_document(
    doc: &Document,
    tower: &TowerParams,
    config: &EncoderConfig,
    registry: &SectionRegistry,
    tokenizer: &Tokenizer,
    backbone: &dyn Backbone,
) -> Result<DocumentEmbedding, EncoderError> {
    let mut tape = Tape::new();
    let vars = tower.register(&mut tape, false);
    let fwd = encode_document_on_tape(&mut tape, doc, tower.kind, &vars, config, registry, tokenizer, backbone)?;
    Ok(DocumentEmbedding {
        doc_id: doc.id.clone(),
        vector: tape.value(fwd.embedding).data().to_vec(),
        category: doc.category.clone(),
        language: doc.language.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, StubBackbone};
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use std::collections::BTreeMap;

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig {
            d_model: 16,
            n_head_layers: 1,
            n_heads: 2,
            ff_dim: 32,
            normalize_output: false,
        }
    }

    fn tiny_backbone() -> StubBackbone {
        StubBackbone::new(BackboneConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 128,
            seed: 3,
            max_section_tokens: 32,
        })
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new((0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(), &[rows, cols]).unwrap()
    }

    fn profile(id: &str, sections: &[(&str, &str)]) -> Document {
        let mut map = BTreeMap::new();
        for label in crate::corpus::PROFILE_SECTIONS {
            map.insert(label.to_string(), String::new());
        }
        for (label, text) in sections {
            map.insert(label.to_string(), text.to_string());
        }
        Document {
            id: id.to_string(),
            kind: DocumentKind::Profile,
            category: "cat0".to_string(),
            language: "lang0".to_string(),
            sections: map,
        }
    }

    #[test]
    fn assembly_with_zero_categoricals_is_plain_concatenation() {
        let mut tape = Tape::new();
        let a = random_matrix(2, 4, 1);
        let b = random_matrix(3, 4, 2);
        let sa = tape.constant(a.clone());
        let sb = tape.constant(b.clone());
        let zeros = tape.constant(Tensor::zeros(&[2, 4]).unwrap());
        let out = assemble_sequence(&mut tape, &[sa, sb], zeros).unwrap();
        let value = tape.value(out);
        assert_eq!(value.shape(), &[5, 4]);
        let mut expected = a.data().to_vec();
        expected.extend_from_slice(b.data());
        assert_eq!(value.data(), expected.as_slice());
    }

    #[test]
    fn assembly_adds_each_sections_categorical_row_exactly() {
        let mut tape = Tape::new();
        let a = random_matrix(2, 4, 3);
        let b = random_matrix(3, 4, 4);
        let cat = random_matrix(2, 4, 5);
        let sa = tape.constant(a.clone());
        let sb = tape.constant(b.clone());
        let cv = tape.constant(cat.clone());
        let out = assemble_sequence(&mut tape, &[sa, sb], cv).unwrap();
        let value = tape.value(out);
        for i in 0..2 {
            for j in 0..4 {
                assert_eq!(value.get2(i, j), a.get2(i, j) + cat.get2(0, j));
            }
        }
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(value.get2(2 + i, j), b.get2(i, j) + cat.get2(1, j));
            }
        }
    }

    #[test]
    fn assembly_rejects_wrong_section_count() {
        let mut tape = Tape::new();
        let s = tape.constant(random_matrix(2, 4, 6));
        let cat = tape.constant(random_matrix(2, 4, 7));
        assert!(assemble_sequence(&mut tape, &[s], cat).is_err());
    }

    #[test]
    fn head_attends_across_sections() {
        // Doubling section A's tokens must change section B's output rows:
        // the head mixes the whole document, unlike the per-section backbone.
        let config = tiny_encoder();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tower = TowerParams::init(TowerKind::Freelancer, 2, &config, &mut rng);
        let b = random_matrix(2, 16, 21);
        let run = |a: &Tensor| {
            let mut tape = Tape::new();
            let vars = tower.register(&mut tape, false);
            let sa = tape.constant(a.clone());
            let sb = tape.constant(b.clone());
            let asm = assemble_sequence(&mut tape, &[sa, sb], vars.categorical).unwrap();
            let out = head_forward(&mut tape, asm, &vars.blocks, config.n_heads).unwrap();
            let rows = tape.value(out).shape()[0];
            let tail = tape.slice_rows(out, rows - 2, 2).unwrap();
            tape.value(tail).clone()
        };
        let a_short = random_matrix(2, 16, 20);
        let mut doubled = a_short.data().to_vec();
        doubled.extend_from_slice(a_short.data());
        let a_long = Tensor::new(doubled, &[4, 16]).unwrap();
        let tail_short = run(&a_short);
        let tail_long = run(&a_long);
        assert!(tail_short.max_abs_diff(&tail_long) > 1e-7);
    }

    #[test]
    fn pooling_reduces_to_mean_for_one_section_with_zero_head() {
        let backbone_rows = random_matrix(5, 4, 8);
        let mut tape = Tape::new();
        let head = tape.constant(Tensor::zeros(&[5, 4]).unwrap());
        let bb = tape.constant(backbone_rows.clone());
        let pooled = pool_on_tape(&mut tape, head, bb, &[5], false).unwrap();
        let value = tape.value(pooled);
        for j in 0..4 {
            let mean: f64 = (0..5).map(|i| backbone_rows.get2(i, j) as f64).sum::<f64>() / 5.0;
            assert!((value.get2(0, j) as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn pooling_balances_sections_regardless_of_length() {
        // Section A: k rows all equal to `a`; section B: 3 rows all equal to
        // `b` (already summed with the skip). Result must be (a + b) / 2.
        for k in [1usize, 2, 6] {
            let d = 3;
            let a = [0.5f32, -1.0, 2.0];
            let b = [1.5f32, 0.25, -0.5];
            let mut rows = Vec::new();
            for _ in 0..k {
                rows.extend_from_slice(&a);
            }
            for _ in 0..3 {
                rows.extend_from_slice(&b);
            }
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::new(rows.clone(), &[k + 3, d]).unwrap());
            let zero = tape.constant(Tensor::zeros(&[k + 3, d]).unwrap());
            let pooled = pool_on_tape(&mut tape, x, zero, &[k, 3], false).unwrap();
            let value = tape.value(pooled);
            for j in 0..d {
                let expected = (a[j] as f64 + b[j] as f64) / 2.0;
                assert!(
                    (value.get2(0, j) as f64 - expected).abs() < 1e-6,
                    "k={k} j={j}: {} vs {expected}",
                    value.get2(0, j)
                );
            }
        }
    }

    #[test]
    fn pooling_matches_the_naive_double_sum() {
        let lengths = [2usize, 5, 3, 7];
        let n: usize = lengths.iter().sum();
        let d = 6;
        let head = random_matrix(n, d, 31);
        let skip = random_matrix(n, d, 32);
        let mut tape = Tape::new();
        let h = tape.constant(head.clone());
        let s = tape.constant(skip.clone());
        let pooled = pool_on_tape(&mut tape, h, s, &lengths, false).unwrap();
        let value = tape.value(pooled);
        // Naive double loop over sections and token rows.
        let n_sections = lengths.len() as f64;
        for j in 0..d {
            let mut acc = 0.0f64;
            let mut offset = 0usize;
            for &k in &lengths {
                for row in offset..offset + k {
                    acc += (head.get2(row, j) as f64 + skip.get2(row, j) as f64) / (k as f64 * n_sections);
                }
                offset += k;
            }
            assert!((value.get2(0, j) as f64 - acc).abs() < 1e-6);
        }
    }

    #[test]
    fn document_encoding_is_deterministic_and_total_on_empty_sections() {
        let config = tiny_encoder();
        let backbone = tiny_backbone();
        let tokenizer = Tokenizer::new(128, 16).unwrap();
        let registry = SectionRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tower = TowerParams::init(TowerKind::Freelancer, registry.profile.len(), &config, &mut rng);
        let empty = profile("f1", &[]);
        let e1 = encode_document(&empty, &tower, &config, &registry, &tokenizer, &backbone).unwrap();
        let e2 = encode_document(&empty, &tower, &config, &registry, &tokenizer, &backbone).unwrap();
        assert_eq!(e1.vector.len(), 16);
        assert!(e1.vector.iter().all(|v| v.is_finite()));
        assert_eq!(e1.vector, e2.vector);
    }

    #[test]
    fn swapping_a_sections_label_changes_the_embedding() {
        let config = tiny_encoder();
        let backbone = tiny_backbone();
        let tokenizer = Tokenizer::new(128, 16).unwrap();
        let registry = SectionRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tower = TowerParams::init(TowerKind::Freelancer, registry.profile.len(), &config, &mut rng);
        let a = profile("f1", &[("job_title", "alpha beta")]);
        let b = profile("f1", &[("description", "alpha beta")]);
        let ea = encode_document(&a, &tower, &config, &registry, &tokenizer, &backbone).unwrap();
        let eb = encode_document(&b, &tower, &config, &registry, &tokenizer, &backbone).unwrap();
        let diff: f32 = ea.vector.iter().zip(&eb.vector).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max);
        assert!(diff > 1e-6, "categorical encoding should distinguish section labels");
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let config = tiny_encoder();
        let backbone = tiny_backbone();
        let tokenizer = Tokenizer::new(128, 16).unwrap();
        let registry = SectionRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tower = TowerParams::init(TowerKind::Project, registry.proposal.len(), &config, &mut rng);
        let doc = profile("f1", &[]);
        assert!(matches!(
            encode_document(&doc, &tower, &config, &registry, &tokenizer, &backbone),
            Err(EncoderError::KindMismatch { .. })
        ));
    }

    #[test]
    fn gradients_reach_tower_params_but_not_backbone_inputs() {
        let config = tiny_encoder();
        let backbone = tiny_backbone();
        let tokenizer = Tokenizer::new(128, 16).unwrap();
        let registry = SectionRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tower = TowerParams::init(TowerKind::Freelancer, registry.profile.len(), &config, &mut rng);
        let doc = profile("f1", &[("skills", "rust tokio"), ("job_title", "dev")]);
        let mut tape = Tape::new();
        let vars = tower.register(&mut tape, true);
        let fwd =
            encode_document_on_tape(&mut tape, &doc, TowerKind::Freelancer, &vars, &config, &registry, &tokenizer, &backbone)
                .unwrap();
        let loss = tape.sum_all(fwd.embedding).unwrap();
        tape.backward(loss).unwrap();
        for id in TowerParams::ordered_vars(&vars) {
            assert!(tape.grad(id).is_some(), "tower parameter missing its gradient");
        }
        // Backbone weights are not on the tape at all; its stored weights are
        // untouched by construction. The checksum proves it stays frozen.
        let before = backbone.checksum();
        let _ = encode_document(&doc, &tower, &config, &registry, &tokenizer, &backbone).unwrap();
        assert_eq!(backbone.checksum(), before);
    }

    #[test]
    fn full_composition_gradient_matches_finite_differences() {
        let config = EncoderConfig {
            d_model: 8,
            n_head_layers: 1,
            n_heads: 2,
            ff_dim: 16,
            normalize_output: false,
        };
        let backbone = StubBackbone::new(BackboneConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 64,
            seed: 9,
            max_section_tokens: 8,
        });
        let tokenizer = Tokenizer::new(64, 8).unwrap();
        let registry = SectionRegistry::default();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let tower = TowerParams::init(TowerKind::Freelancer, registry.profile.len(), &config, &mut rng);
        let doc = profile("f1", &[("skills", "rust sql"), ("description", "builds data apis")]);

        let flat = tower.flatten();
        let mut analytic = vec![0.0f32; flat.len()];
        {
            let mut tape = Tape::new();
            let vars = tower.register(&mut tape, true);
            let fwd = encode_document_on_tape(
                &mut tape,
                &doc,
                TowerKind::Freelancer,
                &vars,
                &config,
                &registry,
                &tokenizer,
                &backbone,
            )
            .unwrap();
            let loss = tape.sum_all(fwd.embedding).unwrap();
            tape.backward(loss).unwrap();
            let mut offset = 0;
            for id in TowerParams::ordered_vars(&vars) {
                let g = tape.grad(id).expect("gradient present");
                analytic[offset..offset + g.numel()].copy_from_slice(g.data());
                offset += g.numel();
            }
        }

        let template = tower.clone();
        let mut f = |x: &[f32]| {
            let mut probe = template.clone();
            probe.load_flat(x).unwrap();
            let mut tape = Tape::new();
            let vars = probe.register(&mut tape, false);
            let fwd = encode_document_on_tape(
                &mut tape,
                &doc,
                TowerKind::Freelancer,
                &vars,
                &config,
                &registry,
                &tokenizer,
                &backbone,
            )
            .unwrap();
            let loss = tape.sum_all(fwd.embedding).unwrap();
            tape.scalar_f64(loss).unwrap()
        };
        let err = finite_diff_check(&mut f, &flat, &analytic, 1e-2, 60, 17).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }
}
