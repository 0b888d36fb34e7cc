//! Transformer encoder block and related initialization helpers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NumericsError, Tape, Tensor, VarId};

/// Epsilon used by every layer normalization in the crate.
pub const LAYER_NORM_EPS: f32 = 1e-5;

/// Weights of one encoder block: multi-head self-attention with output
/// projection, a two-layer feed-forward net, and two post-residual layer
/// normalizations.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
    pub ff_w1: Tensor,
    pub ff_b1: Tensor,
    pub ff_w2: Tensor,
    pub ff_b2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

/// Tape handles for one registered [`BlockParams`].
#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub w_q: VarId,
    pub b_q: VarId,
    pub w_k: VarId,
    pub b_k: VarId,
    pub w_v: VarId,
    pub b_v: VarId,
    pub w_o: VarId,
    pub b_o: VarId,
    pub ff_w1: VarId,
    pub ff_b1: VarId,
    pub ff_w2: VarId,
    pub ff_b2: VarId,
    pub ln1_gain: VarId,
    pub ln1_bias: VarId,
    pub ln2_gain: VarId,
    pub ln2_bias: VarId,
}

impl BlockParams {
    /// Freshly initialized block: Xavier-uniform projection weights, zero
    /// biases, identity layer norms.
    pub fn init(d_model: usize, ff_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            w_q: xavier_uniform(d_model, d_model, rng),
            b_q: Tensor::zeros(&[d_model]).expect("nonzero dim"),
            w_k: xavier_uniform(d_model, d_model, rng),
            b_k: Tensor::zeros(&[d_model]).expect("nonzero dim"),
            w_v: xavier_uniform(d_model, d_model, rng),
            b_v: Tensor::zeros(&[d_model]).expect("nonzero dim"),
            w_o: xavier_uniform(d_model, d_model, rng),
            b_o: Tensor::zeros(&[d_model]).expect("nonzero dim"),
            ff_w1: xavier_uniform(d_model, ff_dim, rng),
            ff_b1: Tensor::zeros(&[ff_dim]).expect("nonzero dim"),
            ff_w2: xavier_uniform(ff_dim, d_model, rng),
            ff_b2: Tensor::zeros(&[d_model]).expect("nonzero dim"),
            ln1_gain: Tensor::ones(&[d_model]).expect("nonzero dim"),
            ln1_bias: Tensor::zeros(&[d_model]).expect("nonzero dim"),
            ln2_gain: Tensor::ones(&[d_model]).expect("nonzero dim"),
            ln2_bias: Tensor::zeros(&[d_model]).expect("nonzero dim"),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Parameters in the canonical serialization/update order.
    pub fn named_params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_q", &self.w_q),
            ("b_q", &self.b_q),
            ("w_k", &self.w_k),
            ("b_k", &self.b_k),
            ("w_v", &self.w_v),
            ("b_v", &self.b_v),
            ("w_o", &self.w_o),
            ("b_o", &self.b_o),
            ("ff_w1", &self.ff_w1),
            ("ff_b1", &self.ff_b1),
            ("ff_w2", &self.ff_w2),
            ("ff_b2", &self.ff_b2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    /// Mutable view in the same canonical order as [`BlockParams::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_q", &mut self.w_q),
            ("b_q", &mut self.b_q),
            ("w_k", &mut self.w_k),
            ("b_k", &mut self.b_k),
            ("w_v", &mut self.w_v),
            ("b_v", &mut self.b_v),
            ("w_o", &mut self.w_o),
            ("b_o", &mut self.b_o),
            ("ff_w1", &mut self.ff_w1),
            ("ff_b1", &mut self.ff_b1),
            ("ff_w2", &mut self.ff_w2),
            ("ff_b2", &mut self.ff_b2),
            ("ln1_gain", &mut self.ln1_gain),
            ("ln1_bias", &mut self.ln1_bias),
            ("ln2_gain", &mut self.ln2_gain),
            ("ln2_bias", &mut self.ln2_bias),
        ]
    }

    /// Records the block weights on a tape, trainable or frozen.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> BlockVars {
        let mut reg = |t: &Tensor| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        BlockVars {
            w_q: reg(&self.w_q),
            b_q: reg(&self.b_q),
            w_k: reg(&self.w_k),
            b_k: reg(&self.b_k),
            w_v: reg(&self.w_v),
            b_v: reg(&self.b_v),
            w_o: reg(&self.w_o),
            b_o: reg(&self.b_o),
            ff_w1: reg(&self.ff_w1),
            ff_b1: reg(&self.ff_b1),
            ff_w2: reg(&self.ff_w2),
            ff_b2: reg(&self.ff_b2),
            ln1_gain: reg(&self.ln1_gain),
            ln1_bias: reg(&self.ln1_bias),
            ln2_gain: reg(&self.ln2_gain),
            ln2_bias: reg(&self.ln2_bias),
        }
    }
}

/// One post-norm encoder block over an `[n, d]` sequence:
/// `x -> LN(x + MHA(x)) -> LN(· + FF(·))`.
pub fn attention_block(
    tape: &mut Tape,
    x: VarId,
    vars: &BlockVars,
    n_heads: usize,
) -> Result<VarId, NumericsError> {
    let (n, d) = tape.value(x).dims2()?;
    if n_heads == 0 || d % n_heads != 0 {
        return Err(NumericsError::arg(
            "attention_block",
            format!("width {d} is not divisible into {n_heads} heads"),
        ));
    }
    let d_head = d / n_heads;
    let scale = (d_head as f64).sqrt() as f32;

    let q = tape.matmul(x, vars.w_q)?;
    let q = tape.add_row_broadcast(q, vars.b_q)?;
    let k = tape.matmul(x, vars.w_k)?;
    let k = tape.add_row_broadcast(k, vars.b_k)?;
    let v = tape.matmul(x, vars.w_v)?;
    let v = tape.add_row_broadcast(v, vars.b_v)?;

    let full_mask = Tensor::ones(&[n, n])?;
    let mut head_outputs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        // Dividing the logits by sqrt(d_head) via the softmax temperature.
        let attn = tape.masked_softmax(scores, &full_mask, scale)?;
        head_outputs.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat_cols(&head_outputs)?;
    let proj = tape.matmul(merged, vars.w_o)?;
    let proj = tape.add_row_broadcast(proj, vars.b_o)?;
    let res1 = tape.add(x, proj)?;
    let norm1 = tape.layer_norm(res1, vars.ln1_gain, vars.ln1_bias, LAYER_NORM_EPS)?;

    let ff = tape.matmul(norm1, vars.ff_w1)?;
    let ff = tape.add_row_broadcast(ff, vars.ff_b1)?;
    let ff = tape.relu(ff)?;
    let ff = tape.matmul(ff, vars.ff_w2)?;
    let ff = tape.add_row_broadcast(ff, vars.ff_b2)?;
    let res2 = tape.add(norm1, ff)?;
    tape.layer_norm(res2, vars.ln2_gain, vars.ln2_bias, LAYER_NORM_EPS)
}

/// Xavier-uniform initialized `[rows, cols]` matrix.
pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt() as f32;
    let data: Vec<f32> = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(data, &[rows, cols]).expect("nonzero dims")
}

/// Sinusoidal positional encodings for `n` positions at width `d`.
///
/// Positions restart from zero on every call, so per-section encodings are
/// obtained by calling this once per section.
pub fn sinusoidal_positions(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0f32; n * d];
    for pos in 0..n {
        let mut i = 0usize;
        while 2 * i < d {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin() as f32;
            if 2 * i + 1 < d {
                data[pos * d + 2 * i + 1] = angle.cos() as f32;
            }
            i += 1;
        }
    }
    Tensor::new(data, &[n, d]).expect("nonzero dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(data, &[n, d]).unwrap()
    }

    fn forward(params: &BlockParams, x: &Tensor, n_heads: usize) -> Tensor {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = params.register(&mut tape, false);
        let out = attention_block(&mut tape, xv, &vars, n_heads).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn single_token_sequence_is_well_defined() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = BlockParams::init(8, 16, &mut rng);
        let out = forward(&params, &random_input(1, 8, 2), 2);
        assert_eq!(out.shape(), &[1, 8]);
        assert!(!out.has_non_finite());
    }

    #[test]
    fn block_without_positions_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = BlockParams::init(8, 16, &mut rng);
        let x = random_input(5, 8, 4);
        let perm = [3usize, 0, 4, 1, 2];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(x.row(p));
        }
        let xp = Tensor::new(permuted, &[5, 8]).unwrap();
        let out = forward(&params, &x, 2);
        let out_p = forward(&params, &xp, 2);
        for (i, &p) in perm.iter().enumerate() {
            for j in 0..8 {
                let diff = (out_p.get2(i, j) - out.get2(p, j)).abs();
                assert!(diff < 1e-5, "row {i} col {j} differs by {diff}");
            }
        }
    }

    #[test]
    fn rejects_width_not_divisible_by_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = BlockParams::init(6, 12, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(2, 6, 6));
        let vars = params.register(&mut tape, false);
        assert!(attention_block(&mut tape, x, &vars, 4).is_err());
        assert!(attention_block(&mut tape, x, &vars, 0).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = BlockParams::init(8, 16, &mut ChaCha8Rng::seed_from_u64(9));
        let b = BlockParams::init(8, 16, &mut ChaCha8Rng::seed_from_u64(9));
        for ((_, ta), (_, tb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert!(ta.bitwise_eq(tb));
        }
    }

    #[test]
    fn sinusoidal_positions_start_identically_for_every_section_length() {
        let a = sinusoidal_positions(3, 8);
        let b = sinusoidal_positions(7, 8);
        for j in 0..8 {
            assert_eq!(a.get2(0, j), b.get2(0, j));
            assert_eq!(a.get2(2, j), b.get2(2, j));
        }
        assert_eq!(a.get2(0, 0), 0.0); // sin(0)
        assert_eq!(a.get2(0, 1), 1.0); // cos(0)
    }

    #[test]
    fn gradients_flow_to_every_block_parameter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = BlockParams::init(8, 16, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(random_input(3, 8, 12));
        let vars = params.register(&mut tape, true);
        let out = attention_block(&mut tape, x, &vars, 2).unwrap();
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        for id in [
            vars.w_q, vars.b_q, vars.w_k, vars.b_k, vars.w_v, vars.b_v, vars.w_o, vars.b_o, vars.ff_w1,
            vars.ff_b1, vars.ff_w2, vars.ff_b2, vars.ln1_gain, vars.ln1_bias, vars.ln2_gain, vars.ln2_bias,
        ] {
            assert!(tape.grad(id).is_some(), "missing gradient for a block parameter");
        }
    }
}
