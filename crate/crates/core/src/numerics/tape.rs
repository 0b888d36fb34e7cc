//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! A [`Tape`] records every operation in topological order; [`Tape::backward`]
//! walks the records in reverse and accumulates gradients into every
//! parameter leaf. Values are stored as float32, but reductions accumulate in
//! float64, and scalar-valued chains additionally carry a float64 shadow
//! readable through [`Tape::scalar_f64`].

use std::sync::atomic::{AtomicU64, Ordering};

use super::{NumericsError, Tensor};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar,
    MulScalar(f32),
    DivScalar(f32),
    Matmul,
    Transpose,
    Relu,
    Sqrt,
    SumAll,
    AddRowBroadcast,
    AddOuter,
    MaskedSoftmax { temperature: f32 },
    MaskedLogsumexpRows { mask: Tensor },
    LayerNorm { eps: f32 },
    L2NormalizeRows { eps: f32 },
    ConcatRows { row_counts: Vec<usize> },
    ConcatCols { col_counts: Vec<usize> },
    SliceRows { start: usize, parent_rows: usize },
    SliceCols { start: usize, parent_cols: usize },
    Reshape { parent_shape: Vec<usize> },
    PairwiseEuclidean,
    SectionPool { lengths: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<VarId>,
    value: Tensor,
    shadow: Option<f64>,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Ordered record of operations with reverse-mode gradient propagation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    backward_ran: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), backward_ran: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check_owner(&self, var: VarId) -> usize {
        assert_eq!(var.tape, self.id, "VarId belongs to a different tape");
        assert!(var.index < self.nodes.len(), "VarId out of range");
        var.index
    }

    fn push(&mut self, op: Op, parents: Vec<VarId>, value: Tensor, shadow: Option<f64>) -> VarId {
        let requires_grad = parents.iter().any(|p| self.nodes[p.index].requires_grad);
        self.push_with_grad_flag(op, parents, value, shadow, requires_grad)
    }

    fn push_with_grad_flag(
        &mut self,
        op: Op,
        parents: Vec<VarId>,
        value: Tensor,
        shadow: Option<f64>,
        requires_grad: bool,
    ) -> VarId {
        let shadow = shadow.or_else(|| if value.is_scalar() { Some(value.data()[0] as f64) } else { None });
        self.nodes.push(Node { op, parents, value, shadow, requires_grad, grad: None });
        VarId { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn node(&self, var: VarId) -> &Node {
        let idx = self.check_owner(var);
        &self.nodes[idx]
    }

    /// Trainable leaf: gradients accumulate here during [`Tape::backward`].
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.push_with_grad_flag(Op::Leaf, vec![], value, None, true)
    }

    /// Non-trainable leaf: treated as a constant by backward.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push_with_grad_flag(Op::Leaf, vec![], value, None, false)
    }

    /// Recorded value of a variable.
    pub fn value(&self, var: VarId) -> &Tensor {
        &self.node(var).value
    }

    /// Gradient of the last backward pass, if one reached this variable.
    pub fn grad(&self, var: VarId) -> Option<&Tensor> {
        self.node(var).grad.as_ref()
    }

    /// Scalar value in float64 precision (shadow when available).
    pub fn scalar_f64(&self, var: VarId) -> Result<f64, NumericsError> {
        let node = self.node(var);
        if !node.value.is_scalar() {
            return Err(NumericsError::shape("Tape::scalar_f64", format!("shape {:?} is not scalar", node.value.shape())));
        }
        Ok(node.shadow.unwrap_or(node.value.data()[0] as f64))
    }

    /// Clears gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_ran = false;
    }

    fn shadow_of(&self, var: VarId) -> Option<f64> {
        self.nodes[var.index].shadow
    }

    fn binary_shapes(&self, op: &'static str, a: VarId, b: VarId) -> Result<(), NumericsError> {
        self.check_owner(a);
        self.check_owner(b);
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(NumericsError::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    /// Elementwise `a + b`.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.binary_shapes("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let shadow = scalar_shadow2(self, a, b, |x, y| x + y);
        Ok(self.push(Op::Add, vec![a, b], value, shadow))
    }

    /// Elementwise `a - b`.
    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.binary_shapes("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let shadow = scalar_shadow2(self, a, b, |x, y| x - y);
        Ok(self.push(Op::Sub, vec![a, b], value, shadow))
    }

    /// Elementwise (Hadamard) `a * b`.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.binary_shapes("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let shadow = scalar_shadow2(self, a, b, |x, y| x * y);
        Ok(self.push(Op::Mul, vec![a, b], value, shadow))
    }

    /// `a + c` for a float constant `c`.
    pub fn add_scalar(&mut self, a: VarId, c: f32) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let value = map(self.value(a), |x| x + c);
        let shadow = self.shadow_of(a).map(|s| s + c as f64);
        Ok(self.push(Op::AddScalar, vec![a], value, shadow))
    }

    /// `a * c` for a float constant `c`.
    pub fn mul_scalar(&mut self, a: VarId, c: f32) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let value = map(self.value(a), |x| x * c);
        let shadow = self.shadow_of(a).map(|s| s * c as f64);
        Ok(self.push(Op::MulScalar(c), vec![a], value, shadow))
    }

    /// `a / c` for a nonzero float constant `c`.
    pub fn div_scalar(&mut self, a: VarId, c: f32) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        if c == 0.0 || !c.is_finite() {
            return Err(NumericsError::arg("div_scalar", format!("divisor must be finite and nonzero, got {c}")));
        }
        let value = map(self.value(a), |x| x / c);
        let shadow = self.shadow_of(a).map(|s| s / c as f64);
        Ok(self.push(Op::DivScalar(c), vec![a], value, shadow))
    }

    /// Matrix product of rank-2 tensors `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        self.check_owner(b);
        let (value, shadow) = kernel_matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], value, shadow))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let value = kernel_transpose(self.value(a))?;
        Ok(self.push(Op::Transpose, vec![a], value, None))
    }

    /// Elementwise `max(a, 0)`.
    pub fn relu(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let value = map(self.value(a), |x| x.max(0.0));
        let shadow = self.shadow_of(a).map(|s| s.max(0.0));
        Ok(self.push(Op::Relu, vec![a], value, shadow))
    }

    /// Elementwise square root of `max(a, 0)`.
    pub fn sqrt(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let value = map(self.value(a), |x| x.max(0.0).sqrt());
        let shadow = self.shadow_of(a).map(|s| s.max(0.0).sqrt());
        Ok(self.push(Op::Sqrt, vec![a], value, shadow))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum_all(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let acc: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let value = Tensor::scalar(acc as f32);
        Ok(self.push(Op::SumAll, vec![a], value, Some(acc)))
    }

    /// Adds a `[d]` bias vector to every row of an `[n,d]` matrix.
    pub fn add_row_broadcast(&mut self, a: VarId, bias: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        self.check_owner(bias);
        let (n, d) = self.value(a).dims2()?;
        let bshape = self.value(bias).shape();
        if bshape != [d] {
            return Err(NumericsError::shape("add_row_broadcast", format!("bias {bshape:?} vs row width {d}")));
        }
        let av = self.value(a).data();
        let bv = self.value(bias).data();
        let mut out = Vec::with_capacity(n * d);
        for row in 0..n {
            for col in 0..d {
                out.push(av[row * d + col] + bv[col]);
            }
        }
        let value = Tensor::new(out, &[n, d])?;
        Ok(self.push(Op::AddRowBroadcast, vec![a, bias], value, None))
    }

    /// Outer sum `out[i,j] = u[i] + v[j]` of two rank-1 tensors.
    pub fn add_outer(&mut self, u: VarId, v: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(u);
        self.check_owner(v);
        let (us, vs) = (self.value(u).shape(), self.value(v).shape());
        if us.len() != 1 || vs.len() != 1 {
            return Err(NumericsError::shape("add_outer", format!("expected rank-1 inputs, got {us:?} and {vs:?}")));
        }
        let (n, m) = (us[0], vs[0]);
        let ud = self.value(u).data();
        let vd = self.value(v).data();
        let mut out = Vec::with_capacity(n * m);
        for &ui in ud {
            for &vj in vd {
                out.push(ui + vj);
            }
        }
        let value = Tensor::new(out, &[n, m])?;
        Ok(self.push(Op::AddOuter, vec![u, v], value, None))
    }

    /// Temperature softmax over the last axis with a {0,1} mask; masked
    /// entries are exactly zero in the output.
    pub fn masked_softmax(&mut self, a: VarId, mask: &Tensor, temperature: f32) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let value = kernel_masked_softmax(self.value(a), mask, temperature)?;
        Ok(self.push(Op::MaskedSoftmax { temperature }, vec![a], value, None))
    }

    /// Per-row `log sum exp` over unmasked entries of an `[n,m]` matrix,
    /// returned as a rank-1 `[n]` tensor. Fully masked rows yield `0.0` and
    /// propagate no gradient; callers must not give such rows weight.
    pub fn masked_logsumexp_rows(&mut self, a: VarId, mask: &Tensor) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let value = kernel_masked_logsumexp(self.value(a), mask)?;
        let mask = mask.clone();
        Ok(self.push(Op::MaskedLogsumexpRows { mask }, vec![a], value, None))
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, a: VarId, gain: VarId, bias: VarId, eps: f32) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        self.check_owner(gain);
        self.check_owner(bias);
        if eps <= 0.0 {
            return Err(NumericsError::arg("layer_norm", format!("eps must be positive, got {eps}")));
        }
        let (_, d) = self.value(a).dims2()?;
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(NumericsError::shape(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} vs row width {d}",
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let value = kernel_layer_norm(self.value(a), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(Op::LayerNorm { eps }, vec![a, gain, bias], value, None))
    }

    /// Scales every row of an `[n,d]` matrix to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let eps = 1e-12_f32;
        let value = kernel_l2_normalize(self.value(a), eps)?;
        Ok(self.push(Op::L2NormalizeRows { eps }, vec![a], value, None))
    }

    /// Stacks rank-2 tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::arg("concat_rows", "need at least one input"));
        }
        for p in parts {
            self.check_owner(*p);
        }
        let (_, cols) = self.value(parts[0]).dims2()?;
        let mut row_counts = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if c != cols {
                return Err(NumericsError::shape("concat_rows", format!("column widths differ: {cols} vs {c}")));
            }
            row_counts.push(r);
            data.extend_from_slice(self.value(*p).data());
        }
        let total: usize = row_counts.iter().sum();
        let value = Tensor::new(data, &[total, cols])?;
        Ok(self.push(Op::ConcatRows { row_counts }, parts.to_vec(), value, None))
    }

    /// Concatenates rank-2 tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[VarId]) -> Result<VarId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::arg("concat_cols", "need at least one input"));
        }
        for p in parts {
            self.check_owner(*p);
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut col_counts = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.value(*p).dims2()?;
            if r != rows {
                return Err(NumericsError::shape("concat_cols", format!("row counts differ: {rows} vs {r}")));
            }
            col_counts.push(c);
        }
        let total: usize = col_counts.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for row in 0..rows {
            for (p, c) in parts.iter().zip(&col_counts) {
                let v = self.value(*p);
                data.extend_from_slice(&v.data()[row * c..(row + 1) * c]);
            }
        }
        let value = Tensor::new(data, &[rows, total])?;
        Ok(self.push(Op::ConcatCols { col_counts }, parts.to_vec(), value, None))
    }

    /// Contiguous row range `[start, start+len)` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let (rows, cols) = self.value(a).dims2()?;
        if len == 0 || start + len > rows {
            return Err(NumericsError::arg("slice_rows", format!("range {start}..{} out of {rows} rows", start + len)));
        }
        let data = self.value(a).data()[start * cols..(start + len) * cols].to_vec();
        let value = Tensor::new(data, &[len, cols])?;
        Ok(self.push(Op::SliceRows { start, parent_rows: rows }, vec![a], value, None))
    }

    /// Contiguous column range `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: VarId, start: usize, len: usize) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let (rows, cols) = self.value(a).dims2()?;
        if len == 0 || start + len > cols {
            return Err(NumericsError::arg("slice_cols", format!("range {start}..{} out of {cols} cols", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for row in 0..rows {
            data.extend_from_slice(&src[row * cols + start..row * cols + start + len]);
        }
        let value = Tensor::new(data, &[rows, len])?;
        Ok(self.push(Op::SliceCols { start, parent_cols: cols }, vec![a], value, None))
    }

    /// Same elements under a new shape.
    pub fn reshape(&mut self, a: VarId, shape: &[usize]) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let parent_shape = self.value(a).shape().to_vec();
        let value = self.value(a).reshaped(shape)?;
        let shadow = self.shadow_of(a).filter(|_| value.is_scalar());
        Ok(self.push(Op::Reshape { parent_shape }, vec![a], value, shadow))
    }

    /// Euclidean distance matrix `out[i,j] = ||a_i - b_j||` between the rows
    /// of `[n,d]` and `[m,d]` matrices.
    pub fn pairwise_euclidean(&mut self, a: VarId, b: VarId) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        self.check_owner(b);
        let value = kernel_pairwise_euclidean(self.value(a), self.value(b))?;
        Ok(self.push(Op::PairwiseEuclidean, vec![a, b], value, None))
    }

    /// Pools an `[n,d]` sequence into a `[1,d]` embedding where the rows are
    /// grouped into consecutive sections of the given lengths and every
    /// section contributes equally regardless of its length:
    /// `out = sum_l sum_{j in l} x_{l,j} / (len_l * n_sections)`.
    pub fn section_pool(&mut self, a: VarId, lengths: &[usize]) -> Result<VarId, NumericsError> {
        self.check_owner(a);
        let (rows, _) = self.value(a).dims2()?;
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(NumericsError::arg("section_pool", "every section must have at least one row"));
        }
        let total: usize = lengths.iter().sum();
        if total != rows {
            return Err(NumericsError::shape("section_pool", format!("section lengths sum to {total} but input has {rows} rows")));
        }
        let value = kernel_section_pool(self.value(a), lengths)?;
        Ok(self.push(Op::SectionPool { lengths: lengths.to_vec() }, vec![a], value, None))
    }

    /// Propagates gradients from a scalar loss back to every parameter leaf.
    ///
    /// Errors if the loss is not a scalar or if backward already ran on this
    /// tape without an intervening [`Tape::reset_grads`].
    pub fn backward(&mut self, loss: VarId) -> Result<(), NumericsError> {
        let loss_idx = self.check_owner(loss);
        if self.backward_ran {
            return Err(NumericsError::BackwardAlreadyRan);
        }
        self.backward_ran = true;
        if !self.nodes[loss_idx].value.is_scalar() {
            return Err(NumericsError::NonScalarLoss(self.nodes[loss_idx].value.shape().to_vec()));
        }
        if !self.nodes[loss_idx].requires_grad {
            return Ok(());
        }
        self.nodes[loss_idx].grad = Some(Tensor::scalar(1.0));
        for i in (0..=loss_idx).rev() {
            let (head, tail) = self.nodes.split_at_mut(i);
            let node = &tail[0];
            if !node.requires_grad || node.parents.is_empty() || node.grad.is_none() {
                continue;
            }
            let grad = node.grad.as_ref().expect("checked above");
            let pvals: Vec<&Tensor> = node.parents.iter().map(|p| &head[p.index].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|p| head[p.index].requires_grad).collect();
            let contribs = backward_op(&node.op, &node.value, grad, &pvals, &needs)?;
            for (pid, contrib) in node.parents.iter().zip(contribs) {
                if let Some(c) = contrib {
                    let parent = &mut head[pid.index];
                    match &mut parent.grad {
                        Some(g) => add_assign(g, &c),
                        None => parent.grad = Some(c),
                    }
                }
            }
        }
        Ok(())
    }
}

/// Temperature softmax over the last axis with a {0,1} mask, as a plain
/// tensor function: masked entries are exactly zero, every unmasked row sums
/// to one, and a fully masked row is an error.
pub fn masked_softmax(logits: &Tensor, mask: &Tensor, temperature: f32) -> Result<Tensor, NumericsError> {
    kernel_masked_softmax(logits, mask, temperature)
}

fn map(t: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor::new(t.data().iter().map(|&x| f(x)).collect(), t.shape()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(data, a.shape()).expect("same shape")
}

fn scalar_shadow2(tape: &Tape, a: VarId, b: VarId, f: impl Fn(f64, f64) -> f64) -> Option<f64> {
    match (tape.shadow_of(a), tape.shadow_of(b)) {
        (Some(x), Some(y)) => Some(f(x, y)),
        _ => None,
    }
}

fn add_assign(acc: &mut Tensor, rhs: &Tensor) {
    debug_assert_eq!(acc.shape(), rhs.shape(), "gradient shape mismatch");
    let dst = acc.data_mut();
    for (d, &s) in dst.iter_mut().zip(rhs.data().iter()) {
        *d += s;
    }
}

/// Interprets a tensor as rows over its last axis: `([rows, width])`.
fn as_rows(t: &Tensor) -> (usize, usize) {
    let shape = t.shape();
    let width = *shape.last().expect("non-empty shape");
    (t.numel() / width, width)
}

fn validate_mask(op: &'static str, value: &Tensor, mask: &Tensor) -> Result<(), NumericsError> {
    if mask.shape() != value.shape() {
        return Err(NumericsError::shape(op, format!("mask {:?} vs input {:?}", mask.shape(), value.shape())));
    }
    if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(NumericsError::arg(op, "mask entries must be exactly 0 or 1"));
    }
    Ok(())
}

fn kernel_matmul(a: &Tensor, b: &Tensor) -> Result<(Tensor, Option<f64>), NumericsError> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(NumericsError::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    let mut shadow = None;
    for i in 0..m {
        acc.iter_mut().for_each(|x| *x = 0.0);
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let avf = av as f64;
                let brow = &bd[p * n..(p + 1) * n];
                for (dst, &bv) in acc.iter_mut().zip(brow) {
                    *dst += avf * bv as f64;
                }
            }
        }
        for (dst, &src) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *dst = src as f32;
        }
        if m == 1 && n == 1 {
            shadow = Some(acc[0]);
        }
    }
    Ok((Tensor::new(out, &[m, n])?, shadow))
}

/// `a * b^T` without materializing the transpose: `[m,n] x [k,n] -> [m,k]`.
fn kernel_matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = a.dims2()?;
    let (k, n2) = b.dims2()?;
    if n != n2 {
        return Err(NumericsError::shape("matmul_nt", format!("[{m},{n}] x [{k},{n2}]^T")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f32; m * k];
    for i in 0..m {
        let arow = &ad[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let mut acc = 0.0f64;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x as f64 * y as f64;
            }
            out[i * k + p] = acc as f32;
        }
    }
    Tensor::new(out, &[m, k])
}

/// `a^T * b` without materializing the transpose: `[m,k] x [m,n] -> [k,n]`.
fn kernel_matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.dims2()?;
    let (m2, n) = b.dims2()?;
    if m != m2 {
        return Err(NumericsError::shape("matmul_tn", format!("[{m},{k}]^T x [{m2},{n}]")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut acc = vec![0.0f64; k * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let brow = &bd[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let avf = av as f64;
                let dst = &mut acc[p * n..(p + 1) * n];
                for (d, &bv) in dst.iter_mut().zip(brow) {
                    *d += avf * bv as f64;
                }
            }
        }
    }
    Tensor::new(acc.iter().map(|&x| x as f32).collect(), &[k, n])
}

fn kernel_transpose(a: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, n) = a.dims2()?;
    let ad = a.data();
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(out, &[n, m])
}

// `!(t > 0.0)` rather than `t <= 0.0`: the negation also rejects NaN.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
fn kernel_masked_softmax(logits: &Tensor, mask: &Tensor, temperature: f32) -> Result<Tensor, NumericsError> {
    validate_mask("masked_softmax", logits, mask)?;
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(NumericsError::arg("masked_softmax", format!("temperature must be positive and finite, got {temperature}")));
    }
    let (rows, width) = as_rows(logits);
    let xd = logits.data();
    let md = mask.data();
    let temp = temperature as f64;
    let mut out = vec![0.0f32; xd.len()];
    for r in 0..rows {
        let x = &xd[r * width..(r + 1) * width];
        let m = &md[r * width..(r + 1) * width];
        let mut mx = f64::NEG_INFINITY;
        for (xi, mi) in x.iter().zip(m) {
            if *mi == 1.0 {
                mx = mx.max(*xi as f64);
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(NumericsError::AllMasked { row: r });
        }
        let mut denom = 0.0f64;
        let mut exps = vec![0.0f64; width];
        for j in 0..width {
            if m[j] == 1.0 {
                let e = ((x[j] as f64 - mx) / temp).exp();
                exps[j] = e;
                denom += e;
            }
        }
        for j in 0..width {
            out[r * width + j] = if m[j] == 1.0 { (exps[j] / denom) as f32 } else { 0.0 };
        }
    }
    Tensor::new(out, logits.shape())
}

fn kernel_masked_logsumexp(x: &Tensor, mask: &Tensor) -> Result<Tensor, NumericsError> {
    validate_mask("masked_logsumexp_rows", x, mask)?;
    let (rows, width) = x.dims2()?;
    let xd = x.data();
    let md = mask.data();
    let mut out = vec![0.0f32; rows];
    for r in 0..rows {
        let xr = &xd[r * width..(r + 1) * width];
        let mr = &md[r * width..(r + 1) * width];
        let mut mx = f64::NEG_INFINITY;
        for (xi, mi) in xr.iter().zip(mr) {
            if *mi == 1.0 {
                mx = mx.max(*xi as f64);
            }
        }
        if mx == f64::NEG_INFINITY {
            out[r] = 0.0; // fully masked row: value is unused by contract
            continue;
        }
        let mut sum = 0.0f64;
        for (xi, mi) in xr.iter().zip(mr) {
            if *mi == 1.0 {
                sum += ((*xi as f64) - mx).exp();
            }
        }
        out[r] = (mx + sum.ln()) as f32;
    }
    Tensor::new(out, &[rows])
}

fn kernel_layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor, NumericsError> {
    let (rows, d) = x.dims2()?;
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for j in 0..d {
            let xhat = (xr[j] as f64 - mean) * inv;
            out[r * d + j] = (xhat * gd[j] as f64 + bd[j] as f64) as f32;
        }
    }
    Tensor::new(out, x.shape())
}

fn kernel_l2_normalize(x: &Tensor, eps: f32) -> Result<Tensor, NumericsError> {
    let (rows, d) = x.dims2()?;
    let xd = x.data();
    let mut out = vec![0.0f32; rows * d];
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let norm = xr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let denom = norm.max(eps as f64);
        for j in 0..d {
            out[r * d + j] = (xr[j] as f64 / denom) as f32;
        }
    }
    Tensor::new(out, x.shape())
}

fn kernel_pairwise_euclidean(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (n, d) = a.dims2()?;
    let (m, d2) = b.dims2()?;
    if d != d2 {
        return Err(NumericsError::shape("pairwise_euclidean", format!("row widths differ: {d} vs {d2}")));
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        let ar = &ad[i * d..(i + 1) * d];
        for j in 0..m {
            let br = &bd[j * d..(j + 1) * d];
            let mut acc = 0.0f64;
            for (&x, &y) in ar.iter().zip(br) {
                let diff = x as f64 - y as f64;
                acc += diff * diff;
            }
            out[i * m + j] = acc.sqrt() as f32;
        }
    }
    Tensor::new(out, &[n, m])
}

fn kernel_section_pool(x: &Tensor, lengths: &[usize]) -> Result<Tensor, NumericsError> {
    let (_, d) = x.dims2()?;
    let xd = x.data();
    let n_sections = lengths.len() as f64;
    let mut acc = vec![0.0f64; d];
    let mut offset = 0usize;
    for &len in lengths {
        let divisor = len as f64 * n_sections;
        let mut sec = vec![0.0f64; d];
        for row in offset..offset + len {
            for j in 0..d {
                sec[j] += xd[row * d + j] as f64;
            }
        }
        for j in 0..d {
            acc[j] += sec[j] / divisor;
        }
        offset += len;
    }
    Tensor::new(acc.iter().map(|&v| v as f32).collect(), &[1, d])
}

fn backward_op(
    op: &Op,
    value: &Tensor,
    grad: &Tensor,
    pvals: &[&Tensor],
    needs: &[bool],
) -> Result<Vec<Option<Tensor>>, NumericsError> {
    let gd = grad.data();
    let out = match op {
        Op::Leaf => vec![],
        Op::Add => vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| grad.clone()),
        ],
        Op::Sub => vec![
            needs[0].then(|| grad.clone()),
            needs[1].then(|| map(grad, |g| -g)),
        ],
        Op::Mul => vec![
            needs[0].then(|| zip_map(grad, pvals[1], |g, y| g * y)),
            needs[1].then(|| zip_map(grad, pvals[0], |g, x| g * x)),
        ],
        Op::AddScalar => vec![needs[0].then(|| grad.clone())],
        Op::MulScalar(c) => {
            let c = *c;
            vec![needs[0].then(|| map(grad, |g| g * c))]
        }
        Op::DivScalar(c) => {
            let c = *c;
            vec![needs[0].then(|| map(grad, |g| g / c))]
        }
        Op::Matmul => {
            let da = if needs[0] { Some(kernel_matmul_nt(grad, pvals[1])?) } else { None };
            let db = if needs[1] { Some(kernel_matmul_tn(pvals[0], grad)?) } else { None };
            vec![da, db]
        }
        Op::Transpose => {
            let da = if needs[0] { Some(kernel_transpose(grad)?) } else { None };
            vec![da]
        }
        Op::Relu => vec![needs[0].then(|| zip_map(grad, pvals[0], |g, x| if x > 0.0 { g } else { 0.0 }))],
        Op::Sqrt => {
            // Forward is sqrt(max(x, 0)); use subgradient zero at the clamp.
            vec![needs[0].then(|| {
                let data = gd
                    .iter()
                    .zip(pvals[0].data().iter().zip(value.data().iter()))
                    .map(|(&g, (&x, &y))| if x > 0.0 { g / (2.0 * y.max(1e-12)) } else { 0.0 })
                    .collect();
                Tensor::new(data, pvals[0].shape()).expect("same shape")
            })]
        }
        Op::SumAll => {
            let g0 = gd[0];
            vec![needs[0].then(|| map(pvals[0], |_| g0))]
        }
        Op::AddRowBroadcast => {
            let (n, d) = pvals[0].dims2()?;
            let dx = needs[0].then(|| grad.clone());
            let db = if needs[1] {
                let mut acc = vec![0.0f64; d];
                for row in 0..n {
                    for j in 0..d {
                        acc[j] += gd[row * d + j] as f64;
                    }
                }
                Some(Tensor::new(acc.iter().map(|&v| v as f32).collect(), &[d])?)
            } else {
                None
            };
            vec![dx, db]
        }
        Op::AddOuter => {
            let n = pvals[0].shape()[0];
            let m = pvals[1].shape()[0];
            let du = if needs[0] {
                let mut acc = vec![0.0f64; n];
                for i in 0..n {
                    for j in 0..m {
                        acc[i] += gd[i * m + j] as f64;
                    }
                }
                Some(Tensor::new(acc.iter().map(|&v| v as f32).collect(), &[n])?)
            } else {
                None
            };
            let dv = if needs[1] {
                let mut acc = vec![0.0f64; m];
                for i in 0..n {
                    for j in 0..m {
                        acc[j] += gd[i * m + j] as f64;
                    }
                }
                Some(Tensor::new(acc.iter().map(|&v| v as f32).collect(), &[m])?)
            } else {
                None
            };
            vec![du, dv]
        }
        Op::MaskedSoftmax { temperature } => {
            vec![needs[0].then(|| {
                let (rows, width) = as_rows(value);
                let yd = value.data();
                let temp = *temperature as f64;
                let mut dx = vec![0.0f32; yd.len()];
                for r in 0..rows {
                    let y = &yd[r * width..(r + 1) * width];
                    let g = &gd[r * width..(r + 1) * width];
                    let dot: f64 = y.iter().zip(g).map(|(&yi, &gi)| yi as f64 * gi as f64).sum();
                    for j in 0..width {
                        dx[r * width + j] = ((y[j] as f64 * (g[j] as f64 - dot)) / temp) as f32;
                    }
                }
                Tensor::new(dx, value.shape()).expect("same shape")
            })]
        }
        Op::MaskedLogsumexpRows { mask } => {
            vec![needs[0].then(|| {
                let (rows, width) = pvals[0].dims2().expect("validated in forward");
                let xd = pvals[0].data();
                let md = mask.data();
                let lse = value.data();
                let mut dx = vec![0.0f32; rows * width];
                for r in 0..rows {
                    let gr = gd[r] as f64;
                    if gr == 0.0 {
                        continue;
                    }
                    for j in 0..width {
                        if md[r * width + j] == 1.0 {
                            let p = ((xd[r * width + j] as f64) - lse[r] as f64).exp();
                            dx[r * width + j] = (gr * p) as f32;
                        }
                    }
                }
                Tensor::new(dx, pvals[0].shape()).expect("same shape")
            })]
        }
        Op::LayerNorm { eps } => {
            let (rows, d) = pvals[0].dims2()?;
            let xd = pvals[0].data();
            let gaind = pvals[1].data();
            let epsf = *eps as f64;
            let mut dx = vec![0.0f32; rows * d];
            let mut dgain = vec![0.0f64; d];
            let mut dbias = vec![0.0f64; d];
            for r in 0..rows {
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &gd[r * d..(r + 1) * d];
                let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                let var = xr.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + epsf).sqrt();
                let mut m1 = 0.0f64;
                let mut m2 = 0.0f64;
                let mut xhat = vec![0.0f64; d];
                for j in 0..d {
                    xhat[j] = (xr[j] as f64 - mean) * inv;
                    let a = gr[j] as f64 * gaind[j] as f64;
                    m1 += a;
                    m2 += a * xhat[j];
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let a = gr[j] as f64 * gaind[j] as f64;
                    dx[r * d + j] = ((a - m1 - xhat[j] * m2) * inv) as f32;
                    dgain[j] += gr[j] as f64 * xhat[j];
                    dbias[j] += gr[j] as f64;
                }
            }
            vec![
                needs[0].then(|| Tensor::new(dx, pvals[0].shape()).expect("same shape")),
                needs[1]
                    .then(|| Tensor::new(dgain.iter().map(|&v| v as f32).collect(), &[d]).expect("same shape")),
                needs[2]
                    .then(|| Tensor::new(dbias.iter().map(|&v| v as f32).collect(), &[d]).expect("same shape")),
            ]
        }
        Op::L2NormalizeRows { eps } => {
            vec![needs[0].then(|| {
                let (rows, d) = pvals[0].dims2().expect("validated in forward");
                let xd = pvals[0].data();
                let yd = value.data();
                let epsf = *eps as f64;
                let mut dx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let xr = &xd[r * d..(r + 1) * d];
                    let yr = &yd[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let norm = xr.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    if norm > epsf {
                        let dot: f64 = gr.iter().zip(yr).map(|(&g, &y)| g as f64 * y as f64).sum();
                        for j in 0..d {
                            dx[r * d + j] = ((gr[j] as f64 - yr[j] as f64 * dot) / norm) as f32;
                        }
                    } else {
                        for j in 0..d {
                            dx[r * d + j] = (gr[j] as f64 / epsf) as f32;
                        }
                    }
                }
                Tensor::new(dx, pvals[0].shape()).expect("same shape")
            })]
        }
        Op::ConcatRows { row_counts } => {
            let (_, cols) = value.dims2()?;
            let mut offset = 0usize;
            let mut grads = Vec::with_capacity(row_counts.len());
            for (idx, &rc) in row_counts.iter().enumerate() {
                let piece = needs[idx].then(|| {
                    Tensor::new(gd[offset * cols..(offset + rc) * cols].to_vec(), &[rc, cols]).expect("slice")
                });
                grads.push(piece);
                offset += rc;
            }
            grads
        }
        Op::ConcatCols { col_counts } => {
            let (rows, _) = value.dims2()?;
            let total: usize = col_counts.iter().sum();
            let mut grads = Vec::with_capacity(col_counts.len());
            let mut offset = 0usize;
            for (idx, &cc) in col_counts.iter().enumerate() {
                let piece = needs[idx].then(|| {
                    let mut data = Vec::with_capacity(rows * cc);
                    for row in 0..rows {
                        data.extend_from_slice(&gd[row * total + offset..row * total + offset + cc]);
                    }
                    Tensor::new(data, &[rows, cc]).expect("slice")
                });
                grads.push(piece);
                offset += cc;
            }
            grads
        }
        Op::SliceRows { start, parent_rows } => {
            vec![needs[0].then(|| {
                let (rows, cols) = value.dims2().expect("validated in forward");
                let mut data = vec![0.0f32; parent_rows * cols];
                data[start * cols..(start + rows) * cols].copy_from_slice(gd);
                Tensor::new(data, &[*parent_rows, cols]).expect("padded")
            })]
        }
        Op::SliceCols { start, parent_cols } => {
            vec![needs[0].then(|| {
                let (rows, cols) = value.dims2().expect("validated in forward");
                let mut data = vec![0.0f32; rows * parent_cols];
                for row in 0..rows {
                    data[row * parent_cols + start..row * parent_cols + start + cols]
                        .copy_from_slice(&gd[row * cols..(row + 1) * cols]);
                }
                Tensor::new(data, &[rows, *parent_cols]).expect("padded")
            })]
        }
        Op::Reshape { parent_shape } => {
            vec![needs[0].then(|| grad.reshaped(parent_shape).expect("same element count"))]
        }
        Op::PairwiseEuclidean => {
            let (n, d) = pvals[0].dims2()?;
            let (m, _) = pvals[1].dims2()?;
            let ad = pvals[0].data();
            let bd = pvals[1].data();
            let dist = value.data();
            let mut da = vec![0.0f64; n * d];
            let mut db = vec![0.0f64; m * d];
            for i in 0..n {
                for j in 0..m {
                    let g = gd[i * m + j] as f64;
                    let dij = dist[i * m + j] as f64;
                    if g == 0.0 || dij <= 1e-12 {
                        continue; // coincident points carry subgradient zero
                    }
                    let scale = g / dij;
                    for t in 0..d {
                        let diff = ad[i * d + t] as f64 - bd[j * d + t] as f64;
                        da[i * d + t] += scale * diff;
                        db[j * d + t] -= scale * diff;
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::new(da.iter().map(|&v| v as f32).collect(), &[n, d]).expect("shape")),
                needs[1].then(|| Tensor::new(db.iter().map(|&v| v as f32).collect(), &[m, d]).expect("shape")),
            ]
        }
        Op::SectionPool { lengths } => {
            vec![needs[0].then(|| {
                let (rows, d) = pvals[0].dims2().expect("validated in forward");
                let n_sections = lengths.len() as f64;
                let mut dx = vec![0.0f32; rows * d];
                let mut offset = 0usize;
                for &len in lengths {
                    let w = 1.0 / (len as f64 * n_sections);
                    for row in offset..offset + len {
                        for j in 0..d {
                            dx[row * d + j] = (gd[j] as f64 * w) as f32;
                        }
                    }
                    offset += len;
                }
                Tensor::new(dx, pvals[0].shape()).expect("same shape")
            })]
        }
    };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: &[f32]) -> Tensor {
        Tensor::new(data.to_vec(), &[data.len()]).unwrap()
    }

    fn t2(rows: usize, cols: usize, data: &[f32]) -> Tensor {
        Tensor::new(data.to_vec(), &[rows, cols]).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let id = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let out = tape.matmul(a, id).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_small_example() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t2(2, 1, &[1.0, 1.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).shape(), &[2, 1]);
        assert_eq!(tape.value(out).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 3, &[0.0; 6]));
        let b = tape.constant(t2(2, 2, &[0.0; 4]));
        assert!(tape.matmul(a, b).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0, -2.0, 3.5]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_with_self_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, NumericsError::NonScalarLoss(_)));
    }

    #[test]
    fn backward_twice_errors_until_reset() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0]));
        let loss = tape.sum_all(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(NumericsError::BackwardAlreadyRan)));
        tape.reset_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn gradient_accumulates_when_variable_is_reused() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[3.0]));
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[2.0]));
        let c = tape.constant(t1(&[5.0]));
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[5.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    #[should_panic(expected = "different tape")]
    fn using_a_var_from_another_tape_panics() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let xa = a.param(t1(&[1.0]));
        let _ = b.relu(xa);
    }

    #[test]
    fn masked_softmax_equal_logits_split_evenly() {
        let out = masked_softmax(&t1(&[0.3, 0.3]), &t1(&[1.0, 1.0]), 1.0).unwrap();
        assert_eq!(out.data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_softmax_masked_entries_are_exact_zero() {
        let out = masked_softmax(&t1(&[3.0, 1.0]), &t1(&[1.0, 0.0]), 1.0).unwrap();
        assert_eq!(out.data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_all_masked_row_errors() {
        let err = masked_softmax(&t2(2, 2, &[1.0, 2.0, 3.0, 4.0]), &t2(2, 2, &[1.0, 1.0, 0.0, 0.0]), 1.0)
            .unwrap_err();
        assert!(matches!(err, NumericsError::AllMasked { row: 1 }));
    }

    #[test]
    fn masked_softmax_rejects_bad_temperature_and_mask() {
        assert!(masked_softmax(&t1(&[1.0]), &t1(&[1.0]), 0.0).is_err());
        assert!(masked_softmax(&t1(&[1.0]), &t1(&[1.0]), -1.0).is_err());
        assert!(masked_softmax(&t1(&[1.0, 1.0]), &t1(&[1.0, 0.5]), 1.0).is_err());
    }

    #[test]
    fn masked_softmax_random_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let width = rng.gen_range(1..=8);
            let logits: Vec<f32> = (0..width).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut mask: Vec<f32> = (0..width).map(|_| if rng.gen_bool(0.6) { 1.0 } else { 0.0 }).collect();
            if mask.iter().all(|&m| m == 0.0) {
                mask[rng.gen_range(0..width)] = 1.0;
            }
            let temp = rng.gen_range(0.05..4.0f32);
            let out = masked_softmax(&t1(&logits), &t1(&mask), temp).unwrap();
            let sum: f64 = out.data().iter().map(|&x| x as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
            for (o, m) in out.data().iter().zip(&mask) {
                if *m == 0.0 {
                    assert_eq!(*o, 0.0);
                } else {
                    assert!(*o >= 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_temperature_rescaling_identity() {
        let logits = t1(&[0.4, -1.2, 2.0, 0.7]);
        let mask = t1(&[1.0, 1.0, 0.0, 1.0]);
        for c in [0.5f32, 2.0, 3.0] {
            let scaled: Vec<f32> = logits.data().iter().map(|&x| x / c).collect();
            let a = masked_softmax(&logits, &mask, 0.5 * c).unwrap();
            let b = masked_softmax(&t1(&scaled), &mask, 0.5).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-6, "temperature identity violated for c={c}");
        }
    }

    #[test]
    fn masked_softmax_survives_large_logits() {
        let out = masked_softmax(&t1(&[1e3, -1e3, 0.0]), &t1(&[1.0, 1.0, 1.0]), 0.01).unwrap();
        assert!(!out.has_non_finite());
        let sum: f64 = out.data().iter().map(|&x| x as f64).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn masked_softmax_gradient_matches_dense_softmax_jacobian() {
        // For mask = ones and temperature 1, dx = y * (g - <g, y>).
        let mut tape = Tape::new();
        let x = tape.param(t1(&[0.2, -0.4, 1.1]));
        let mask = t1(&[1.0, 1.0, 1.0]);
        let y = tape.masked_softmax(x, &mask, 1.0).unwrap();
        let w = tape.constant(t1(&[0.0, 1.0, 0.0]));
        let picked = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        let yv: Vec<f64> = tape.value(y).data().iter().map(|&v| v as f64).collect();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for j in 0..3 {
            let expect = yv[1] * (if j == 1 { 1.0 } else { 0.0 } - yv[j]);
            assert!((g.data()[j] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_constant_rows_stay_finite() {
        let mut tape = Tape::new();
        let x = tape.param(t2(2, 4, &[5.0; 8]));
        let gain = tape.param(t1(&[1.0; 4]));
        let bias = tape.param(t1(&[0.0; 4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert!(!tape.value(y).has_non_finite());
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(!tape.grad(x).unwrap().has_non_finite());
    }

    #[test]
    fn sqrt_clamps_negative_input_with_zero_subgradient() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[-4.0, 9.0]));
        let y = tape.sqrt(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 3.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert_eq!(g[0], 0.0);
        assert!((g[1] - 1.0 / 6.0).abs() < 1e-7);
    }

    #[test]
    fn add_outer_matches_naive() {
        let mut tape = Tape::new();
        let u = tape.param(t1(&[1.0, 2.0]));
        let v = tape.param(t1(&[10.0, 20.0, 30.0]));
        let out = tape.add_outer(u, v).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(u).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(tape.grad(v).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn pairwise_euclidean_matches_naive_f64() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let (n, m, d) = (4, 3, 6);
        let a: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f32> = (0..m * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let av = tape.constant(t2(n, d, &a));
        let bv = tape.constant(t2(m, d, &b));
        let dist = tape.pairwise_euclidean(av, bv).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0f64;
                for t in 0..d {
                    let diff = a[i * d + t] as f64 - b[j * d + t] as f64;
                    acc += diff * diff;
                }
                let expect = acc.sqrt() as f32;
                assert_eq!(tape.value(dist).get2(i, j), expect);
            }
        }
    }

    #[test]
    fn pairwise_euclidean_is_finite_at_coincident_points() {
        let mut tape = Tape::new();
        let a = tape.param(t2(1, 3, &[1.0, 2.0, 3.0]));
        let b = tape.constant(t2(1, 3, &[1.0, 2.0, 3.0]));
        let dist = tape.pairwise_euclidean(a, b).unwrap();
        assert_eq!(tape.value(dist).data(), &[0.0]);
        let loss = tape.sum_all(dist).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn section_pool_matches_naive_double_sum() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let lengths = [2usize, 5, 1];
        let d = 4usize;
        let n: usize = lengths.iter().sum();
        let data: Vec<f32> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(t2(n, d, &data));
        let pooled = tape.section_pool(x, &lengths).unwrap();
        let n_sections = lengths.len() as f64;
        for j in 0..d {
            let mut expect = 0.0f64;
            let mut offset = 0usize;
            for &len in &lengths {
                for row in offset..offset + len {
                    expect += data[row * d + j] as f64 / (len as f64 * n_sections);
                }
                offset += len;
            }
            assert!((tape.value(pooled).data()[j] as f64 - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn section_pool_contribution_is_invariant_to_repeating_a_section_row() {
        // One section holding k copies of the same row must contribute exactly
        // what a single copy contributes, bitwise.
        let row = [0.73f32, -1.9, 0.41];
        let other = [0.2f32, 0.3, -0.6];
        for k in [1usize, 2, 3, 5, 7] {
            let mut data = Vec::new();
            for _ in 0..k {
                data.extend_from_slice(&row);
            }
            data.extend_from_slice(&other);
            let mut tape = Tape::new();
            let x = tape.constant(t2(k + 1, 3, &data));
            let pooled = tape.section_pool(x, &[k, 1]).unwrap();
            let mut base_data = Vec::new();
            base_data.extend_from_slice(&row);
            base_data.extend_from_slice(&other);
            let mut base_tape = Tape::new();
            let bx = base_tape.constant(t2(2, 3, &base_data));
            let base = base_tape.section_pool(bx, &[1, 1]).unwrap();
            assert!(
                tape.value(pooled).bitwise_eq(base_tape.value(base)),
                "length-{k} repetition changed the pooled value"
            );
        }
    }

    #[test]
    fn section_pool_rejects_bad_lengths() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(3, 2, &[0.0; 6]));
        assert!(tape.section_pool(x, &[2, 2]).is_err());
        assert!(tape.section_pool(x, &[3, 0]).is_err());
        assert!(tape.section_pool(x, &[]).is_err());
    }

    #[test]
    fn masked_logsumexp_matches_naive_and_zeroes_masked_rows() {
        let x = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mask = t2(2, 3, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = tape.masked_logsumexp_rows(xv, &mask).unwrap();
        let expect = ((1.0f64).exp() + (3.0f64).exp()).ln();
        assert!((tape.value(out).data()[0] as f64 - expect).abs() < 1e-6);
        assert_eq!(tape.value(out).data()[1], 0.0);
        let loss = tape.sum_all(out).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(xv).unwrap();
        // Row 0 gradient is the masked softmax; row 1 is all zero.
        let p0 = (1.0f64 - expect).exp();
        let p2 = (3.0f64 - expect).exp();
        assert!((g.get2(0, 0) as f64 - p0).abs() < 1e-6);
        assert_eq!(g.get2(0, 1), 0.0);
        assert!((g.get2(0, 2) as f64 - p2).abs() < 1e-6);
        assert_eq!(g.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_and_slice_round_trip_with_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(t2(1, 2, &[1.0, 2.0]));
        let b = tape.param(t2(2, 2, &[3.0, 4.0, 5.0, 6.0]));
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let back = tape.slice_rows(cat, 1, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(b).data());
        let loss = tape.sum_all(back).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn concat_cols_and_slice_cols_round_trip() {
        let mut tape = Tape::new();
        let a = tape.param(t2(2, 1, &[1.0, 3.0]));
        let b = tape.param(t2(2, 2, &[10.0, 20.0, 30.0, 40.0]));
        let cat = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 10.0, 20.0, 3.0, 30.0, 40.0]);
        let cols = tape.slice_cols(cat, 1, 2).unwrap();
        assert_eq!(tape.value(cols).data(), tape.value(b).data());
        let loss = tape.sum_all(cols).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn l2_normalize_rows_produces_unit_rows_and_valid_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t2(2, 3, &[3.0, 0.0, 4.0, 0.0, 0.0, 0.0]));
        let y = tape.l2_normalize_rows(x).unwrap();
        assert_eq!(tape.value(y).row(0), &[0.6, 0.0, 0.8]);
        assert_eq!(tape.value(y).row(1), &[0.0, 0.0, 0.0]);
        let w = tape.constant(t2(2, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let picked = tape.mul(y, w).unwrap();
        let loss = tape.sum_all(picked).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        // d/dx of x0/||x|| at (3,0,4): (1 - y0^2)/||x||, -y0*y1/||x||, -y0*y2/||x||.
        assert!((g.get2(0, 0) - (1.0 - 0.36) / 5.0).abs() < 1e-6);
        assert!((g.get2(0, 2) - (-0.6 * 0.8) / 5.0).abs() < 1e-6);
        assert!(!g.has_non_finite());
    }

    #[test]
    fn scalar_f64_shadow_outprecisions_f32_sum() {
        let n = 4000usize;
        let data = vec![0.1f32; n];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(data, &[n]).unwrap());
        let s = tape.sum_all(x).unwrap();
        let shadow = tape.scalar_f64(s).unwrap();
        let exact: f64 = (0.1f32 as f64) * n as f64;
        assert!((shadow - exact).abs() < 1e-9, "shadow {shadow} vs exact {exact}");
    }

    #[test]
    fn div_scalar_rejects_zero() {
        let mut tape = Tape::new();
        let x = tape.param(t1(&[1.0]));
        assert!(tape.div_scalar(x, 0.0).is_err());
    }

    #[test]
    fn add_row_broadcast_adds_bias_and_sums_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.param(t1(&[10.0, 20.0, 30.0]));
        let y = tape.add_row_broadcast(x, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let loss = tape.sum_all(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }
}
