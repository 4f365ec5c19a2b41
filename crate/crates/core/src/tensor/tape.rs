//! The autograd tape: an ordered record of executed primitives.
//!
//! Ops are methods on [`Tape`]. Each call computes its result eagerly and,
//! when the tape is recording and at least one input is tape-linked,
//! appends one step holding whatever the reverse pass will need. A tape and
//! its tensors are confined to one thread; node ids are tape-local, so
//! tensors must never be fed to a different tape than the one that issued
//! their node.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels;
use super::{Mask, Tensor};

/// Index of a value node on the tape.
pub type NodeId = usize;

/// Records primitives as they execute and replays them in reverse for
/// gradients. Create with [`Tape::new`] for training or
/// [`Tape::inference`] for forward-only work (no recording overhead).
pub struct Tape {
    recording: bool,
    /// Element count per node, for gradient buffer allocation.
    sizes: RefCell<Vec<usize>>,
    steps: RefCell<Vec<Step>>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Tape {
        Tape { recording: true, sizes: RefCell::new(Vec::new()), steps: RefCell::new(Vec::new()) }
    }

    /// A non-recording tape: primitives compute forward values only and
    /// every output is a constant. Exactly the same code paths as training,
    /// minus the bookkeeping.
    pub fn inference() -> Tape {
        Tape { recording: false, sizes: RefCell::new(Vec::new()), steps: RefCell::new(Vec::new()) }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_steps(&self) -> usize {
        self.steps.borrow().len()
    }

    /// Watches a tensor: returns a copy registered as a leaf so that
    /// [`Tape::backward`] will report a gradient for it.
    pub fn var(&self, t: &Tensor) -> Tensor {
        let node = self.alloc(t.numel());
        Tensor::reuse(t.shape().to_vec(), t.shared_data(), node)
    }

    fn alloc(&self, numel: usize) -> Option<NodeId> {
        if !self.recording {
            return None;
        }
        let mut sizes = self.sizes.borrow_mut();
        sizes.push(numel);
        Some(sizes.len() - 1)
    }

    /// Fresh output node if any input participates in the tape.
    fn out_node(&self, inputs: &[Option<NodeId>], numel: usize) -> Option<NodeId> {
        if self.recording && inputs.iter().any(|n| n.is_some()) {
            self.alloc(numel)
        } else {
            None
        }
    }

    fn push(&self, out: Option<NodeId>, back: Back) {
        if let Some(out) = out {
            self.steps.borrow_mut().push(Step { out, back });
        }
    }

    // ── primitives ──────────────────────────────────────────────────────

    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = a.dims2("matmul");
        let (k2, n) = b.dims2("matmul");
        assert_eq!(
            k, k2,
            "matmul: inner dimensions disagree, lhs shape {:?} vs rhs shape {:?}",
            a.shape(),
            b.shape()
        );
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let out = self.out_node(&[a.node(), b.node()], data.len());
        self.push(
            out,
            Back::Matmul {
                a: a.node(),
                b: b.node(),
                a_data: a.shared_data(),
                b_data: b.shared_data(),
                m,
                k,
                n,
            },
        );
        Tensor::with_node(vec![m, n], data, out)
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(
            a.shape(),
            b.shape(),
            "add: operand shapes disagree, {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = self.out_node(&[a.node(), b.node()], data.len());
        self.push(out, Back::Add { a: a.node(), b: b.node() });
        Tensor::with_node(a.shape().to_vec(), data, out)
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` tensor.
    pub fn add_row(&self, x: &Tensor, bias: &Tensor) -> Tensor {
        let (m, n) = x.dims2("add_row");
        assert_eq!(
            bias.shape(),
            &[n],
            "add_row: bias shape {:?} does not match row width {n}",
            bias.shape()
        );
        let mut data = x.to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, b) in row.iter_mut().zip(bias.data()) {
                *v += b;
            }
        }
        let out = self.out_node(&[x.node(), bias.node()], data.len());
        self.push(out, Back::AddRow { x: x.node(), bias: bias.node(), n });
        Tensor::with_node(vec![m, n], data, out)
    }

    /// Elementwise product of two equally shaped tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(
            a.shape(),
            b.shape(),
            "mul: operand shapes disagree, {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
        let data: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = self.out_node(&[a.node(), b.node()], data.len());
        self.push(
            out,
            Back::Mul {
                a: a.node(),
                b: b.node(),
                a_data: a.shared_data(),
                b_data: b.shared_data(),
            },
        );
        Tensor::with_node(a.shape().to_vec(), data, out)
    }

    /// Scales every row of a `[m, n]` tensor by a `[n]` gain.
    pub fn mul_row(&self, x: &Tensor, gain: &Tensor) -> Tensor {
        let (m, n) = x.dims2("mul_row");
        assert_eq!(
            gain.shape(),
            &[n],
            "mul_row: gain shape {:?} does not match row width {n}",
            gain.shape()
        );
        let mut data = x.to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, g) in row.iter_mut().zip(gain.data()) {
                *v *= g;
            }
        }
        let out = self.out_node(&[x.node(), gain.node()], data.len());
        self.push(
            out,
            Back::MulRow {
                x: x.node(),
                gain: gain.node(),
                x_data: x.shared_data(),
                gain_data: gain.shared_data(),
                n,
            },
        );
        Tensor::with_node(vec![m, n], data, out)
    }

    /// Multiplies by a compile-time-constant factor.
    pub fn scale(&self, x: &Tensor, factor: f64) -> Tensor {
        self.affine(x, factor, 0.0)
    }

    /// `mul * x + add` with scalar constants.
    pub fn affine(&self, x: &Tensor, mul: f64, add: f64) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| mul * v + add).collect();
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::Affine { x: x.node(), mul });
        Tensor::with_node(x.shape().to_vec(), data, out)
    }

    /// Applies a different affine map to each row: `out[i, :] = mul[i] *
    /// x[i, :] + add[i]`. The coefficients are constants, not tape values.
    pub fn rowwise_affine(&self, x: &Tensor, mul: &[f64], add: &[f64]) -> Tensor {
        let (m, n) = x.dims2("rowwise_affine");
        assert_eq!(
            mul.len(),
            m,
            "rowwise_affine: {} multipliers for {m} rows (shape {:?})",
            mul.len(),
            x.shape()
        );
        assert_eq!(
            add.len(),
            m,
            "rowwise_affine: {} offsets for {m} rows (shape {:?})",
            add.len(),
            x.shape()
        );
        let mut data = x.to_vec();
        for (i, row) in data.chunks_exact_mut(n).enumerate() {
            for v in row.iter_mut() {
                *v = mul[i] * *v + add[i];
            }
        }
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::RowwiseAffine { x: x.node(), mul: mul.to_vec(), n });
        Tensor::with_node(vec![m, n], data, out)
    }

    /// Elementwise `e^x`.
    pub fn exp(&self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|v| v.exp()).collect();
        let out = self.out_node(&[x.node()], data.len());
        let t = Tensor::with_node(x.shape().to_vec(), data, out);
        self.push(out, Back::Exp { x: x.node(), y_data: t.shared_data() });
        t
    }

    /// Elementwise natural log; the input must be strictly positive.
    pub fn log(&self, x: &Tensor) -> Tensor {
        if let Some(bad) = x.data().iter().find(|v| **v <= 0.0) {
            panic!("log: input must be strictly positive, got {bad}");
        }
        let data: Vec<f64> = x.data().iter().map(|v| v.ln()).collect();
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::Log { x: x.node(), x_data: x.shared_data() });
        Tensor::with_node(x.shape().to_vec(), data, out)
    }

    /// Row sums of a `[m, n]` tensor, shaped `[m, 1]`.
    pub fn sum_axis(&self, x: &Tensor) -> Tensor {
        let (m, n) = x.dims2("sum_axis");
        let data: Vec<f64> = x.data().chunks_exact(n).map(|row| row.iter().sum()).collect();
        let out = self.out_node(&[x.node()], m);
        self.push(out, Back::SumAxis { x: x.node(), n });
        Tensor::with_node(vec![m, 1], data, out)
    }

    /// Row maxima of a `[m, n]` tensor, shaped `[m, 1]`. The gradient routes
    /// to the first occurrence of each row's maximum.
    pub fn max_axis(&self, x: &Tensor) -> Tensor {
        let (m, n) = x.dims2("max_axis");
        assert!(n > 0, "max_axis: rows are empty (shape {:?})", x.shape());
        let mut data = Vec::with_capacity(m);
        let mut argmax = Vec::with_capacity(m);
        for row in x.data().chunks_exact(n) {
            let (mut best_i, mut best) = (0usize, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            data.push(best);
            argmax.push(best_i);
        }
        let out = self.out_node(&[x.node()], m);
        self.push(out, Back::MaxAxis { x: x.node(), argmax, n });
        Tensor::with_node(vec![m, 1], data, out)
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self, x: &Tensor) -> Tensor {
        let total: f64 = x.data().iter().sum();
        let out = self.out_node(&[x.node()], 1);
        self.push(out, Back::SumAll { x: x.node() });
        Tensor::with_node(Vec::new(), vec![total], out)
    }

    /// Mean of every element, as a rank-0 tensor.
    pub fn mean_all(&self, x: &Tensor) -> Tensor {
        let n = x.numel() as f64;
        let sum = self.sum_all(x);
        self.scale(&sum, 1.0 / n)
    }

    /// `a - b`, elementwise.
    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        self.add(a, &self.scale(b, -1.0))
    }

    /// Clamps into `[lo, hi]`. The gradient passes only where the input was
    /// strictly inside the interval; values sitting exactly on a boundary
    /// count as clipped.
    pub fn clip(&self, x: &Tensor, lo: f64, hi: f64) -> Tensor {
        assert!(lo <= hi, "clip: empty interval [{lo}, {hi}]");
        let data: Vec<f64> = x.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::Clip { x: x.node(), x_data: x.shared_data(), lo, hi });
        Tensor::with_node(x.shape().to_vec(), data, out)
    }

    /// Row-wise standardization `(x - mean) / sqrt(var + eps)` of a
    /// `[m, n]` tensor, with biased variance. Affine gain/bias are applied
    /// separately by the caller (see [`Tape::mul_row`] / [`Tape::add_row`]).
    pub fn layer_norm(&self, x: &Tensor, eps: f64) -> Tensor {
        let (m, n) = x.dims2("layer_norm");
        assert!(n > 0, "layer_norm: rows are empty (shape {:?})", x.shape());
        let mut data = x.to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in data.chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = self.out_node(&[x.node()], data.len());
        let t = Tensor::with_node(vec![m, n], data, out);
        self.push(out, Back::LayerNorm { x: x.node(), y_data: t.shared_data(), inv_std, n });
        t
    }

    /// Tanh-form GELU activation.
    pub fn gelu(&self, x: &Tensor) -> Tensor {
        let data: Vec<f64> = x.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::Gelu { x: x.node(), x_data: x.shared_data() });
        Tensor::with_node(x.shape().to_vec(), data, out)
    }

    /// Gathers rows of an embedding table: `[v, d]` table and `len` ids give
    /// a `[len, d]` tensor. Gradients scatter-add back into the table.
    pub fn embedding_lookup(&self, table: &Tensor, ids: &[usize]) -> Tensor {
        let (v, d) = table.dims2("embedding_lookup");
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < v, "embedding_lookup: id {id} out of range for table with {v} rows");
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let out = self.out_node(&[table.node()], data.len());
        self.push(out, Back::Embedding { table: table.node(), ids: Rc::new(ids.to_vec()), d });
        Tensor::with_node(vec![ids.len(), d], data, out)
    }

    /// Matrix transpose of a `[m, n]` tensor.
    pub fn transpose(&self, x: &Tensor) -> Tensor {
        let (m, n) = x.dims2("transpose");
        let data = kernels::transpose(x.data(), m, n);
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::Transpose { x: x.node(), m, n });
        Tensor::with_node(vec![n, m], data, out)
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, x: &Tensor, shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            x.numel(),
            "reshape: cannot view shape {:?} as {:?}",
            x.shape(),
            shape
        );
        let out = self.out_node(&[x.node()], numel);
        self.push(out, Back::Reshape { x: x.node() });
        Tensor::reuse(shape.to_vec(), x.shared_data(), out)
    }

    /// Writes `value` into every masked entry of a `[m, n]` tensor. Masked
    /// entries carry no gradient.
    pub fn masked_fill(&self, x: &Tensor, mask: &Mask, value: f64) -> Tensor {
        let (m, n) = x.dims2("masked_fill");
        assert_eq!(
            (mask.rows(), mask.cols()),
            (m, n),
            "masked_fill: mask [{}, {}] does not match tensor shape {:?}",
            mask.rows(),
            mask.cols(),
            x.shape()
        );
        let mut data = x.to_vec();
        for (v, &masked) in data.iter_mut().zip(mask.flags()) {
            if masked {
                *v = value;
            }
        }
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::MaskedFill { x: x.node(), masked: Rc::new(mask.flags().to_vec()) });
        Tensor::with_node(vec![m, n], data, out)
    }

    /// Numerically stable softmax of every row of a `[m, n]` tensor.
    /// `-inf` entries (from [`Tape::masked_fill`]) come out as exact zeros.
    pub fn softmax_rows(&self, x: &Tensor) -> Tensor {
        let (m, n) = x.dims2("softmax_rows");
        assert!(n > 0, "softmax_rows: rows are empty (shape {:?})", x.shape());
        let mut data = x.to_vec();
        for row in data.chunks_exact_mut(n) {
            kernels::softmax_row_in_place(row);
        }
        let out = self.out_node(&[x.node()], data.len());
        let t = Tensor::with_node(vec![m, n], data, out);
        self.push(out, Back::SoftmaxRows { x: x.node(), p_data: t.shared_data(), n });
        t
    }

    /// Mean token-level cross-entropy between `[m, n]` logits and `m`
    /// target class ids, as a rank-0 tensor.
    pub fn cross_entropy(&self, logits: &Tensor, targets: &[usize]) -> Tensor {
        let (m, n) = logits.dims2("cross_entropy");
        assert!(m > 0, "cross_entropy: no rows to score");
        assert_eq!(
            targets.len(),
            m,
            "cross_entropy: {} targets for {m} logit rows",
            targets.len()
        );
        let mut probs = logits.to_vec();
        let mut total = 0.0;
        for (row, &target) in probs.chunks_exact_mut(n).zip(targets) {
            assert!(target < n, "cross_entropy: target {target} out of range for {n} classes");
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += log_sum - row[target];
            for v in row.iter_mut() {
                *v = (*v - log_sum).exp();
            }
        }
        let out = self.out_node(&[logits.node()], 1);
        self.push(
            out,
            Back::CrossEntropy {
                logits: logits.node(),
                probs,
                targets: Rc::new(targets.to_vec()),
                n,
            },
        );
        Tensor::with_node(Vec::new(), vec![total / m as f64], out)
    }

    /// Contiguous row slice `[start, start + len)` of a `[m, n]` tensor.
    pub fn slice_rows(&self, x: &Tensor, start: usize, len: usize) -> Tensor {
        let (m, n) = x.dims2("slice_rows");
        assert!(
            start + len <= m,
            "slice_rows: rows [{start}, {}) out of range for shape {:?}",
            start + len,
            x.shape()
        );
        let data = x.data()[start * n..(start + len) * n].to_vec();
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::SliceRows { x: x.node(), start, n });
        Tensor::with_node(vec![len, n], data, out)
    }

    /// Contiguous column slice `[start, start + len)` of a `[m, n]` tensor.
    pub fn slice_cols(&self, x: &Tensor, start: usize, len: usize) -> Tensor {
        let (m, n) = x.dims2("slice_cols");
        assert!(
            start + len <= n,
            "slice_cols: columns [{start}, {}) out of range for shape {:?}",
            start + len,
            x.shape()
        );
        let mut data = Vec::with_capacity(m * len);
        for row in x.data().chunks_exact(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::SliceCols { x: x.node(), start, src_cols: n, len });
        Tensor::with_node(vec![m, len], data, out)
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: nothing to concatenate");
        let m = parts[0].dims2("concat_cols").0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (rows, cols) = p.dims2("concat_cols");
                assert_eq!(
                    rows, m,
                    "concat_cols: row counts disagree, {m} vs shape {:?}",
                    p.shape()
                );
                cols
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (part, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&part.data()[r * w..(r + 1) * w]);
            }
        }
        let nodes: Vec<Option<NodeId>> = parts.iter().map(|p| p.node()).collect();
        let out = self.out_node(&nodes, data.len());
        self.push(out, Back::ConcatCols { parts: nodes.iter().copied().zip(widths).collect() });
        Tensor::with_node(vec![m, total], data, out)
    }

    /// Concatenates 2-d tensors with equal column counts along rows.
    pub fn concat_rows(&self, parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: nothing to concatenate");
        let n = parts[0].dims2("concat_rows").1;
        let mut data = Vec::new();
        let mut heights = Vec::with_capacity(parts.len());
        for part in parts {
            let (rows, cols) = part.dims2("concat_rows");
            assert_eq!(
                cols, n,
                "concat_rows: column counts disagree, {n} vs shape {:?}",
                part.shape()
            );
            data.extend_from_slice(part.data());
            heights.push(rows);
        }
        let m: usize = heights.iter().sum();
        let nodes: Vec<Option<NodeId>> = parts.iter().map(|p| p.node()).collect();
        let out = self.out_node(&nodes, data.len());
        self.push(
            out,
            Back::ConcatRows { parts: nodes.iter().copied().zip(heights).collect(), n },
        );
        Tensor::with_node(vec![m, n], data, out)
    }

    /// Gathers rows of a `[m, n]` tensor by index (repeats allowed);
    /// gradients scatter-add back.
    pub fn gather_rows(&self, x: &Tensor, idx: &[usize]) -> Tensor {
        let (m, n) = x.dims2("gather_rows");
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather_rows: row {i} out of range for shape {:?}", x.shape());
            data.extend_from_slice(&x.data()[i * n..(i + 1) * n]);
        }
        let out = self.out_node(&[x.node()], data.len());
        self.push(out, Back::GatherRows { x: x.node(), idx: Rc::new(idx.to_vec()), n });
        Tensor::with_node(vec![idx.len(), n], data, out)
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Runs the reverse sweep from a scalar loss. Returns gradients for
    /// every leaf registered through [`Tape::var`]; interior results are
    /// freed as the sweep passes them.
    pub fn backward(&self, loss: &Tensor) -> Gradients {
        assert!(self.recording, "backward: tape is in inference mode");
        assert_eq!(
            loss.numel(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            loss.shape()
        );
        let node = loss
            .node()
            .expect("backward: loss is a constant with no path to any tape leaf");
        let sizes = self.sizes.borrow();
        let mut store = GradStore { grads: vec![None; sizes.len()], sizes: &sizes };
        store.buf(node)[0] = 1.0;
        let steps = self.steps.borrow();
        for step in steps.iter().rev() {
            step.apply(&mut store);
        }
        Gradients { grads: store.grads }
    }
}

/// Gradient buffers produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a watched tensor. `None` when no
    /// gradient reached it (or the tensor was never on the tape).
    pub fn wrt(&self, t: &Tensor) -> Option<&[f64]> {
        t.node().and_then(|n| self.grads.get(n).and_then(|g| g.as_deref()))
    }

    /// Like [`Gradients::wrt`] but zero-filled when no gradient flowed.
    pub fn wrt_or_zero(&self, t: &Tensor) -> Vec<f64> {
        self.wrt(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
    }
}

struct GradStore<'a> {
    grads: Vec<Option<Vec<f64>>>,
    sizes: &'a [usize],
}

impl GradStore<'_> {
    fn buf(&mut self, node: NodeId) -> &mut [f64] {
        self.grads[node].get_or_insert_with(|| vec![0.0; self.sizes[node]])
    }

    /// Removes and returns the accumulated gradient of a step output. Each
    /// node is produced by exactly one step, so after that step runs the
    /// buffer is never needed again.
    fn take(&mut self, node: NodeId) -> Option<Vec<f64>> {
        self.grads[node].take()
    }
}

struct Step {
    out: NodeId,
    back: Back,
}

enum Back {
    Matmul {
        a: Option<NodeId>,
        b: Option<NodeId>,
        a_data: Rc<Vec<f64>>,
        b_data: Rc<Vec<f64>>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add { a: Option<NodeId>, b: Option<NodeId> },
    AddRow { x: Option<NodeId>, bias: Option<NodeId>, n: usize },
    Mul { a: Option<NodeId>, b: Option<NodeId>, a_data: Rc<Vec<f64>>, b_data: Rc<Vec<f64>> },
    MulRow {
        x: Option<NodeId>,
        gain: Option<NodeId>,
        x_data: Rc<Vec<f64>>,
        gain_data: Rc<Vec<f64>>,
        n: usize,
    },
    Affine { x: Option<NodeId>, mul: f64 },
    RowwiseAffine { x: Option<NodeId>, mul: Vec<f64>, n: usize },
    Exp { x: Option<NodeId>, y_data: Rc<Vec<f64>> },
    Log { x: Option<NodeId>, x_data: Rc<Vec<f64>> },
    SumAxis { x: Option<NodeId>, n: usize },
    MaxAxis { x: Option<NodeId>, argmax: Vec<usize>, n: usize },
    SumAll { x: Option<NodeId> },
    Clip { x: Option<NodeId>, x_data: Rc<Vec<f64>>, lo: f64, hi: f64 },
    LayerNorm { x: Option<NodeId>, y_data: Rc<Vec<f64>>, inv_std: Vec<f64>, n: usize },
    Gelu { x: Option<NodeId>, x_data: Rc<Vec<f64>> },
    Embedding { table: Option<NodeId>, ids: Rc<Vec<usize>>, d: usize },
    Transpose { x: Option<NodeId>, m: usize, n: usize },
    Reshape { x: Option<NodeId> },
    MaskedFill { x: Option<NodeId>, masked: Rc<Vec<bool>> },
    SoftmaxRows { x: Option<NodeId>, p_data: Rc<Vec<f64>>, n: usize },
    CrossEntropy { logits: Option<NodeId>, probs: Vec<f64>, targets: Rc<Vec<usize>>, n: usize },
    SliceRows { x: Option<NodeId>, start: usize, n: usize },
    SliceCols { x: Option<NodeId>, start: usize, src_cols: usize, len: usize },
    ConcatCols { parts: Vec<(Option<NodeId>, usize)> },
    ConcatRows { parts: Vec<(Option<NodeId>, usize)>, n: usize },
    GatherRows { x: Option<NodeId>, idx: Rc<Vec<usize>>, n: usize },
}

impl Step {
    fn apply(&self, store: &mut GradStore) {
        let Some(g) = store.take(self.out) else { return };
        match &self.back {
            Back::Matmul { a, b, a_data, b_data, m, k, n } => {
                if let Some(a) = *a {
                    // dA += G · Bᵀ
                    let bt = kernels::transpose(b_data, *k, *n);
                    kernels::matmul_acc(store.buf(a), &g, &bt, *m, *n, *k);
                }
                if let Some(b) = *b {
                    // dB += Aᵀ · G
                    let at = kernels::transpose(a_data, *m, *k);
                    kernels::matmul_acc(store.buf(b), &at, &g, *k, *m, *n);
                }
            }
            Back::Add { a, b } => {
                for node in [a, b].into_iter().flatten() {
                    for (acc, gv) in store.buf(*node).iter_mut().zip(&g) {
                        *acc += gv;
                    }
                }
            }
            Back::AddRow { x, bias, n } => {
                if let Some(x) = *x {
                    for (acc, gv) in store.buf(x).iter_mut().zip(&g) {
                        *acc += gv;
                    }
                }
                if let Some(bias) = *bias {
                    let buf = store.buf(bias);
                    for row in g.chunks_exact(*n) {
                        for (acc, gv) in buf.iter_mut().zip(row) {
                            *acc += gv;
                        }
                    }
                }
            }
            Back::Mul { a, b, a_data, b_data } => {
                if let Some(a) = *a {
                    for ((acc, gv), bv) in store.buf(a).iter_mut().zip(&g).zip(b_data.iter()) {
                        *acc += gv * bv;
                    }
                }
                if let Some(b) = *b {
                    for ((acc, gv), av) in store.buf(b).iter_mut().zip(&g).zip(a_data.iter()) {
                        *acc += gv * av;
                    }
                }
            }
            Back::MulRow { x, gain, x_data, gain_data, n } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for (row, grow) in buf.chunks_exact_mut(*n).zip(g.chunks_exact(*n)) {
                        for ((acc, gv), s) in row.iter_mut().zip(grow).zip(gain_data.iter()) {
                            *acc += gv * s;
                        }
                    }
                }
                if let Some(gain) = *gain {
                    let buf = store.buf(gain);
                    for (grow, xrow) in g.chunks_exact(*n).zip(x_data.chunks_exact(*n)) {
                        for ((acc, gv), xv) in buf.iter_mut().zip(grow).zip(xrow) {
                            *acc += gv * xv;
                        }
                    }
                }
            }
            Back::Affine { x, mul } => {
                if let Some(x) = *x {
                    for (acc, gv) in store.buf(x).iter_mut().zip(&g) {
                        *acc += mul * gv;
                    }
                }
            }
            Back::RowwiseAffine { x, mul, n } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for ((row, grow), m) in buf.chunks_exact_mut(*n).zip(g.chunks_exact(*n)).zip(mul)
                    {
                        for (acc, gv) in row.iter_mut().zip(grow) {
                            *acc += m * gv;
                        }
                    }
                }
            }
            Back::Exp { x, y_data } => {
                if let Some(x) = *x {
                    for ((acc, gv), yv) in store.buf(x).iter_mut().zip(&g).zip(y_data.iter()) {
                        *acc += gv * yv;
                    }
                }
            }
            Back::Log { x, x_data } => {
                if let Some(x) = *x {
                    for ((acc, gv), xv) in store.buf(x).iter_mut().zip(&g).zip(x_data.iter()) {
                        *acc += gv / xv;
                    }
                }
            }
            Back::SumAxis { x, n } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for (row, gv) in buf.chunks_exact_mut(*n).zip(&g) {
                        for acc in row.iter_mut() {
                            *acc += gv;
                        }
                    }
                }
            }
            Back::MaxAxis { x, argmax, n } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for (row, (&am, gv)) in buf.chunks_exact_mut(*n).zip(argmax.iter().zip(&g)) {
                        row[am] += gv;
                    }
                }
            }
            Back::SumAll { x } => {
                if let Some(x) = *x {
                    for acc in store.buf(x).iter_mut() {
                        *acc += g[0];
                    }
                }
            }
            Back::Clip { x, x_data, lo, hi } => {
                if let Some(x) = *x {
                    for ((acc, gv), xv) in store.buf(x).iter_mut().zip(&g).zip(x_data.iter()) {
                        if *lo < *xv && *xv < *hi {
                            *acc += gv;
                        }
                    }
                }
            }
            Back::LayerNorm { x, y_data, inv_std, n } => {
                if let Some(x) = *x {
                    let nf = *n as f64;
                    let buf = store.buf(x);
                    let rows = buf.chunks_exact_mut(*n);
                    for ((row, (grow, yrow)), &is) in rows
                        .zip(g.chunks_exact(*n).zip(y_data.chunks_exact(*n)))
                        .zip(inv_std)
                    {
                        let g_mean = grow.iter().sum::<f64>() / nf;
                        let gy_mean =
                            grow.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum::<f64>() / nf;
                        for ((acc, gv), yv) in row.iter_mut().zip(grow).zip(yrow) {
                            *acc += is * (gv - g_mean - yv * gy_mean);
                        }
                    }
                }
            }
            Back::Gelu { x, x_data } => {
                if let Some(x) = *x {
                    for ((acc, gv), xv) in store.buf(x).iter_mut().zip(&g).zip(x_data.iter()) {
                        *acc += gv * kernels::gelu_grad(*xv);
                    }
                }
            }
            Back::Embedding { table, ids, d } => {
                if let Some(table) = *table {
                    let buf = store.buf(table);
                    for (&id, grow) in ids.iter().zip(g.chunks_exact(*d)) {
                        for (acc, gv) in buf[id * d..(id + 1) * d].iter_mut().zip(grow) {
                            *acc += gv;
                        }
                    }
                }
            }
            Back::Transpose { x, m, n } => {
                if let Some(x) = *x {
                    // g has shape [n, m]; scatter back transposed
                    let buf = store.buf(x);
                    for r in 0..*m {
                        for c in 0..*n {
                            buf[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Back::Reshape { x } => {
                if let Some(x) = *x {
                    for (acc, gv) in store.buf(x).iter_mut().zip(&g) {
                        *acc += gv;
                    }
                }
            }
            Back::MaskedFill { x, masked } => {
                if let Some(x) = *x {
                    for ((acc, gv), &is_masked) in
                        store.buf(x).iter_mut().zip(&g).zip(masked.iter())
                    {
                        if !is_masked {
                            *acc += gv;
                        }
                    }
                }
            }
            Back::SoftmaxRows { x, p_data, n } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for (row, (grow, prow)) in buf
                        .chunks_exact_mut(*n)
                        .zip(g.chunks_exact(*n).zip(p_data.chunks_exact(*n)))
                    {
                        let dot: f64 = grow.iter().zip(prow).map(|(gv, pv)| gv * pv).sum();
                        for ((acc, gv), pv) in row.iter_mut().zip(grow).zip(prow) {
                            *acc += pv * (gv - dot);
                        }
                    }
                }
            }
            Back::CrossEntropy { logits, probs, targets, n } => {
                if let Some(logits) = *logits {
                    let scale = g[0] / targets.len() as f64;
                    let buf = store.buf(logits);
                    for ((row, prow), &target) in
                        buf.chunks_exact_mut(*n).zip(probs.chunks_exact(*n)).zip(targets.iter())
                    {
                        for (c, (acc, pv)) in row.iter_mut().zip(prow).enumerate() {
                            let indicator = if c == target { 1.0 } else { 0.0 };
                            *acc += scale * (pv - indicator);
                        }
                    }
                }
            }
            Back::SliceRows { x, start, n } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for (acc, gv) in buf[start * n..].iter_mut().zip(&g) {
                        *acc += gv;
                    }
                }
            }
            Back::SliceCols { x, start, src_cols, len } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for (brow, grow) in buf.chunks_exact_mut(*src_cols).zip(g.chunks_exact(*len)) {
                        for (acc, gv) in brow[*start..start + len].iter_mut().zip(grow) {
                            *acc += gv;
                        }
                    }
                }
            }
            Back::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|(_, w)| w).sum();
                let mut offset = 0;
                for (node, w) in parts {
                    if let Some(node) = *node {
                        let buf = store.buf(node);
                        for (brow, grow) in buf.chunks_exact_mut(*w).zip(g.chunks_exact(total)) {
                            for (acc, gv) in brow.iter_mut().zip(&grow[offset..offset + w]) {
                                *acc += gv;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Back::ConcatRows { parts, n } => {
                let mut offset = 0;
                for (node, rows) in parts {
                    let span = rows * n;
                    if let Some(node) = *node {
                        for (acc, gv) in store.buf(node).iter_mut().zip(&g[offset..offset + span])
                        {
                            *acc += gv;
                        }
                    }
                    offset += span;
                }
            }
            Back::GatherRows { x, idx, n } => {
                if let Some(x) = *x {
                    let buf = store.buf(x);
                    for (&i, grow) in idx.iter().zip(g.chunks_exact(*n)) {
                        for (acc, gv) in buf[i * n..(i + 1) * n].iter_mut().zip(grow) {
                            *acc += gv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
            assert!((a - e).abs() <= tol, "index {i}: {a} vs {e}");
        }
    }

    #[test]
    fn matmul_identity_is_exact() {
        let tape = Tape::inference();
        let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        assert_eq!(tape.matmul(&a, &eye).data(), a.data());
    }

    #[test]
    #[should_panic(expected = "matmul: inner dimensions disagree")]
    fn matmul_rejects_mismatched_shapes() {
        let tape = Tape::inference();
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let _ = tape.matmul(&a, &b);
    }

    #[test]
    fn clip_forward_examples() {
        let tape = Tape::inference();
        let x = Tensor::new(&[3], vec![-0.5, 0.3, 1.7]);
        assert_eq!(tape.clip(&x, 0.0, 1.0).data(), &[0.0, 0.3, 1.0]);
    }

    #[test]
    fn clip_backward_blocks_boundary_and_outside() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[4], vec![-1.0, 0.5, 2.0, 1.0]));
        let y = tape.clip(&x, 0.0, 1.0);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss);
        // outside-left, interior, outside-right, exactly-on-boundary
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zeros() {
        let tape = Tape::inference();
        let x = Tensor::new(&[1, 4], vec![3.0; 4]);
        assert_eq!(tape.layer_norm(&x, 1e-5).data(), &[0.0; 4]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let tape = Tape::inference();
        let x = Tensor::new(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.layer_norm(&x, 1e-12);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn elementwise_square_gradient() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[2], vec![1.0, 2.0]));
        let y = tape.mul(&x, &x);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_result() {
        // loss = sum(A·B); dA = 1·Bᵀ (row sums of B per column), dB likewise.
        let tape = Tape::new();
        let a = tape.var(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.var(&Tensor::new(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]));
        let loss = tape.sum_all(&tape.matmul(&a, &b));
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(grads.wrt(&b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn gradient_accumulates_across_multiple_uses() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[2], vec![1.0, 2.0]));
        let y = tape.add(&x, &x);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_gradient_is_negligible() {
        // Probabilities sum to 1 for any logits, so d(sum p)/dx vanishes.
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[1, 5], vec![0.3, -1.0, 2.0, 0.0, 1.1]));
        let p = tape.softmax_rows(&x);
        let loss = tape.sum_all(&p);
        let grads = tape.backward(&loss);
        for g in grads.wrt(&x).unwrap() {
            assert!(g.abs() < 1e-12, "residual gradient {g}");
        }
    }

    #[test]
    fn max_axis_routes_gradient_to_first_maximum() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[1, 4], vec![1.0, 7.0, 7.0, 0.0]));
        let y = tape.max_axis(&x);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let tape = Tape::inference();
        let logits = Tensor::zeros(&[2, 16]);
        let loss = tape.cross_entropy(&logits, &[3, 11]);
        assert!((loss.item() - (16f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let tape = Tape::new();
        let logits = tape.var(&Tensor::new(&[1, 3], vec![0.0, 1.0, 2.0]));
        let loss = tape.cross_entropy(&logits, &[2]);
        let grads = tape.backward(&loss);
        let z: f64 = (0f64).exp() + (1f64).exp() + (2f64).exp();
        let expected =
            [(0f64).exp() / z, (1f64).exp() / z, (2f64).exp() / z - 1.0];
        assert_close(grads.wrt(&logits).unwrap(), &expected, 1e-12);
    }

    #[test]
    #[should_panic(expected = "cross_entropy: target 9 out of range")]
    fn cross_entropy_rejects_bad_target() {
        let tape = Tape::inference();
        let logits = Tensor::zeros(&[1, 4]);
        let _ = tape.cross_entropy(&logits, &[9]);
    }

    #[test]
    fn embedding_lookup_scatter_adds_gradients() {
        let tape = Tape::new();
        let table = tape.var(&Tensor::new(&[3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let rows = tape.embedding_lookup(&table, &[1, 1, 2]);
        let loss = tape.sum_all(&rows);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&table).unwrap(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    #[should_panic(expected = "embedding_lookup: id 5 out of range")]
    fn embedding_lookup_rejects_bad_id() {
        let tape = Tape::inference();
        let table = Tensor::zeros(&[3, 2]);
        let _ = tape.embedding_lookup(&table, &[5]);
    }

    #[test]
    fn transpose_and_reshape_round_trip_gradients() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = tape.transpose(&x);
        let z = tape.reshape(&y, &[6]);
        let w = tape.mul(&z, &z);
        let loss = tape.sum_all(&w);
        let grads = tape.backward(&loss);
        let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_close(grads.wrt(&x).unwrap(), &expected, 1e-12);
    }

    #[test]
    fn masked_fill_blocks_gradient_on_masked_entries() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let mask = Mask::new(2, 2, vec![false, true, false, false]);
        let y = tape.masked_fill(&x, &mask, -5.0);
        assert_eq!(y.data(), &[1.0, -5.0, 3.0, 4.0]);
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn slice_and_concat_invert_each_other() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[2, 4], (0..8).map(f64::from).collect()));
        let left = tape.slice_cols(&x, 0, 2);
        let right = tape.slice_cols(&x, 2, 2);
        let back = tape.concat_cols(&[&left, &right]);
        assert_eq!(back.data(), x.data());
        let top = tape.slice_rows(&back, 0, 1);
        let bottom = tape.slice_rows(&back, 1, 1);
        let again = tape.concat_rows(&[&top, &bottom]);
        assert_eq!(again.data(), x.data());
        let loss = tape.sum_all(&again);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap(), &[1.0; 8]);
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_rows(&x, &[0, 0, 2]);
        let loss = tape.sum_all(&picked);
        let grads = tape.backward(&loss);
        assert_eq!(grads.wrt(&x).unwrap(), &[2.0, 2.0, 0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::inference();
        let x = tape.var(&Tensor::new(&[2], vec![1.0, 2.0]));
        let y = tape.mul(&x, &x);
        assert_eq!(tape.num_steps(), 0);
        assert!(y.node().is_none());
    }

    #[test]
    #[should_panic(expected = "backward: loss must be a scalar")]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.var(&Tensor::new(&[2], vec![1.0, 2.0]));
        let y = tape.mul(&x, &x);
        let _ = tape.backward(&y);
    }

    #[test]
    fn forward_twice_is_bit_identical() {
        let tape = Tape::inference();
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.7, 0.1, -0.4]);
        let w = Tensor::new(&[3, 2], vec![0.5, -0.2, 0.8, 0.9, -1.1, 0.25]);
        let run = || {
            let h = tape.matmul(&x, &w);
            let h = tape.gelu(&h);
            let h = tape.layer_norm(&h, 1e-5);
            tape.softmax_rows(&h).to_vec()
        };
        let a = run();
        let b = run();
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
