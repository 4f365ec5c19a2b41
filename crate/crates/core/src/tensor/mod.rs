//! Flat `f64` tensors and tape-based reverse-mode autograd.
//!
//! Everything the lab trains or measures is built from the primitives in
//! [`Tape`]; gradients come from one reverse sweep over the recorded tape.
//! All math is in 64-bit floats so that numeric claims about the
//! normalizers and quantizers are not confounded by accumulation error.

mod gradcheck;
pub(crate) mod kernels;
mod tape;

pub use gradcheck::{finite_diff_check, GradCheck};
pub use tape::{Gradients, NodeId, Tape};

use std::rc::Rc;

/// Dense row-major tensor of `f64` values.
///
/// Cloning is cheap (the buffer is shared); mutation goes through
/// [`Tensor::data_mut`], which unshares. A tensor may carry a node id tying
/// it to the [`Tape`] that produced (or watched) it.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        let numel: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            numel,
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor { shape: shape.to_vec(), data: Rc::new(data), node: None }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Rc::new(vec![value; numel]), node: None }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Tensor {
        Tensor { shape: Vec::new(), data: Rc::new(vec![value]), node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count of a 2-d tensor.
    pub fn rows(&self) -> usize {
        self.dims2("rows").0
    }

    /// Column count of a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.dims2("cols").1
    }

    pub(crate) fn dims2(&self, op: &str) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            other => panic!("{op}: expected a 2-d tensor, got shape {other:?}"),
        }
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable view of the buffer; unshares it if other tensors point here.
    pub fn data_mut(&mut self) -> &mut [f64] {
        self.node = None;
        Rc::make_mut(&mut self.data).as_mut_slice()
    }

    pub(crate) fn shared_data(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<f64>, node: Option<NodeId>) -> Tensor {
        let numel: usize = shape.iter().product();
        debug_assert_eq!(data.len(), numel);
        Tensor { shape, data: Rc::new(data), node }
    }

    pub(crate) fn reuse(shape: Vec<usize>, data: Rc<Vec<f64>>, node: Option<NodeId>) -> Tensor {
        Tensor { shape, data, node }
    }

    /// Same buffer with no tape linkage; gradients will not flow into it.
    pub fn detached(&self) -> Tensor {
        Tensor { shape: self.shape.clone(), data: Rc::clone(&self.data), node: None }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item: expected a single-element tensor, got shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry (0 for an empty tensor).
    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node", &self.node)
            .field("data", &self.data)
            .finish()
    }
}

/// Boolean attendance mask for a score matrix: `true` marks entries the
/// query must NOT attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    masked: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, masked: Vec<bool>) -> Mask {
        assert_eq!(
            masked.len(),
            rows * cols,
            "mask: flag length {} does not match shape [{rows}, {cols}]",
            masked.len()
        );
        Mask { rows, cols, masked }
    }

    /// Lower-triangular causal mask: position `t` may attend to `0..=t`.
    pub fn causal(len: usize) -> Mask {
        let mut masked = vec![false; len * len];
        for row in 0..len {
            for col in (row + 1)..len {
                masked[row * len + col] = true;
            }
        }
        Mask { rows: len, cols: len, masked }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn flags(&self) -> &[bool] {
        &self.masked
    }

    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.masked[row * self.cols + col]
    }

    /// Number of attendable (unmasked) entries in each row.
    pub fn attendable_per_row(&self) -> Vec<usize> {
        self.masked
            .chunks_exact(self.cols)
            .map(|row| row.iter().filter(|&&m| !m).count())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        let t = Tensor::new(&[2, 3], vec![0.0; 6]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn new_rejects_wrong_length() {
        let _ = Tensor::new(&[2, 3], vec![0.0; 5]);
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(4.5).item(), 4.5);
        assert_eq!(Tensor::scalar(4.5).shape(), &[] as &[usize]);
    }

    #[test]
    fn data_mut_unshares() {
        let a = Tensor::new(&[2], vec![1.0, 2.0]);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.data(), &[1.0, 2.0]);
        assert_eq!(b.data(), &[9.0, 2.0]);
    }

    #[test]
    fn causal_mask_counts() {
        let mask = Mask::causal(4);
        assert_eq!(mask.attendable_per_row(), vec![1, 2, 3, 4]);
        assert!(mask.is_masked(0, 3));
        assert!(!mask.is_masked(3, 0));
    }

    #[test]
    fn inf_norm_ignores_sign() {
        let t = Tensor::new(&[3], vec![-4.0, 2.0, 3.0]);
        assert_eq!(t.inf_norm(), 4.0);
    }
}
