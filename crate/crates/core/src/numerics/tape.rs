//! Reverse-mode differentiation over whole tensors.
//!
//! A [`GradTape`] records every operation as it is evaluated. Node ids are
//! handed out in creation order, so the tape is topologically sorted by
//! construction and `backward` is a single reverse sweep.

use super::tensor::{gemm, MatRef, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    MatMul(NodeId, NodeId),
    Sum(NodeId),
    Scale(NodeId, f64),
    Clamp(NodeId, f64, f64),
    SelectCols(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    /// Whether any parameter feeds into this node.
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    parameters: Vec<NodeId>,
}

/// Gradients from one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A leaf that receives a gradient from every backward pass.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].needs_grad = true;
        self.parameters.push(id);
        id
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.parameters
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).neg();
        self.push(v, Op::Neg(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).tanh();
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).exp();
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).ln()?;
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero outside the band.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn select_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let v = self.value(a).select_cols(cols)?;
        Ok(self.push(v, Op::SelectCols(a, cols.to_vec())))
    }

    /// Propagates d(loss)/d(node) back through the tape.
    ///
    /// Every parameter gets an entry; parameters the loss does not depend on
    /// receive zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Contract(format!("node {} is not on the tape", loss.0)));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g.neg());
                }
                Op::Mul(a, b) => {
                    if self.needs_grad(*a) {
                        let ga = g.mul(self.value(*b))?;
                        self.accumulate(&mut grads, *a, ga);
                    }
                    if self.needs_grad(*b) {
                        let gb = g.mul(self.value(*a))?;
                        self.accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Neg(a) => self.accumulate(&mut grads, *a, g.neg()),
                Op::Tanh(a) => {
                    let ga = g.zip_with(&node.value, |gi, y| gi * (1.0 - y * y));
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_with(&node.value, |gi, y| gi * y);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_with(self.value(*a), |gi, x| gi / x);
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.needs_grad(*a) {
                        // dA = G · Bᵀ
                        let mut ga = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::row_major(g.data(), n),
                            MatRef::transposed(bv.data(), n),
                            &mut ga,
                            false,
                        );
                        self.accumulate(&mut grads, *a, Tensor::matrix(m, k, ga)?);
                    }
                    if self.needs_grad(*b) {
                        // dB = Aᵀ · G
                        let mut gb = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::transposed(av.data(), k),
                            MatRef::row_major(g.data(), n),
                            &mut gb,
                            false,
                        );
                        self.accumulate(&mut grads, *b, Tensor::matrix(k, n, gb)?);
                    }
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    self.accumulate(&mut grads, *a, Tensor::filled(shape, g.item()));
                }
                Op::Scale(a, c) => self.accumulate(&mut grads, *a, g.scale(*c)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_with(self.value(*a), |gi, x| {
                        if x >= lo && x <= hi {
                            gi
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(&mut grads, *a, ga);
                }
                Op::SelectCols(a, cols) => {
                    let src = self.value(*a);
                    let (r, c) = (src.rows(), src.cols());
                    let mut ga = vec![0.0; r * c];
                    let w = cols.len();
                    for i in 0..r {
                        for (j, &col) in cols.iter().enumerate() {
                            ga[i * c + col] += g.data()[i * w + j];
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::matrix(r, c, ga)?);
                }
            }
        }

        grads.resize(self.nodes.len(), None);
        for &p in &self.parameters {
            if grads[p.0].is_none() {
                grads[p.0] = Some(Tensor::zeros(self.value(p).shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                self.needs_grad(*a) || self.needs_grad(*b)
            }
            Op::Neg(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sum(a)
            | Op::Scale(a, _)
            | Op::Clamp(a, _, _)
            | Op::SelectCols(a, _) => self.needs_grad(*a),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, mut contribution: Tensor) {
        if !self.needs_grad(target) {
            return;
        }
        let target_len = self.value(target).len();
        if target_len == 1 && contribution.len() != 1 {
            // scalar operand was broadcast forward; reduce on the way back
            contribution = Tensor::filled(self.value(target).shape().to_vec(), contribution.sum());
        }
        match &mut grads[target.0] {
            Some(existing) => existing
                .data_mut()
                .iter_mut()
                .zip(contribution.data())
                .for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contribution),
        }
    }
}

impl Tensor {
    fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("zip_with on equal shapes")
    }
}
