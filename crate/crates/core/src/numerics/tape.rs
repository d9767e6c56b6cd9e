//! Reverse-mode differentiation over a recorded computation.
//!
//! A [`Tape`] is a flat list of nodes in construction order. Every node holds
//! the forward value (reused by backward passes) and the ids of its parents,
//! so the list is always topologically sorted. [`Tape::backward`] walks it in
//! reverse, and every operation adds its contribution into the parents'
//! gradient buffers.
//!
//! Operations implement [`TapeOp`]; the structural and elementwise ops live
//! here, convolution and sampling in their own files, and the detection
//! losses register through the same trait from the losses module.

use std::fmt;

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// A differentiable operation: forward from input tensors, backward from the
/// output gradient to one gradient buffer per input.
pub trait TapeOp: fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Per-input gradients. Each returned buffer has the length of the
    /// corresponding input's data. Forward values of the inputs and the
    /// output are available, so nothing needs recomputing.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>>;
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    parents: Vec<VarId>,
    op: Option<Box<dyn TapeOp>>,
    /// Index into the owning parameter set, for leaves bound to parameters.
    param: Option<usize>,
}

/// Recorded computation for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant leaf.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(value, Vec::new(), None, None)
    }

    /// Insert a leaf bound to parameter slot `param_index` of a parameter
    /// set; `harvest_param_grads` later routes gradients back by this index.
    pub fn param_leaf(&mut self, value: Tensor, param_index: usize) -> VarId {
        self.push(value, Vec::new(), None, Some(param_index))
    }

    /// Record an operation node. The op runs forward immediately.
    pub fn apply(&mut self, op: Box<dyn TapeOp>, parents: &[VarId]) -> Result<VarId> {
        let inputs: Vec<&Tensor> = parents.iter().map(|&p| self.value(p)).collect();
        let value = op.forward(&inputs)?;
        Ok(self.push(value, parents.to_vec(), Some(op), None))
    }

    fn push(
        &mut self,
        value: Tensor,
        parents: Vec<VarId>,
        op: Option<Box<dyn TapeOp>>,
        param: Option<usize>,
    ) -> VarId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            grad: None,
            parents,
            op,
            param,
        });
        VarId(self.nodes.len() - 1)
    }

    pub fn value(&self, v: VarId) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: VarId) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Reverse pass from a scalar node, seeding with `seed` (1.0 for a plain
    /// gradient, 1/batch for averaged batch losses).
    pub fn backward(&mut self, loss: VarId, seed: f64) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        self.accumulate(loss, &[seed]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.as_ref() else {
                continue;
            };
            if self.nodes[i].op.is_none() {
                continue;
            }
            let out_grad = g.clone();
            let op = self.nodes[i].op.take().expect("op checked above");
            let parents = self.nodes[i].parents.clone();
            let contribs = {
                let inputs: Vec<&Tensor> = parents.iter().map(|&p| self.value(p)).collect();
                op.backward(&inputs, &self.nodes[i].value, &out_grad)
            };
            self.nodes[i].op = Some(op);
            debug_assert_eq!(contribs.len(), parents.len());
            for (p, c) in parents.iter().zip(&contribs) {
                self.accumulate(*p, c);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: VarId, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        debug_assert_eq!(delta.len(), node.value.len());
        let g = node
            .grad
            .get_or_insert_with(|| vec![0.0; node.value.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Gradients of parameter-bound leaves, as `(param_index, grad)` pairs.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().filter_map(|n| match (n.param, &n.grad) {
            (Some(idx), Some(g)) => Some((idx, g.as_slice())),
            _ => None,
        })
    }

    /// First node holding a non-finite value, reported as (index, op name).
    /// Used for divergence diagnostics.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            if n.value.all_finite() {
                None
            } else {
                Some((i, n.op.as_ref().map_or("leaf", |o| o.name())))
            }
        })
    }
}

// ── Elementwise and structural ops ────────────────────────────────────────

#[derive(Debug)]
struct Relu;

impl TapeOp for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i].max(0.0)))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        // Subgradient at 0 is 0.
        let x = inputs[0].data();
        vec![out_grad
            .iter()
            .zip(x)
            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
            .collect()]
    }
}

#[derive(Debug)]
struct Sigmoid;

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl TapeOp for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
            sigmoid_scalar(x.data()[i])
        }))
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let y = output.data();
        vec![out_grad
            .iter()
            .zip(y)
            .map(|(&g, &s)| g * s * (1.0 - s))
            .collect()]
    }
}

#[derive(Debug)]
struct Add;

impl TapeOp for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(Error::shape(
                "add",
                format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
            ));
        }
        Ok(Tensor::from_fn(a.shape().to_vec(), |i| {
            a.data()[i] + b.data()[i]
        }))
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        vec![out_grad.to_vec(), out_grad.to_vec()]
    }
}

#[derive(Debug)]
struct Scale(f64);

impl TapeOp for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| x.data()[i] * self.0))
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        vec![out_grad.iter().map(|g| g * self.0).collect()]
    }
}

#[derive(Debug)]
struct Sum;

impl TapeOp for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].data().iter().sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        vec![vec![out_grad[0]; inputs[0].len()]]
    }
}

/// Stack row matrices `[N_i, K]` into `[sum N_i, K]`.
#[derive(Debug)]
struct ConcatRows;

impl TapeOp for ConcatRows {
    fn name(&self) -> &'static str {
        "concat_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let k = inputs[0].shape()[1];
        let mut rows = 0;
        for t in inputs {
            if t.shape().len() != 2 || t.shape()[1] != k {
                return Err(Error::shape(
                    "concat_rows",
                    format!("expected [*, {k}] inputs, got {:?}", t.shape()),
                ));
            }
            rows += t.shape()[0];
        }
        let mut data = Vec::with_capacity(rows * k);
        for t in inputs {
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![rows, k], data)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let mut grads = Vec::with_capacity(inputs.len());
        let mut off = 0;
        for t in inputs {
            grads.push(out_grad[off..off + t.len()].to_vec());
            off += t.len();
        }
        grads
    }
}

/// Permute a head output map `[A*K, H, W]` into per-anchor rows
/// `[H*W*A, K]`: the logit for (row r, col c, anchor a, channel k) lands at
/// row (r*W + c)*A + a. Map channel a*K + k carries anchor a, channel k,
/// matching the anchor generation order within one level.
#[derive(Debug)]
struct ToAnchorRows {
    anchors: usize,
    per_anchor: usize,
}

impl TapeOp for ToAnchorRows {
    fn name(&self) -> &'static str {
        "to_anchor_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let (a, k) = (self.anchors, self.per_anchor);
        let [c, h, w] = x.shape() else {
            return Err(Error::shape(
                "to_anchor_rows",
                format!("expected 3-d map, got {:?}", x.shape()),
            ));
        };
        let (c, h, w) = (*c, *h, *w);
        if c != a * k {
            return Err(Error::shape(
                "to_anchor_rows",
                format!("channel axis is {c}, expected anchors*channels = {}", a * k),
            ));
        }
        let d = x.data();
        let mut out = vec![0.0; c * h * w];
        for ai in 0..a {
            for ki in 0..k {
                let ch = ai * k + ki;
                let plane = &d[ch * h * w..(ch + 1) * h * w];
                for (pos, &v) in plane.iter().enumerate() {
                    out[(pos * a + ai) * k + ki] = v;
                }
            }
        }
        Tensor::new(vec![h * w * a, k], out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, out_grad: &[f64]) -> Vec<Vec<f64>> {
        let x = inputs[0];
        let (a, k) = (self.anchors, self.per_anchor);
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let mut gx = vec![0.0; x.len()];
        for ai in 0..a {
            for ki in 0..k {
                let ch = ai * k + ki;
                let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                for (pos, g) in plane.iter_mut().enumerate() {
                    *g = out_grad[(pos * a + ai) * k + ki];
                }
            }
        }
        vec![gx]
    }
}

impl Tape {
    pub fn relu(&mut self, x: VarId) -> VarId {
        self.apply(Box::new(Relu), &[x]).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.apply(Box::new(Sigmoid), &[x]).expect("sigmoid is total")
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.apply(Box::new(Add), &[a, b])
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        self.apply(Box::new(Scale(c)), &[x]).expect("scale is total")
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        self.apply(Box::new(Sum), &[x]).expect("sum is total")
    }

    pub fn concat_rows(&mut self, parts: &[VarId]) -> Result<VarId> {
        self.apply(Box::new(ConcatRows), parts)
    }

    pub fn to_anchor_rows(&mut self, x: VarId, anchors: usize, per_anchor: usize) -> Result<VarId> {
        self.apply(
            Box::new(ToAnchorRows {
                anchors,
                per_anchor,
            }),
            &[x],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap());
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(x);
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn backward_through_sum_chain() {
        // d/dx sum(2 * relu(x)) = 2 on positive entries, 0 elsewhere
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.5, 2.0]).unwrap());
        let r = tape.relu(x);
        let s = tape.scale(r, 2.0);
        let loss = tape.sum(s);
        tape.backward(loss, 1.0).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![3]));
        let y = tape.relu(x);
        assert!(tape.backward(y, 1.0).is_err());
    }

    #[test]
    fn grads_accumulate_across_fanout() {
        // loss = sum(x) + sum(x) so dx = 2 everywhere
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let a = tape.sum(x);
        let b = tape.sum(x);
        let loss = tape.add(a, b).unwrap();
        tape.backward(loss, 1.0).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn anchor_rows_layout_via_one_hot_probe() {
        // Map with A=2 anchors, K=3 channels on a 2x2 grid. Channel a*K+k,
        // position (r, c) must land at row (r*W + c)*A + a, column k.
        let (a, k, h, w) = (2usize, 3usize, 2usize, 2usize);
        for probe_ch in 0..a * k {
            for probe_pos in 0..h * w {
                let mut data = vec![0.0; a * k * h * w];
                data[probe_ch * h * w + probe_pos] = 1.0;
                let mut tape = Tape::new();
                let x = tape.leaf(Tensor::new(vec![a * k, h, w], data).unwrap());
                let y = tape.to_anchor_rows(x, a, k).unwrap();
                let out = tape.value(y);
                assert_eq!(out.shape(), &[h * w * a, k]);
                let (ai, ki) = (probe_ch / k, probe_ch % k);
                let expect_idx = (probe_pos * a + ai) * k + ki;
                for (i, &v) in out.data().iter().enumerate() {
                    assert_eq!(v, if i == expect_idx { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn concat_rows_stacks_in_order() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.value(c).shape(), &[3, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn nonfinite_scan_names_the_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        let _ = tape.relu(x);
        let (idx, name) = tape.first_nonfinite().unwrap();
        assert_eq!(idx, 0);
        assert_eq!(name, "leaf");
    }
}
