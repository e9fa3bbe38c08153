//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! Nodes hold dense tensors; the tape is append-only, so node ids are already
//! a topological order and the backward sweep is a single reverse pass.
//! Every forward op checks its output for non-finite values so a NaN is
//! reported at the op that produced it rather than at the loss.

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    /// Constant input; receives no gradient.
    Const,
    /// Differentiable leaf (parameters, probed inputs).
    Var,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Matrix-vector product: (matrix node, vector node).
    MatVec(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Scalar replicated into a length-n vector.
    Broadcast(NodeId),
    Concat(Vec<NodeId>),
    /// Contiguous sub-vector: (source, start, len).
    Slice(NodeId, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`; zero tensor when the
    /// node is off every path to the root.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all nodes but keeps the allocation for reuse across minibatches.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    fn push_checked(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId> {
        value.check_finite(name)?;
        Ok(self.push(value, op))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Var)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId, op: &'static str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("({}x{}) vs ({}x{})", va.rows, va.cols, vb.rows, vb.cols),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "add")?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push_checked(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "sub")?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push_checked(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "mul")?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push_checked(v, Op::Mul(a, b), "mul")
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_shapes(a, b, "div")?;
        let v = self.value(a).zip(self.value(b), |x, y| x / y);
        self.push_checked(v, Op::Div(a, b), "div")
    }

    pub fn matvec(&mut self, m: NodeId, x: NodeId) -> Result<NodeId> {
        let v = self.value(m).matvec(self.value(x))?;
        self.push_checked(v, Op::MatVec(m, x), "matvec")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push_checked(v, Op::Sigmoid(a), "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::tanh);
        self.push_checked(v, Op::Tanh(a), "tanh")
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(f64::sqrt);
        self.push_checked(v, Op::Sqrt(a), "sqrt")
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a).map(|x| x * x);
        self.push_checked(v, Op::Square(a), "square")
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| c * x);
        self.push_checked(v, Op::Scale(a, c), "scale")
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        self.push_checked(v, Op::AddConst(a), "add_const")
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.scale(a, -1.0)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push_checked(v, Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let v = Tensor::scalar(self.value(a).data.iter().sum::<f64>() / n);
        self.push_checked(v, Op::Mean(a), "mean")
    }

    pub fn broadcast(&mut self, a: NodeId, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if !v.is_scalar() {
            return Err(Error::ShapeMismatch { op: "broadcast", detail: "source not scalar".into() });
        }
        let t = Tensor { rows: len, cols: 1, data: vec![v.scalar_value(); len] };
        self.push_checked(t, Op::Broadcast(a), "broadcast")
    }

    /// Concatenates column vectors into one column vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if !v.is_vector() {
                return Err(Error::ShapeMismatch { op: "concat", detail: "non-vector part".into() });
            }
            data.extend_from_slice(&v.data);
        }
        let t = Tensor { rows: data.len(), cols: 1, data };
        self.push_checked(t, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        if !v.is_vector() || start + len > v.rows {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("[{start}, {start}+{len}) of length {}", v.rows),
            });
        }
        let t = Tensor { rows: len, cols: 1, data: v.data[start..start + len].to_vec() };
        self.push_checked(t, Op::Slice(a, start, len), "slice")
    }

    /// Mean squared error between two vectors as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let s = self.square(d)?;
        self.mean(s)
    }

    /// scale * tanh(v): bounds every entry to (-scale, scale).
    pub fn constrain_tanh(&mut self, a: NodeId, scale: f64) -> Result<NodeId> {
        debug_assert!(scale > 0.0);
        let t = self.tanh(a)?;
        self.scale(t, scale)
    }

    /// Reverse sweep from a scalar root. Each node is visited exactly once.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract("backward requires a scalar root node"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stored below unless the node is interior and unneeded; keep all
            // gradients so callers can probe intermediates in tests.
            let op = self.nodes[i].op.clone();
            match op {
                Op::Const | Op::Var => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, &g);
                    self.accumulate(&mut grads, b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, &g);
                    let neg = g.map(|x| -x);
                    self.accumulate(&mut grads, b, &neg);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(b), |gv, bv| gv * bv);
                    let gb = g.zip(self.value(a), |gv, av| gv * av);
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::Div(a, b) => {
                    let vb = self.value(b);
                    let ga = g.zip(vb, |gv, bv| gv / bv);
                    let y = self.value(NodeId(i));
                    let mut gb = g.zip(y, |gv, yv| -gv * yv);
                    gb = gb.zip(vb, |x, bv| x / bv);
                    self.accumulate(&mut grads, a, &ga);
                    self.accumulate(&mut grads, b, &gb);
                }
                Op::MatVec(m, x) => {
                    let gx = self.value(m).matvec_t(&g)?;
                    self.accumulate(&mut grads, x, &gx);
                    let vm = self.value(m);
                    let mut gm = Tensor::zeros(vm.rows, vm.cols);
                    gm.add_outer(&g, self.value(x));
                    self.accumulate(&mut grads, m, &gm);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(NodeId(i));
                    let ga = g.zip(y, |gv, yv| gv * yv * (1.0 - yv));
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Tanh(a) => {
                    let y = self.value(NodeId(i));
                    let ga = g.zip(y, |gv, yv| gv * (1.0 - yv * yv));
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Sqrt(a) => {
                    let y = self.value(NodeId(i));
                    let ga = g.zip(y, |gv, yv| 0.5 * gv / yv);
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Square(a) => {
                    let va = self.value(a);
                    let ga = g.zip(va, |gv, av| 2.0 * gv * av);
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Scale(a, c) => {
                    let ga = g.map(|x| c * x);
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::AddConst(a) => {
                    self.accumulate(&mut grads, a, &g);
                }
                Op::Sum(a) => {
                    let va = self.value(a);
                    let gs = g.scalar_value();
                    let ga = Tensor { rows: va.rows, cols: va.cols, data: vec![gs; va.len()] };
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Mean(a) => {
                    let va = self.value(a);
                    let gs = g.scalar_value() / va.len() as f64;
                    let ga = Tensor { rows: va.rows, cols: va.cols, data: vec![gs; va.len()] };
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Broadcast(a) => {
                    let ga = Tensor::scalar(g.data.iter().sum());
                    self.accumulate(&mut grads, a, &ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(p).rows;
                        let gp = Tensor {
                            rows: len,
                            cols: 1,
                            data: g.data[offset..offset + len].to_vec(),
                        };
                        self.accumulate(&mut grads, p, &gp);
                        offset += len;
                    }
                }
                Op::Slice(a, start, len) => {
                    let va = self.value(a);
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    ga.data[start..start + len].copy_from_slice(&g.data);
                    self.accumulate(&mut grads, a, &ga);
                }
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| (n.value.rows, n.value.cols)).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, g: &Tensor) {
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}
