use std::cell::{Ref, RefCell};
use std::fmt;

use crate::scalar::{Real, Scalar};

use super::kernels::{self, ConvGeometry, Exec};
use super::{Tensor, TensorError};

/// Guard used in denominators and logarithm arguments.
pub const EPS: f64 = 1e-12;

/// Recorded operation. Operand fields are node ids; every id is smaller than
/// the id of the node holding the op.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Square(usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Conv2d { x: usize, k: usize, geom: ConvGeometry },
    ConvTranspose2d { x: usize, k: usize, geom: ConvGeometry },
    ChannelAffine { x: usize, scale: usize, shift: usize },
    ChannelBias { x: usize, bias: usize },
    Reshape(usize),
    Concat { parts: Vec<usize>, axis: usize },
    GatherRows { src: usize, idx: Vec<usize> },
    GatherFlat { src: usize, idx: Vec<usize> },
    Sum(usize),
    SumAxis { x: usize, axis: usize },
    L1Norm(usize),
    L2Norm(usize),
    RowNorms(usize),
    NormalizeRows(usize),
    Softmax(usize),
    LogSoftmax(usize),
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize> },
    Cosine(usize, usize),
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Tensor<T>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Ordered record of executed ops for one forward/backward pass.
///
/// A graph lives for a single training step. Nodes are appended in execution
/// order, so the node list is already topologically sorted.
pub struct Graph<T: Scalar = Real> {
    pub(crate) nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf, honoring the tensor's `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        let flag = t.requires_grad();
        self.push(t.clone(), flag, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.clone(), true, Op::Leaf)
    }

    /// Leaf treated as a constant.
    pub fn constant(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.clone(), false, Op::Leaf)
    }

    pub(crate) fn push(&self, value: Tensor<T>, requires_grad: bool, op: Op) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, requires_grad, op });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    /// Reverse pass from a scalar loss. Gradients add across multiple uses of
    /// a node; nodes that do not depend on any gradient-requiring leaf are
    /// skipped.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>, TensorError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: root.value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.id + 1];
        if root.requires_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for id in (0..=loss.id).rev() {
            let Some(go) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !matches!(node.op, Op::Leaf) {
                backprop_node(&nodes, node, &go, &mut grads);
            }
            grads[id] = Some(go);
        }
        Ok(Gradients { grads })
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Scalar = Real> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Raw gradient for `v`, `None` when no gradient reached it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient shaped like `v`, zero-filled when unreached.
    pub fn tensor(&self, v: Var<'_, T>) -> Tensor<T> {
        let shape = v.shape();
        match self.get(v) {
            Some(g) => Tensor::new(&shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar = Real> {
    pub(crate) graph: &'g Graph<T>,
    pub(crate) id: usize,
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.node(self.id).value.shape().to_vec()
    }

    pub fn value(&self) -> Tensor<T> {
        self.graph.node(self.id).value.clone()
    }

    /// First element; the value of scalar nodes.
    pub fn item(&self) -> T {
        self.graph.node(self.id).value.values()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.node(self.id).requires_grad
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], nodes: &[Node<T>], id: usize, f: impl FnOnce(&mut [T])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![T::zero(); nodes[id].value.numel()]);
    f(slot);
}

/// Sums a broadcast gradient back onto an operand of `n` elements.
fn reduce_broadcast<T: Scalar>(dst: &mut [T], go: &[T], f: impl Fn(usize) -> T) {
    let n = dst.len();
    for (i, _) in go.iter().enumerate() {
        dst[i % n] = dst[i % n] + f(i);
    }
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, go: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| nodes[id].value.values();
    let y = node.value.values();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(grads, nodes, *a, |d| reduce_broadcast(d, go, |i| go[i]));
            acc(grads, nodes, *b, |d| reduce_broadcast(d, go, |i| go[i]));
        }
        Op::Sub(a, b) => {
            acc(grads, nodes, *a, |d| reduce_broadcast(d, go, |i| go[i]));
            acc(grads, nodes, *b, |d| reduce_broadcast(d, go, |i| -go[i]));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |d| reduce_broadcast(d, go, |i| go[i] * bv[i % bv.len()]));
            acc(grads, nodes, *b, |d| reduce_broadcast(d, go, |i| go[i] * av[i % av.len()]));
        }
        Op::Div(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            acc(grads, nodes, *a, |d| reduce_broadcast(d, go, |i| go[i] / bv[i % bv.len()]));
            acc(grads, nodes, *b, |d| {
                reduce_broadcast(d, go, |i| {
                    let q = bv[i % bv.len()];
                    -go[i] * av[i % av.len()] / (q * q)
                })
            });
        }
        Op::Neg(a) => acc(grads, nodes, *a, |d| zip_add(d, go, |_, g| -g)),
        Op::Exp(a) => acc(grads, nodes, *a, |d| zip_add(d, go, |i, g| g * y[i])),
        Op::Log(a) => {
            let xv = val(*a);
            let eps = T::lit(EPS);
            acc(grads, nodes, *a, |d| zip_add(d, go, |i, g| if xv[i] > eps { g / xv[i] } else { T::zero() }))
        }
        Op::Abs(a) => {
            let xv = val(*a);
            acc(grads, nodes, *a, |d| zip_add(d, go, |i, g| g * sign(xv[i])))
        }
        Op::Clamp(a, lo, hi) => {
            let xv = val(*a);
            let (lo, hi) = (T::lit(*lo), T::lit(*hi));
            acc(grads, nodes, *a, |d| {
                zip_add(d, go, |i, g| if xv[i] >= lo && xv[i] <= hi { g } else { T::zero() })
            })
        }
        Op::Relu(a) => {
            let xv = val(*a);
            acc(grads, nodes, *a, |d| zip_add(d, go, |i, g| if xv[i] > T::zero() { g } else { T::zero() }))
        }
        Op::Tanh(a) => acc(grads, nodes, *a, |d| zip_add(d, go, |i, g| g * (T::one() - y[i] * y[i]))),
        Op::Sigmoid(a) => acc(grads, nodes, *a, |d| zip_add(d, go, |i, g| g * y[i] * (T::one() - y[i]))),
        Op::Square(a) => {
            let xv = val(*a);
            let two = T::lit(2.0);
            acc(grads, nodes, *a, |d| zip_add(d, go, |i, g| g * two * xv[i]))
        }
        Op::Scale(a, c) => {
            let c = T::lit(*c);
            acc(grads, nodes, *a, |d| zip_add(d, go, |_, g| g * c))
        }
        Op::AddScalar(a) => acc(grads, nodes, *a, |d| zip_add(d, go, |_, g| g)),
        Op::MatMul(a, b) => {
            let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let exec = Exec::auto(m * k * n);
            if nodes[*a].requires_grad {
                let bt = kernels::transpose(val(*b), k, n);
                let ga = kernels::matmul(exec, go, &bt, m, n, k);
                acc(grads, nodes, *a, |d| zip_add(d, &ga, |_, g| g));
            }
            if nodes[*b].requires_grad {
                let at = kernels::transpose(val(*a), m, k);
                let gb = kernels::matmul(exec, &at, go, k, m, n);
                acc(grads, nodes, *b, |d| zip_add(d, &gb, |_, g| g));
            }
        }
        Op::Transpose(a) => {
            let s = node.value.shape();
            let gt = kernels::transpose(go, s[0], s[1]);
            acc(grads, nodes, *a, |d| zip_add(d, &gt, |_, g| g));
        }
        Op::Conv2d { x, k, geom } => {
            let exec = Exec::auto(geom.macs());
            if nodes[*x].requires_grad {
                let gx = kernels::conv2d_backward_input(exec, geom, go, val(*k));
                acc(grads, nodes, *x, |d| zip_add(d, &gx, |_, g| g));
            }
            if nodes[*k].requires_grad {
                let gk = kernels::conv2d_backward_kernel(exec, geom, go, val(*x));
                acc(grads, nodes, *k, |d| zip_add(d, &gk, |_, g| g));
            }
        }
        Op::ConvTranspose2d { x, k, geom } => {
            let exec = Exec::auto(geom.macs());
            if nodes[*x].requires_grad {
                let gx = kernels::conv2d_forward(exec, geom, go, val(*k));
                acc(grads, nodes, *x, |d| zip_add(d, &gx, |_, g| g));
            }
            if nodes[*k].requires_grad {
                let gk = kernels::conv2d_backward_kernel(exec, geom, val(*x), go);
                acc(grads, nodes, *k, |d| zip_add(d, &gk, |_, g| g));
            }
        }
        Op::ChannelAffine { x, scale, shift } => {
            let s = node.value.shape();
            let (b, c) = (s[0], s[1]);
            let plane = node.value.numel() / (b * c);
            let (xv, sv) = (val(*x), val(*scale));
            acc(grads, nodes, *x, |d| zip_add(d, go, |i, g| g * sv[i / plane]));
            acc(grads, nodes, *scale, |d| {
                for (bc, slot) in d.iter_mut().enumerate() {
                    let r = bc * plane..(bc + 1) * plane;
                    *slot = *slot + go[r.clone()].iter().zip(&xv[r]).map(|(&g, &xx)| g * xx).sum();
                }
            });
            acc(grads, nodes, *shift, |d| {
                for (bc, slot) in d.iter_mut().enumerate() {
                    *slot = *slot + go[bc * plane..(bc + 1) * plane].iter().copied().sum();
                }
            });
        }
        Op::ChannelBias { x, bias } => {
            let s = node.value.shape();
            let c = s[1];
            let plane = node.value.numel() / (s[0] * c);
            acc(grads, nodes, *x, |d| zip_add(d, go, |_, g| g));
            acc(grads, nodes, *bias, |d| {
                for (i, &g) in go.iter().enumerate() {
                    let ch = (i / plane) % c;
                    d[ch] = d[ch] + g;
                }
            });
        }
        Op::Reshape(a) => acc(grads, nodes, *a, |d| zip_add(d, go, |_, g| g)),
        Op::Concat { parts, axis } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let stride = node.value.numel() / outer;
            let mut offset = 0;
            for &p in parts {
                let inner = nodes[p].value.numel() / outer;
                acc(grads, nodes, p, |d| {
                    for o in 0..outer {
                        let src = &go[o * stride + offset..o * stride + offset + inner];
                        for (dd, &g) in d[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dd = *dd + g;
                        }
                    }
                });
                offset += inner;
            }
        }
        Op::GatherRows { src, idx } => {
            let n = nodes[*src].value.row_len();
            acc(grads, nodes, *src, |d| {
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[i * n + j] = d[i * n + j] + go[r * n + j];
                    }
                }
            });
        }
        Op::GatherFlat { src, idx } => acc(grads, nodes, *src, |d| {
            for (r, &i) in idx.iter().enumerate() {
                d[i] = d[i] + go[r];
            }
        }),
        Op::Sum(a) => acc(grads, nodes, *a, |d| {
            for dd in d.iter_mut() {
                *dd = *dd + go[0];
            }
        }),
        Op::SumAxis { x, axis } => {
            let s = nodes[*x].value.shape();
            let inner: usize = s[axis + 1..].iter().product();
            let len = s[*axis];
            acc(grads, nodes, *x, |d| {
                for (i, dd) in d.iter_mut().enumerate() {
                    let o = i / (len * inner);
                    let r = i % inner;
                    *dd = *dd + go[o * inner + r];
                }
            });
        }
        Op::L1Norm(a) => {
            let xv = val(*a);
            acc(grads, nodes, *a, |d| zip_add(d, xv, |i, _| go[0] * sign(xv[i])))
        }
        Op::L2Norm(a) => {
            let xv = val(*a);
            let norm = y[0];
            if norm > T::zero() {
                acc(grads, nodes, *a, |d| zip_add(d, xv, |i, _| go[0] * xv[i] / norm))
            }
        }
        Op::RowNorms(a) => {
            let xv = val(*a);
            let n = nodes[*a].value.row_len();
            acc(grads, nodes, *a, |d| {
                for (r, &norm) in y.iter().enumerate() {
                    if norm > T::zero() {
                        for j in r * n..(r + 1) * n {
                            d[j] = d[j] + go[r] * xv[j] / norm;
                        }
                    }
                }
            });
        }
        Op::NormalizeRows(a) => {
            let xv = val(*a);
            let n = node.value.row_len();
            let eps = T::lit(EPS);
            acc(grads, nodes, *a, |d| {
                for r in 0..node.value.rows() {
                    let rg = r * n..(r + 1) * n;
                    let norm = xv[rg.clone()].iter().map(|&v| v * v).sum::<T>().sqrt();
                    if norm > eps {
                        let dot: T = go[rg.clone()].iter().zip(&y[rg.clone()]).map(|(&g, &yy)| g * yy).sum();
                        for j in rg {
                            d[j] = d[j] + (go[j] - y[j] * dot) / norm;
                        }
                    } else {
                        for j in rg {
                            d[j] = d[j] + go[j] / eps;
                        }
                    }
                }
            });
        }
        Op::Softmax(a) => {
            let n = node.value.row_len();
            acc(grads, nodes, *a, |d| {
                for r in 0..node.value.rows() {
                    let rg = r * n..(r + 1) * n;
                    let dot: T = go[rg.clone()].iter().zip(&y[rg.clone()]).map(|(&g, &yy)| g * yy).sum();
                    for j in rg {
                        d[j] = d[j] + y[j] * (go[j] - dot);
                    }
                }
            });
        }
        Op::LogSoftmax(a) => {
            let n = node.value.row_len();
            acc(grads, nodes, *a, |d| {
                for r in 0..node.value.rows() {
                    let rg = r * n..(r + 1) * n;
                    let total: T = go[rg.clone()].iter().copied().sum();
                    for j in rg {
                        d[j] = d[j] + go[j] - y[j].exp() * total;
                    }
                }
            });
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let lv = &nodes[*logits].value;
            let n = lv.row_len();
            let b = T::from_usize(labels.len()).expect("batch");
            acc(grads, nodes, *logits, |d| {
                for (r, &label) in labels.iter().enumerate() {
                    let p = softmax_row(lv.row(r));
                    for (j, pj) in p.into_iter().enumerate() {
                        let target = if j == label { T::one() } else { T::zero() };
                        d[r * n + j] = d[r * n + j] + go[0] * (pj - target) / b;
                    }
                }
            });
        }
        Op::Cosine(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let na = av.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = bv.iter().map(|&v| v * v).sum::<T>().sqrt();
            let eps = T::lit(EPS);
            let c = y[0];
            if na * nb > eps {
                acc(grads, nodes, *a, |d| zip_add(d, av, |i, _| go[0] * (bv[i] / (na * nb) - c * av[i] / (na * na))));
                acc(grads, nodes, *b, |d| zip_add(d, bv, |i, _| go[0] * (av[i] / (na * nb) - c * bv[i] / (nb * nb))));
            } else {
                acc(grads, nodes, *a, |d| zip_add(d, av, |i, _| go[0] * bv[i] / eps));
                acc(grads, nodes, *b, |d| zip_add(d, bv, |i, _| go[0] * av[i] / eps));
            }
        }
    }
}

#[inline]
fn zip_add<T: Scalar>(dst: &mut [T], src: &[T], f: impl Fn(usize, T) -> T) {
    for (i, (d, &s)) in dst.iter_mut().zip(src).enumerate() {
        *d = *d + f(i, s);
    }
}

#[inline]
pub(crate) fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_row<T: Scalar>(row: &[T]) -> Vec<T> {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}
