use crate::scalar::Scalar;

use super::graph::{sign, softmax_row, Op, EPS};
use super::kernels::{self, ConvGeometry, Exec};
use super::{Tensor, TensorError, Var};

/// Trailing-dimension broadcast: the shorter shape must equal the tail of the
/// longer one, or hold a single element.
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>, TensorError> {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let short_n: usize = short.iter().product();
    if a == b || short_n == 1 || long.ends_with(short) {
        Ok(long.to_vec())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    fn unary(self, op: Op, f: impl Fn(T) -> T) -> Var<'g, T> {
        let (value, rg) = {
            let n = self.graph.node(self.id);
            (n.value.map(f), n.requires_grad)
        };
        self.graph.push(value, rg, op)
    }

    fn binary(self, other: Var<'g, T>, name: &'static str, op: Op, f: impl Fn(T, T) -> T) -> Result<Var<'g, T>, TensorError> {
        let (value, rg) = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(other.id);
            let shape = broadcast_shape(name, a.value.shape(), b.value.shape())?;
            let (av, bv) = (a.value.values(), b.value.values());
            let n: usize = shape.iter().product();
            let values = (0..n).map(|i| f(av[i % av.len()], bv[i % bv.len()])).collect();
            (Tensor::new(&shape, values)?, a.requires_grad || b.requires_grad)
        };
        Ok(self.graph.push(value, rg, op))
    }

    fn derived(self, value: Tensor<T>, op: Op, inputs: &[usize]) -> Var<'g, T> {
        let rg = inputs.iter().any(|&i| self.graph.node(i).requires_grad);
        self.graph.push(value, rg, op)
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    /// Elementwise division; a zero anywhere in the divisor is an error.
    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        if self.graph.node(other.id).value.values().iter().any(|v| *v == T::zero()) {
            return Err(TensorError::DivisionByZero);
        }
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(Op::Neg(self.id), |v| -v)
    }

    /// `exp` with the argument capped below the overflow point.
    pub fn exp(self) -> Var<'g, T> {
        let cap = T::max_value().ln() - T::one();
        self.unary(Op::Exp(self.id), move |v| v.min(cap).exp())
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(self) -> Var<'g, T> {
        let eps = T::lit(EPS);
        self.unary(Op::Log(self.id), move |v| v.max(eps).ln())
    }

    pub fn abs(self) -> Var<'g, T> {
        self.unary(Op::Abs(self.id), |v| v.abs())
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'g, T> {
        let (l, h) = (T::lit(lo), T::lit(hi));
        self.unary(Op::Clamp(self.id, lo, hi), move |v| v.max(l).min(h))
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(Op::Relu(self.id), |v| v.max(T::zero()))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(Op::Tanh(self.id), |v| v.tanh())
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(Op::Sigmoid(self.id), |v| {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        })
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn scale(self, c: f64) -> Var<'g, T> {
        let ct = T::lit(c);
        self.unary(Op::Scale(self.id, c), move |v| v * ct)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let ct = T::lit(c);
        self.unary(Op::AddScalar(self.id), move |v| v + ct)
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(other.id);
            let (sa, sb) = (a.value.shape(), b.value.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    left: sa.to_vec(),
                    right: sb.to_vec(),
                });
            }
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let out = kernels::matmul(Exec::auto(m * k * n), a.value.values(), b.value.values(), m, k, n);
            Tensor::new(&[m, n], out)?
        };
        Ok(self.derived(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(self) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let a = self.graph.node(self.id);
            let s = a.value.shape();
            if s.len() != 2 {
                return Err(TensorError::BadRank {
                    op: "transpose",
                    expected: 2,
                    shape: s.to_vec(),
                });
            }
            Tensor::new(&[s[1], s[0]], kernels::transpose(a.value.values(), s[0], s[1]))?
        };
        Ok(self.derived(value, Op::Transpose(self.id), &[self.id]))
    }

    /// Cross-correlation of `[b, c, h, w]` with `[o, c, kh, kw]`.
    pub fn conv2d(self, kernel: Var<'g, T>, stride: usize, padding: usize) -> Result<Var<'g, T>, TensorError> {
        let (value, geom) = {
            let x = self.graph.node(self.id);
            let k = self.graph.node(kernel.id);
            let (xs, ks) = (dims4("conv2d", x.value.shape())?, dims4("conv2d", k.value.shape())?);
            let geom = ConvGeometry::conv(xs, ks, stride, padding).ok_or_else(|| TensorError::Geometry {
                op: "conv2d",
                input: xs.to_vec(),
                kernel: ks.to_vec(),
                output: conv_out_shape(xs, ks, stride, padding),
            })?;
            let out = kernels::conv2d_forward(Exec::auto(geom.macs()), &geom, x.value.values(), k.value.values());
            (Tensor::new(&[geom.batch, geom.out_c, geom.out_h, geom.out_w], out)?, geom)
        };
        Ok(self.derived(
            value,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Transposed convolution of `[b, ci, h, w]` with `[ci, co, kh, kw]`;
    /// output extent `(h - 1)·stride - 2·padding + kh`.
    pub fn conv_transpose2d(self, kernel: Var<'g, T>, stride: usize, padding: usize) -> Result<Var<'g, T>, TensorError> {
        let (value, geom) = {
            let x = self.graph.node(self.id);
            let k = self.graph.node(kernel.id);
            let (xs, ks) = (dims4("conv_transpose2d", x.value.shape())?, dims4("conv_transpose2d", k.value.shape())?);
            let geom = ConvGeometry::transposed(xs, ks, stride, padding).ok_or_else(|| TensorError::Geometry {
                op: "conv_transpose2d",
                input: xs.to_vec(),
                kernel: ks.to_vec(),
                output: vec![
                    ((xs[2] as isize - 1) * stride as isize - 2 * padding as isize + ks[2] as isize),
                    ((xs[3] as isize - 1) * stride as isize - 2 * padding as isize + ks[3] as isize),
                ],
            })?;
            let out = kernels::conv2d_backward_input(Exec::auto(geom.macs()), &geom, x.value.values(), k.value.values());
            (Tensor::new(&[geom.batch, geom.in_c, geom.in_h, geom.in_w], out)?, geom)
        };
        Ok(self.derived(
            value,
            Op::ConvTranspose2d {
                x: self.id,
                k: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// `y[b,c,..] = x[b,c,..] · scale[b,c] + shift[b,c]`.
    pub fn channel_affine(self, scale: Var<'g, T>, shift: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let x = self.graph.node(self.id);
            let s = self.graph.node(scale.id);
            let m = self.graph.node(shift.id);
            let xs = x.value.shape();
            if xs.len() < 2 || s.value.shape() != [xs[0], xs[1]] || m.value.shape() != [xs[0], xs[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_affine",
                    left: xs.to_vec(),
                    right: s.value.shape().to_vec(),
                });
            }
            let plane = x.value.numel() / (xs[0] * xs[1]);
            let (sv, mv) = (s.value.values(), m.value.values());
            let vals = x.value.values().iter().enumerate().map(|(i, &v)| v * sv[i / plane] + mv[i / plane]).collect();
            Tensor::new(xs, vals)?
        };
        Ok(self.derived(
            value,
            Op::ChannelAffine {
                x: self.id,
                scale: scale.id,
                shift: shift.id,
            },
            &[self.id, scale.id, shift.id],
        ))
    }

    /// Adds a per-channel bias `[c]` to `[b, c, ..]`.
    pub fn channel_bias(self, bias: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let x = self.graph.node(self.id);
            let b = self.graph.node(bias.id);
            let xs = x.value.shape();
            if xs.len() < 2 || b.value.shape() != [xs[1]] {
                return Err(TensorError::ShapeMismatch {
                    op: "channel_bias",
                    left: xs.to_vec(),
                    right: b.value.shape().to_vec(),
                });
            }
            let c = xs[1];
            let plane = x.value.numel() / (xs[0] * c);
            let bv = b.value.values();
            let vals = x.value.values().iter().enumerate().map(|(i, &v)| v + bv[(i / plane) % c]).collect();
            Tensor::new(xs, vals)?
        };
        Ok(self.derived(value, Op::ChannelBias { x: self.id, bias: bias.id }, &[self.id, bias.id]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>, TensorError> {
        let value = self.graph.node(self.id).value.reshape(shape)?;
        Ok(self.derived(value, Op::Reshape(self.id), &[self.id]))
    }

    /// Collapses everything after the leading axis.
    pub fn flatten(self) -> Result<Var<'g, T>, TensorError> {
        let s = self.shape();
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(&[s[0], rest])
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty)?;
        let graph = first.graph;
        let value = {
            let base = graph.node(first.id).value.shape().to_vec();
            if axis >= base.len() {
                return Err(TensorError::BadAxis { axis, shape: base });
            }
            let outer: usize = base[..axis].iter().product();
            let mut total = 0;
            for p in parts {
                let s = graph.node(p.id).value.shape().to_vec();
                if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                    return Err(TensorError::ShapeMismatch {
                        op: "concat",
                        left: base,
                        right: s,
                    });
                }
                total += s[axis];
            }
            let mut vals = Vec::new();
            for o in 0..outer {
                for p in parts {
                    let n = graph.node(p.id);
                    let inner = n.value.numel() / outer;
                    vals.extend_from_slice(&n.value.values()[o * inner..(o + 1) * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(&shape, vals)?
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.derived(value, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// Rows of the leading axis at `idx`; repeated indices accumulate on backward.
    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'g, T>, TensorError> {
        let value = self.graph.node(self.id).value.select_rows(idx)?;
        Ok(self.derived(
            value,
            Op::GatherRows {
                src: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        ))
    }

    /// Flat elements at `idx` as a vector.
    pub fn gather_flat(self, idx: &[usize]) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let n = self.graph.node(self.id);
            let v = n.value.values();
            let mut out = Vec::with_capacity(idx.len());
            for &i in idx {
                out.push(*v.get(i).ok_or(TensorError::IndexOutOfRange { index: i, bound: v.len() })?);
            }
            Tensor::new(&[idx.len()], out)?
        };
        Ok(self.derived(
            value,
            Op::GatherFlat {
                src: self.id,
                idx: idx.to_vec(),
            },
            &[self.id],
        ))
    }

    pub fn sum(self) -> Var<'g, T> {
        let s: T = self.graph.node(self.id).value.values().iter().copied().sum();
        self.derived(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.graph.node(self.id).value.numel();
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over one axis; the axis is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let n = self.graph.node(self.id);
            let s = n.value.shape();
            if axis >= s.len() {
                return Err(TensorError::BadAxis { axis, shape: s.to_vec() });
            }
            let inner: usize = s[axis + 1..].iter().product();
            let outer: usize = s[..axis].iter().product();
            let len = s[axis];
            let v = n.value.values();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for r in 0..inner {
                        out[o * inner + r] = out[o * inner + r] + v[(o * len + l) * inner + r];
                    }
                }
            }
            let mut shape: Vec<usize> = s[..axis].iter().chain(&s[axis + 1..]).copied().collect();
            if shape.is_empty() {
                shape.push(1);
            }
            Tensor::new(&shape, out)?
        };
        Ok(self.derived(value, Op::SumAxis { x: self.id, axis }, &[self.id]))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>, TensorError> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    pub fn l1_norm(self) -> Var<'g, T> {
        let s: T = self.graph.node(self.id).value.values().iter().map(|v| v.abs()).sum();
        self.derived(Tensor::scalar(s), Op::L1Norm(self.id), &[self.id])
    }

    /// Euclidean norm over all elements.
    pub fn l2_norm(self) -> Var<'g, T> {
        let s: T = self.graph.node(self.id).value.values().iter().map(|&v| v * v).sum();
        self.derived(Tensor::scalar(s.sqrt()), Op::L2Norm(self.id), &[self.id])
    }

    /// Square root of the sum of squares of every element.
    pub fn frobenius(self) -> Var<'g, T> {
        self.l2_norm()
    }

    /// Per-row Euclidean norm, `[b, ..] -> [b]`.
    pub fn row_norms(self) -> Var<'g, T> {
        let value = {
            let n = self.graph.node(self.id);
            let t = &n.value;
            let out = (0..t.rows()).map(|r| t.row(r).iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
            Tensor::new(&[t.rows()], out).expect("rows")
        };
        self.derived(value, Op::RowNorms(self.id), &[self.id])
    }

    /// Each row divided by `max(‖row‖₂, 1e-12)`.
    pub fn normalize_rows(self) -> Var<'g, T> {
        let value = {
            let n = self.graph.node(self.id);
            let t = &n.value;
            let eps = T::lit(EPS);
            let mut out = Vec::with_capacity(t.numel());
            for r in 0..t.rows() {
                let row = t.row(r);
                let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
                out.extend(row.iter().map(|&v| v / norm));
            }
            Tensor::new(t.shape(), out).expect("same shape")
        };
        self.derived(value, Op::NormalizeRows(self.id), &[self.id])
    }

    /// Row-wise softmax over trailing elements.
    pub fn softmax(self) -> Var<'g, T> {
        let value = {
            let n = self.graph.node(self.id);
            let t = &n.value;
            let out = (0..t.rows()).flat_map(|r| softmax_row(t.row(r))).collect();
            Tensor::new(t.shape(), out).expect("same shape")
        };
        self.derived(value, Op::Softmax(self.id), &[self.id])
    }

    pub fn log_softmax(self) -> Var<'g, T> {
        let value = {
            let n = self.graph.node(self.id);
            let t = &n.value;
            let mut out = Vec::with_capacity(t.numel());
            for r in 0..t.rows() {
                let row = t.row(r);
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                out.extend(row.iter().map(|&v| v - lse));
            }
            Tensor::new(t.shape(), out).expect("same shape")
        };
        self.derived(value, Op::LogSoftmax(self.id), &[self.id])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let n = self.graph.node(self.id);
            let t = &n.value;
            if t.rank() != 2 || t.rows() != labels.len() {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    left: t.shape().to_vec(),
                    right: vec![labels.len()],
                });
            }
            let m = t.shape()[1];
            let mut total = T::zero();
            for (r, &label) in labels.iter().enumerate() {
                if label >= m {
                    return Err(TensorError::IndexOutOfRange { index: label, bound: m });
                }
                let row = t.row(r);
                let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
                total = total + lse - row[label];
            }
            Tensor::scalar(total / T::from_usize(labels.len()).expect("batch"))
        };
        Ok(self.derived(
            value,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
            },
            &[self.id],
        ))
    }

    /// `a·b / max(‖a‖₂‖b‖₂, 1e-12)` over all elements; a scalar.
    pub fn cosine_similarity(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        let value = {
            let a = self.graph.node(self.id);
            let b = self.graph.node(other.id);
            if a.value.numel() != b.value.numel() {
                return Err(TensorError::ShapeMismatch {
                    op: "cosine_similarity",
                    left: a.value.shape().to_vec(),
                    right: b.value.shape().to_vec(),
                });
            }
            let dot = a.value.dot(&b.value);
            let na = a.value.values().iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = b.value.values().iter().map(|&v| v * v).sum::<T>().sqrt();
            Tensor::scalar(dot / (na * nb).max(T::lit(EPS)))
        };
        Ok(self.derived(value, Op::Cosine(self.id, other.id), &[self.id, other.id]))
    }

    /// Pairwise cosine similarities between rows: `[m, n] × [k, n] -> [m, k]`.
    pub fn cosine_matrix(self, other: Var<'g, T>) -> Result<Var<'g, T>, TensorError> {
        let a = self.flatten()?.normalize_rows();
        let b = other.flatten()?.normalize_rows();
        a.matmul(b.transpose()?)
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<[usize; 4], TensorError> {
    s.try_into().map_err(|_| TensorError::BadRank {
        op,
        expected: 4,
        shape: s.to_vec(),
    })
}

fn conv_out_shape(x: [usize; 4], k: [usize; 4], stride: usize, pad: usize) -> Vec<isize> {
    let s = stride.max(1) as isize;
    vec![
        (x[2] as isize + 2 * pad as isize - k[2] as isize).div_euclid(s) + 1,
        (x[3] as isize + 2 * pad as isize - k[3] as isize).div_euclid(s) + 1,
    ]
}

/// Sign of every element as a tensor.
pub fn sign_tensor<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.map(sign)
}
