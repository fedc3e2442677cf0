//! The op catalog: forward implementations and their vector-Jacobian
//! products.
//!
//! VJPs are built out of the same ops, so every gradient is itself a
//! differentiable tensor expression. Ops that need bookkeeping beyond their
//! parents (reduction axes, argmax positions, gather indices, labels) carry
//! it in their [`Rule`].

use super::{broadcast_shape, broadcast_strides, numel_of, zip_strided, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub(crate) enum Rule {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Matmul,
    Transpose,
    Reshape,
    Exp,
    Log,
    Sqrt,
    Sin,
    Cos,
    Relu,
    Scale(f64),
    AddScalar,
    SumAxis { axis: usize, keepdim: bool },
    MaxAxis { axis: usize, keepdim: bool, argmax: Vec<usize> },
    SumAll,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize },
    SelectRows(Vec<usize>),
    ScatterRows(Vec<usize>),
    SoftmaxLast,
    CrossEntropy { labels: Vec<usize> },
}

fn shape_panic(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("{op}: incompatible shapes {a:?} and {b:?}")
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn binary(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    rule: Rule,
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_op(data, a.shape().to_vec(), vec![a.clone(), b.clone()], rule);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .unwrap_or_else(|| shape_panic(op, a.shape(), b.shape()));
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut data = vec![0.0; numel_of(&out_shape)];
    let (ad, bd) = (a.data(), b.data());
    zip_strided(&out_shape, &[sa, sb], |i, offs| {
        data[i] = f(ad[offs[0]], bd[offs[1]]);
    });
    Tensor::from_op(data, out_shape, vec![a.clone(), b.clone()], rule)
}

fn unary(x: &Tensor, rule: Rule, f: impl Fn(f64) -> f64) -> Tensor {
    let data = x.data().iter().map(|&v| f(v)).collect();
    Tensor::from_op(data, x.shape().to_vec(), vec![x.clone()], rule)
}

impl Tensor {
    // ── elementwise binary (broadcasting) ───────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, "add", Rule::Add, |x, y| x + y)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, "sub", Rule::Sub, |x, y| x - y)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, "mul", Rule::Mul, |x, y| x * y)
    }

    /// Elementwise division. Panics on a zero divisor.
    pub fn div(&self, rhs: &Tensor) -> Tensor {
        binary(self, rhs, "div", Rule::Div, |x, y| {
            assert!(y != 0.0, "div: division by zero");
            x / y
        })
    }

    // ── elementwise unary ───────────────────────────────────────────────

    pub fn exp(&self) -> Tensor {
        unary(self, Rule::Exp, f64::exp)
    }

    /// Natural log. Panics on negative input; `log(0) == -inf` is allowed
    /// (callers that cannot tolerate it clamp first). NaN propagates so
    /// diverged training surfaces as a non-finite loss, not a crash.
    pub fn log(&self) -> Tensor {
        unary(self, Rule::Log, |v| {
            assert!(!(v < 0.0), "log: negative input {v}");
            v.ln()
        })
    }

    /// Panics on negative input; NaN propagates (see [`Tensor::log`]).
    pub fn sqrt(&self) -> Tensor {
        unary(self, Rule::Sqrt, |v| {
            assert!(!(v < 0.0), "sqrt: negative input {v}");
            v.sqrt()
        })
    }

    pub fn sin(&self) -> Tensor {
        unary(self, Rule::Sin, f64::sin)
    }

    pub fn cos(&self) -> Tensor {
        unary(self, Rule::Cos, f64::cos)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, Rule::Relu, |v| v.max(0.0))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        unary(self, Rule::Scale(c), |v| v * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        unary(self, Rule::AddScalar, |v| v + c)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[m,k] @ [k,n] -> [m,n]`. Both operands must be rank 2.
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let (a, b) = (self.shape(), rhs.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            shape_panic("matmul", a, b);
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        if m > 0 && k > 0 && n > 0 {
            // Row-major GEMM: row strides k/n/n, column stride 1.
            unsafe {
                matrixmultiply::dgemm(
                    m,
                    k,
                    n,
                    1.0,
                    self.data().as_ptr(),
                    k as isize,
                    1,
                    rhs.data().as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    out.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
        }
        Tensor::from_op(out, vec![m, n], vec![self.clone(), rhs.clone()], Rule::Matmul)
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Tensor {
        let s = self.shape();
        assert!(s.len() == 2, "transpose: expected rank 2, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Tensor::from_op(out, vec![c, r], vec![self.clone()], Rule::Transpose)
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            numel_of(shape),
            "reshape: cannot view {:?} as {:?}",
            self.shape(),
            shape
        );
        Tensor::from_op(
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Rule::Reshape,
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let src = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let shape = reduced_shape(self.shape(), axis, keepdim);
        Tensor::from_op(out, shape, vec![self.clone()], Rule::SumAxis { axis, keepdim })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let len = self.shape()[axis];
        assert!(len > 0, "mean_axis: empty axis {axis} in {:?}", self.shape());
        self.sum_axis(axis, keepdim).scale(1.0 / len as f64)
    }

    /// Maximum along `axis`. Ties resolve to the lowest index.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let (outer, len, inner) = axis_split(self.shape(), axis);
        assert!(len > 0, "max_axis: empty axis {axis} in {:?}", self.shape());
        let src = self.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        argmax[o * inner + i] = base + i;
                    }
                }
            }
        }
        let shape = reduced_shape(self.shape(), axis, keepdim);
        Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Rule::MaxAxis { axis, keepdim, argmax },
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(vec![s], Vec::new(), vec![self.clone()], Rule::SumAll)
    }

    pub fn mean_all(&self) -> Tensor {
        assert!(self.numel() > 0, "mean_all: empty tensor");
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    // ── slicing / gathering ─────────────────────────────────────────────

    /// Concatenates tensors along `axis`. All shapes must agree on the other
    /// axes.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no parts");
        let first = parts[0].shape();
        let rank = first.len();
        for p in parts {
            let s = p.shape();
            let ok = s.len() == rank
                && s.iter()
                    .enumerate()
                    .all(|(d, &v)| d == axis || v == first[d]);
            if !ok {
                shape_panic("concat", first, s);
            }
        }
        let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut shape = first.to_vec();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![0.0; numel_of(&shape)];
        let mut off = 0usize;
        for p in parts {
            let len = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst = (o * total + off) * inner;
                let s0 = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[s0..s0 + len * inner]);
            }
            off += len;
        }
        Tensor::from_op(out, shape, parts.to_vec(), Rule::Concat { axis })
    }

    /// Slice of length `len` starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, full, inner) = axis_split(self.shape(), axis);
        assert!(
            start + len <= full,
            "narrow: range {start}..{} exceeds axis {axis} of {:?}",
            start + len,
            self.shape()
        );
        let src = self.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let s0 = (o * full + start) * inner;
            let d0 = o * len * inner;
            out[d0..d0 + len * inner].copy_from_slice(&src[s0..s0 + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op(out, shape, vec![self.clone()], Rule::Narrow { axis, start })
    }

    /// Gathers rows of a rank-2 tensor; indices may repeat.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let s = self.shape();
        assert!(s.len() == 2, "select_rows: expected rank 2, got {s:?}");
        let (r, c) = (s[0], s[1]);
        let src = self.data();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &ix in indices {
            assert!(ix < r, "select_rows: index {ix} out of range for {r} rows");
            out.extend_from_slice(&src[ix * c..(ix + 1) * c]);
        }
        Tensor::from_op(
            out,
            vec![indices.len(), c],
            vec![self.clone()],
            Rule::SelectRows(indices.to_vec()),
        )
    }

    /// Adjoint of [`Tensor::select_rows`]: scatters `self`'s rows into a
    /// `rows × cols` zero tensor, accumulating where indices repeat.
    pub fn scatter_rows(&self, indices: &[usize], rows: usize) -> Tensor {
        let s = self.shape();
        assert!(s.len() == 2, "scatter_rows: expected rank 2, got {s:?}");
        assert_eq!(
            s[0],
            indices.len(),
            "scatter_rows: {} rows vs {} indices",
            s[0],
            indices.len()
        );
        let c = s[1];
        let src = self.data();
        let mut out = vec![0.0; rows * c];
        for (j, &ix) in indices.iter().enumerate() {
            assert!(ix < rows, "scatter_rows: index {ix} out of range for {rows} rows");
            for i in 0..c {
                out[ix * c + i] += src[j * c + i];
            }
        }
        Tensor::from_op(
            out,
            vec![rows, c],
            vec![self.clone()],
            Rule::ScatterRows(indices.to_vec()),
        )
    }

    // ── softmax family ──────────────────────────────────────────────────

    /// Softmax over the last axis, numerically shifted by the row max.
    pub fn softmax_last(&self) -> Tensor {
        let s = self.shape();
        assert!(!s.is_empty(), "softmax_last: rank-0 input");
        let cols = s[s.len() - 1];
        assert!(cols > 0, "softmax_last: empty last axis in {s:?}");
        let rows = self.numel() / cols;
        let src = self.data();
        let mut out = vec![0.0; self.numel()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                out[r * cols + j] = e;
                sum += e;
            }
            for j in 0..cols {
                out[r * cols + j] /= sum;
            }
        }
        Tensor::from_op(out, s.to_vec(), vec![self.clone()], Rule::SoftmaxLast)
    }

    /// Log-softmax over the last axis, composed from stable primitives.
    pub fn log_softmax_last(&self) -> Tensor {
        let last = self.shape().len() - 1;
        let m = self.max_axis(last, true);
        let shifted = self.sub(&m);
        let lse = shifted.exp().sum_axis(last, true).log();
        shifted.sub(&lse)
    }

    // ── composites used across the crate ────────────────────────────────

    /// Pairwise squared Euclidean distances between the rows of `self`
    /// (`[a,d]`) and `other` (`[b,d]`), as `[a,b]`. Tiny negative values can
    /// appear from cancellation; callers needing exact non-negativity clamp.
    pub fn sq_euclidean(&self, other: &Tensor) -> Tensor {
        let (s, t) = (self.shape(), other.shape());
        if s.len() != 2 || t.len() != 2 || s[1] != t[1] {
            shape_panic("sq_euclidean", s, t);
        }
        let x2 = self.square().sum_axis(1, true); // [a,1]
        let y2 = other.square().sum_axis(1, true).transpose(); // [1,b]
        let xy = self.matmul(&other.transpose()); // [a,b]
        x2.add(&y2).sub(&xy.scale(2.0))
    }

    /// Inverted dropout: keeps each element with probability `1 - rate`,
    /// scaling survivors by `1/(1 - rate)`. The mask is a constant, so the
    /// gradient routes only through kept elements.
    pub fn dropout(&self, rate: f64, rng: &mut ChaCha8Rng) -> Tensor {
        assert!((0.0..1.0).contains(&rate), "dropout: rate {rate} not in [0,1)");
        if rate == 0.0 {
            return self.clone();
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.numel())
            .map(|_| if rng.random::<f64>() >= rate { keep } else { 0.0 })
            .collect();
        self.mul(&Tensor::constant(mask, self.shape()))
    }

    /// Standardizes each column of a rank-2 tensor by the batch mean and
    /// standard deviation of the rows present, with `eps` inside the root.
    pub fn batch_standardize(&self, eps: f64) -> Tensor {
        assert!(
            self.shape().len() == 2,
            "batch_standardize: expected rank 2, got {:?}",
            self.shape()
        );
        let mu = self.mean_axis(0, true);
        let centered = self.sub(&mu);
        let var = centered.square().mean_axis(0, true);
        centered.div(&var.add_scalar(eps).sqrt())
    }
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

/// `[b, n]` constant with a 1.0 at each `(row, labels[row])`.
pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (r, &y) in labels.iter().enumerate() {
        assert!(y < classes, "one_hot: label {y} out of range for {classes} classes");
        data[r * classes + y] = 1.0;
    }
    Tensor::constant(data, &[labels.len(), classes])
}

/// Mean cross-entropy of row-softmax class probabilities against integer
/// labels. Forward uses the shifted log-sum-exp; the VJP is the classic
/// `(softmax - onehot) / batch`, itself built from differentiable ops.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Tensor {
    let s = logits.shape();
    assert!(s.len() == 2, "softmax_cross_entropy: expected rank 2, got {s:?}");
    let (b, n) = (s[0], s[1]);
    assert_eq!(b, labels.len(), "softmax_cross_entropy: {b} rows vs {} labels", labels.len());
    let src = logits.data();
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        assert!(y < n, "softmax_cross_entropy: label {y} out of range for {n} classes");
        let row = &src[r * n..(r + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    Tensor::from_op(
        vec![total / b as f64],
        Vec::new(),
        vec![logits.clone()],
        Rule::CrossEntropy {
            labels: labels.to_vec(),
        },
    )
}

// ── vector-Jacobian products ────────────────────────────────────────────────

/// Sums `grad` down to `target` shape, undoing broadcasting: collapse extra
/// leading axes, then sum (keepdim) over axes that were stretched from 1.
pub(crate) fn reduce_grad(grad: &Tensor, target: &[usize]) -> Tensor {
    let mut g = grad.clone();
    while g.shape().len() > target.len() {
        g = g.sum_axis(0, false);
    }
    for d in 0..target.len() {
        if target[d] == 1 && g.shape()[d] != 1 {
            g = g.sum_axis(d, true);
        }
    }
    g
}

/// Gradient contributions of `node` to each parent, as `(parent_slot, grad)`
/// pairs. `grad` is the incoming cotangent with `node`'s shape.
pub(crate) fn vjp(node: &Tensor, grad: &Tensor) -> Vec<(usize, Tensor)> {
    let parents = node.parents();
    match node.rule() {
        Rule::Leaf => Vec::new(),
        Rule::Add => vec![
            (0, reduce_grad(grad, parents[0].shape())),
            (1, reduce_grad(grad, parents[1].shape())),
        ],
        Rule::Sub => vec![
            (0, reduce_grad(grad, parents[0].shape())),
            (1, reduce_grad(&grad.neg(), parents[1].shape())),
        ],
        Rule::Mul => vec![
            (0, reduce_grad(&grad.mul(&parents[1]), parents[0].shape())),
            (1, reduce_grad(&grad.mul(&parents[0]), parents[1].shape())),
        ],
        Rule::Div => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![
                (0, reduce_grad(&grad.div(b), a.shape())),
                (1, reduce_grad(&grad.mul(a).div(&b.square()).neg(), b.shape())),
            ]
        }
        Rule::Matmul => {
            let (a, b) = (&parents[0], &parents[1]);
            vec![
                (0, grad.matmul(&b.transpose())),
                (1, a.transpose().matmul(grad)),
            ]
        }
        Rule::Transpose => vec![(0, grad.transpose())],
        Rule::Reshape => vec![(0, grad.reshape(parents[0].shape()))],
        Rule::Exp => vec![(0, grad.mul(node))],
        Rule::Log => vec![(0, grad.div(&parents[0]))],
        Rule::Sqrt => vec![(0, grad.div(&node.scale(2.0)))],
        Rule::Sin => vec![(0, grad.mul(&parents[0].cos()))],
        Rule::Cos => vec![(0, grad.mul(&parents[0].sin()).neg())],
        Rule::Relu => {
            let mask: Vec<f64> = parents[0]
                .data()
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                .collect();
            vec![(0, grad.mul(&Tensor::constant(mask, parents[0].shape())))]
        }
        Rule::Scale(c) => vec![(0, grad.scale(*c))],
        Rule::AddScalar => vec![(0, grad.clone())],
        Rule::SumAxis { axis, keepdim } => {
            let g = restore_axis(grad, parents[0].shape(), *axis, *keepdim);
            vec![(0, g.mul(&Tensor::ones(parents[0].shape())))]
        }
        Rule::MaxAxis { axis, keepdim, argmax } => {
            let pshape = parents[0].shape();
            let mut mask = vec![0.0; numel_of(pshape)];
            for &pos in argmax {
                mask[pos] = 1.0;
            }
            let g = restore_axis(grad, pshape, *axis, *keepdim);
            vec![(0, Tensor::constant(mask, pshape).mul(&g))]
        }
        Rule::SumAll => vec![(0, grad.mul(&Tensor::ones(parents[0].shape())))],
        Rule::Concat { axis } => {
            let mut out = Vec::with_capacity(parents.len());
            let mut off = 0usize;
            for (slot, p) in parents.iter().enumerate() {
                let len = p.shape()[*axis];
                out.push((slot, grad.narrow(*axis, off, len)));
                off += len;
            }
            out
        }
        Rule::Narrow { axis, start } => {
            let pshape = parents[0].shape();
            let full = pshape[*axis];
            let len = node.shape()[*axis];
            let mut parts: Vec<Tensor> = Vec::with_capacity(3);
            if *start > 0 {
                let mut s = pshape.to_vec();
                s[*axis] = *start;
                parts.push(Tensor::zeros(&s));
            }
            parts.push(grad.clone());
            if start + len < full {
                let mut s = pshape.to_vec();
                s[*axis] = full - start - len;
                parts.push(Tensor::zeros(&s));
            }
            vec![(0, Tensor::concat(&parts, *axis))]
        }
        Rule::SelectRows(indices) => {
            vec![(0, grad.scatter_rows(indices, parents[0].shape()[0]))]
        }
        Rule::ScatterRows(indices) => vec![(0, grad.select_rows(indices))],
        Rule::SoftmaxLast => {
            let y = node;
            let last = y.shape().len() - 1;
            let gy = grad.mul(y);
            let s = gy.sum_axis(last, true);
            vec![(0, y.mul(&grad.sub(&s)))]
        }
        Rule::CrossEntropy { labels } => {
            let logits = &parents[0];
            let n = logits.shape()[1];
            let b = labels.len() as f64;
            let diff = logits.softmax_last().sub(&one_hot(labels, n));
            vec![(0, diff.mul(grad).scale(1.0 / b))]
        }
    }
}

/// Reshapes a reduced-axis gradient back to broadcastable (keepdim) form.
fn restore_axis(grad: &Tensor, pshape: &[usize], axis: usize, keepdim: bool) -> Tensor {
    if keepdim {
        grad.clone()
    } else {
        let mut s = pshape.to_vec();
        s[axis] = 1;
        grad.reshape(&s)
    }
}
