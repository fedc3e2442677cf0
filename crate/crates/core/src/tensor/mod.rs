//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op builds a new immutable [`Tensor`] node holding its forward value
//! and references to its parents, so a computation is a DAG grown in creation
//! order. [`backward`] replays the reachable subgraph in reverse topological
//! order and emits vector-Jacobian products that are themselves built from
//! these same ops — gradients are ordinary tensors, so differentiating
//! through a gradient (second-order adaptation) needs no special casing.
//!
//! Shape violations are programming errors and panic with the op name and
//! the offending shapes; data-dependent domain errors (log of a negative
//! number, division by zero) panic likewise.

mod backward;
mod ops;

pub use backward::{backward, backward_with_cuts, Gradients, Tape};
pub(crate) use ops::Rule;
pub use ops::{one_hot, softmax_cross_entropy};

use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

/// Unique, monotonically increasing node id. Parents always have smaller ids
/// than the nodes built from them, so sorting by id is a topological sort.
pub type NodeId = u64;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> NodeId {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner {
    pub(crate) id: NodeId,
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Vec<f64>,
    pub(crate) requires_grad: bool,
    pub(crate) parents: Vec<Tensor>,
    pub(crate) rule: Rule,
}

/// A node in the computation DAG. Cheap to clone (shared ownership).
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Rc<Inner>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        rule: Rule,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data,
                requires_grad,
                parents,
                rule,
            }),
        }
    }

    /// A tensor that does not participate in differentiation.
    pub fn constant(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "constant: {} values do not fill shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: false,
                parents: Vec::new(),
                rule: Rule::Leaf,
            }),
        }
    }

    /// A differentiable leaf (a parameter): gradients accumulate here.
    pub fn leaf(data: Vec<f64>, shape: &[usize]) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "leaf: {} values do not fill shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape: shape.to_vec(),
                data,
                requires_grad: true,
                parents: Vec::new(),
                rule: Rule::Leaf,
            }),
        }
    }

    /// Rank-0 constant.
    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(vec![v], &[])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![0.0; numel_of(shape)], shape)
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::constant(vec![1.0; numel_of(shape)], shape)
    }

    pub fn id(&self) -> NodeId {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.inner.parents
    }

    pub(crate) fn rule(&self) -> &Rule {
        &self.inner.rule
    }

    /// The single value of a rank-0 (or one-element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item: tensor has shape {:?}, not a scalar",
            self.shape()
        );
        self.inner.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.clone()
    }

    /// Cuts the tensor out of the gradient graph: same values, no parents,
    /// `requires_grad == false`.
    pub fn detach(&self) -> Tensor {
        Tensor::constant(self.inner.data.clone(), &self.inner.shape)
    }
}

/// Alias for [`Tensor::detach`], matching the usual estimator notation
/// `sg[x]`.
pub fn stop_gradient(x: &Tensor) -> Tensor {
    x.detach()
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let head: Vec<f64> = self.inner.data.iter().copied().take(8).collect();
        write!(
            f,
            "Tensor(id={}, shape={:?}, grad={}, data≈{:?}{})",
            self.inner.id,
            self.inner.shape,
            self.inner.requires_grad,
            head,
            if self.numel() > 8 { ", …" } else { "" }
        )
    }
}

// ── shape / broadcasting helpers ────────────────────────────────────────────

/// Row-major strides.
pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast result shape under right-aligned numpy rules, or `None` if the
/// shapes are incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides for reading `shape` as if broadcast to `out_shape`: stride 0 on
/// broadcast (size-1 or missing) axes.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides_of(shape);
    let offset = rank - shape.len();
    (0..rank)
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Walks `out_shape` in row-major order, calling `f(flat_index, offsets)`
/// where `offsets[j]` is the flat offset into the j-th strided view (strides
/// of length `out_shape.len()`, 0 on broadcast axes). The offsets are updated
/// incrementally, so the walk is O(1) amortized per element.
pub(crate) fn zip_strided<F: FnMut(usize, &[usize])>(
    out_shape: &[usize],
    strides: &[Vec<usize>],
    mut f: F,
) {
    let n = numel_of(out_shape);
    let rank = out_shape.len();
    let k = strides.len();
    let mut idx = vec![0usize; rank];
    let mut offs = vec![0usize; k];
    for flat in 0..n {
        f(flat, &offs);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            for j in 0..k {
                offs[j] += strides[j][d];
            }
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            for j in 0..k {
                offs[j] -= strides[j][d] * out_shape[d];
            }
        }
    }
}
