//! Minimal reverse-mode autodiff over `ndarray` tensors (f64).
//!
//! A [`Tape`] records one computation; [`Var`]s are handles into it. Nodes
//! only reference earlier nodes, so the insertion order is already a
//! topological order and backward is a single reverse sweep. Constants and
//! frozen parameters are inserted with `needs_grad = false` and prune the
//! sweep: gradients are never materialized for branches that cannot reach a
//! gradient-carrying leaf.
//!
//! All reductions run in a fixed order regardless of thread count, so results
//! are reproducible bit-for-bit across runs and machines with equal FP units.

mod spatial;

pub mod fd;

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Rows per parallel matmul chunk. Fixed (not derived from thread count) so
/// chunking, and therefore FP summation order, is always the same.
const MATMUL_CHUNK: usize = 256;

type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &[&ArrayD<f64>], &ArrayD<f64>) -> Vec<ArrayD<f64>>>;

struct Node {
    value: ArrayD<f64>,
    parents: Vec<usize>,
    needs_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by the originating [`Var`].
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `var`; `None` when no gradient flowed there.
    pub fn get(&self, var: Var) -> Option<&ArrayD<f64>> {
        assert_eq!(var.tape_id, self.tape_id, "gradient query from another tape");
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape_id: self.id,
            index: nodes.len() - 1,
        }
    }

    fn check(&self, var: Var) -> usize {
        assert_eq!(var.tape_id, self.id, "var belongs to another tape");
        var.index
    }

    /// Insert a leaf tensor. Gradients accumulate into it only when
    /// `needs_grad` is set.
    pub fn leaf(&self, value: ArrayD<f64>, needs_grad: bool) -> Var {
        self.push(Node {
            value,
            parents: vec![],
            needs_grad,
            backward: None,
        })
    }

    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, var: Var) -> ArrayD<f64> {
        let idx = self.check(var);
        self.nodes.borrow()[idx].value.clone()
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        let idx = self.check(var);
        self.nodes.borrow()[idx].value.shape().to_vec()
    }

    pub fn scalar_value(&self, var: Var) -> f64 {
        let idx = self.check(var);
        let nodes = self.nodes.borrow();
        let v = &nodes[idx].value;
        assert_eq!(v.len(), 1, "scalar_value on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn needs_grad(&self, var: Var) -> bool {
        let idx = self.check(var);
        self.nodes.borrow()[idx].needs_grad
    }

    /// Re-insert the current value of `var` as a constant, cutting the
    /// gradient path (stop-gradient).
    pub fn detach(&self, var: Var) -> Var {
        let value = self.value(var);
        self.constant(value)
    }

    /// Core primitive for registering an operation node. `backward` receives
    /// (upstream gradient, parent values, own value) and must return one
    /// gradient per parent, in parent order.
    pub fn custom_op(&self, parents: &[Var], value: ArrayD<f64>, backward: BackwardFn) -> Var {
        let parent_idx: Vec<usize> = parents.iter().map(|&p| self.check(p)).collect();
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parent_idx.iter().any(|&i| nodes[i].needs_grad)
        };
        self.push(Node {
            value,
            parents: parent_idx,
            needs_grad,
            backward: if needs_grad { Some(backward) } else { None },
        })
    }

    fn unary<F, B>(&self, a: Var, forward: F, backward: B) -> Var
    where
        F: Fn(&ArrayD<f64>) -> ArrayD<f64>,
        B: Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> ArrayD<f64> + 'static,
    {
        let idx = self.check(a);
        let value = {
            let nodes = self.nodes.borrow();
            forward(&nodes[idx].value)
        };
        self.custom_op(
            &[a],
            value,
            Box::new(move |grad, parents, value| vec![backward(grad, parents[0], value)]),
        )
    }

    /// Reverse sweep from a scalar loss. Returns per-var gradients.
    pub fn backward(&self, loss: Var) -> Gradients {
        let loss_idx = self.check(loss);
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[loss_idx].value.len(),
            1,
            "backward requires a scalar loss"
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss_idx] = Some(ArrayD::from_elem(nodes[loss_idx].value.raw_dim(), 1.0));

        for i in (0..=loss_idx).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            if let Some(backward) = &node.backward {
                let parent_values: Vec<&ArrayD<f64>> =
                    node.parents.iter().map(|&p| &nodes[p].value).collect();
                let parent_grads = backward(&grad, &parent_values, &node.value);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    if !nodes[p].needs_grad {
                        continue;
                    }
                    debug_assert_eq!(
                        pg.shape(),
                        nodes[p].value.shape(),
                        "gradient shape mismatch at node {p}"
                    );
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            if node.needs_grad && node.backward.is_none() {
                grads[i] = Some(grad);
            }
        }
        Gradients {
            tape_id: self.id,
            grads,
        }
    }
}

/// Sum `grad` down to `shape`, undoing numpy-style broadcasting.
fn reduce_to_shape(mut grad: ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    while grad.ndim() > shape.len() {
        grad = grad.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && grad.shape()[ax] != 1 {
            grad = grad.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    grad
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        assert!(
            da == db || da == 1 || db == 1,
            "incompatible broadcast shapes {a:?} vs {b:?}"
        );
        out[i] = da.max(db);
    }
    out
}

fn broadcast_apply<F: Fn(f64, f64) -> f64>(
    a: &ArrayD<f64>,
    b: &ArrayD<f64>,
    f: F,
) -> ArrayD<f64> {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = ArrayD::zeros(IxDyn(&shape));
    ndarray::Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

impl Tape {
    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_apply(&nodes[self.check(a)].value, &nodes[self.check(b)].value, |x, y| x + y)
        };
        self.custom_op(
            &[a, b],
            value,
            Box::new(|grad, parents, _| {
                vec![
                    reduce_to_shape(grad.clone(), parents[0].shape()),
                    reduce_to_shape(grad.clone(), parents[1].shape()),
                ]
            }),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_apply(&nodes[self.check(a)].value, &nodes[self.check(b)].value, |x, y| x - y)
        };
        self.custom_op(
            &[a, b],
            value,
            Box::new(|grad, parents, _| {
                vec![
                    reduce_to_shape(grad.clone(), parents[0].shape()),
                    reduce_to_shape(-grad.clone(), parents[1].shape()),
                ]
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_apply(&nodes[self.check(a)].value, &nodes[self.check(b)].value, |x, y| x * y)
        };
        self.custom_op(
            &[a, b],
            value,
            Box::new(|grad, parents, _| {
                let ga = broadcast_apply(grad, parents[1], |g, y| g * y);
                let gb = broadcast_apply(grad, parents[0], |g, x| g * x);
                vec![
                    reduce_to_shape(ga, parents[0].shape()),
                    reduce_to_shape(gb, parents[1].shape()),
                ]
            }),
        )
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            broadcast_apply(&nodes[self.check(a)].value, &nodes[self.check(b)].value, |x, y| x / y)
        };
        self.custom_op(
            &[a, b],
            value,
            Box::new(|grad, parents, _| {
                let ga = broadcast_apply(grad, parents[1], |g, y| g / y);
                let gb_full = {
                    let num = broadcast_apply(grad, parents[0], |g, x| g * x);
                    broadcast_apply(&num, parents[1], |n, y| -n / (y * y))
                };
                vec![
                    reduce_to_shape(ga, parents[0].shape()),
                    reduce_to_shape(gb_full, parents[1].shape()),
                ]
            }),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x.clone(), |g, _, _| -g.clone())
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, |g, _, _| g.clone())
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x * c, move |g, _, _| g * c)
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| v.max(0.0)),
            |g, x, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
                    if v <= 0.0 {
                        *o = 0.0;
                    }
                });
                out
            },
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            move |x| x.mapv(|v| if v > 0.0 { v } else { slope * v }),
            move |g, x, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
                    if v <= 0.0 {
                        *o *= slope;
                    }
                });
                out
            },
        )
    }

    /// Numerically stable softplus: `ln(1 + e^x)`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| if v > 30.0 { v } else { v.exp().ln_1p() }),
            |g, x, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
                    *o *= 1.0 / (1.0 + (-v).exp());
                });
                out
            },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(|v| 1.0 / (1.0 + (-v).exp())),
            |g, _, y| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(y).for_each(|o, &s| {
                    *o *= s * (1.0 - s);
                });
                out
            },
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::exp),
            |g, _, y| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(y).for_each(|o, &e| *o *= e);
                out
            },
        )
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::ln),
            |g, x, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| *o /= v);
                out
            },
        )
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::sqrt),
            |g, _, y| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(y).for_each(|o, &s| *o *= 0.5 / s);
                out
            },
        )
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.mapv(f64::abs),
            |g, x, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
                    *o *= if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                });
                out
            },
        )
    }

    /// tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044_715;
        self.unary(
            a,
            |x| x.mapv(|v| 0.5 * v * (1.0 + (C * (v + A * v.powi(3))).tanh())),
            |g, x, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
                    let inner = C * (v + A * v.powi(3));
                    let t = inner.tanh();
                    let d_inner = C * (1.0 + 3.0 * A * v * v);
                    *o *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * d_inner;
                });
                out
            },
        )
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            a,
            move |x| x.mapv(|v| v.clamp(lo, hi)),
            move |g, x, _| {
                let mut out = g.clone();
                ndarray::Zip::from(&mut out).and(x).for_each(|o, &v| {
                    if !(lo..=hi).contains(&v) {
                        *o = 0.0;
                    }
                });
                out
            },
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| ArrayD::from_elem(IxDyn(&[]), x.sum()),
            |g, x, _| {
                let gv = *g.iter().next().unwrap();
                ArrayD::from_elem(x.raw_dim(), gv)
            },
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| ArrayD::from_elem(IxDyn(&[]), x.sum() / x.len() as f64),
            |g, x, _| {
                let gv = *g.iter().next().unwrap() / x.len() as f64;
                ArrayD::from_elem(x.raw_dim(), gv)
            },
        )
    }

    /// Sum along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis_keep(&self, a: Var, axis: usize) -> Var {
        self.unary(
            a,
            move |x| x.sum_axis(Axis(axis)).insert_axis(Axis(axis)),
            move |g, x, _| {
                g.broadcast(x.raw_dim()).expect("sum_axis grad").to_owned()
            },
        )
    }

    /// Mean along `axis`, keeping it as a length-1 dimension.
    pub fn mean_axis_keep(&self, a: Var, axis: usize) -> Var {
        self.unary(
            a,
            move |x| {
                let n = x.shape()[axis] as f64;
                x.sum_axis(Axis(axis)).insert_axis(Axis(axis)) / n
            },
            move |g, x, _| {
                let n = x.shape()[axis] as f64;
                (g.broadcast(x.raw_dim()).expect("mean_axis grad").to_owned()) / n
            },
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let shape = shape.to_vec();
        self.unary(
            a,
            move |x| {
                x.to_shape(IxDyn(&shape))
                    .expect("reshape: incompatible element count")
                    .to_owned()
            },
            |g, x, _| {
                g.to_shape(x.raw_dim()).expect("reshape grad").to_owned()
            },
        )
    }

    pub fn concat(&self, axis: usize, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let value = {
            let nodes = self.nodes.borrow();
            let views: Vec<ArrayViewD<f64>> = parts
                .iter()
                .map(|&p| nodes[self.check(p)].value.view())
                .collect();
            ndarray::concatenate(Axis(axis), &views).expect("concat shapes")
        };
        self.custom_op(
            parts,
            value,
            Box::new(move |grad, parents, _| {
                let mut out = Vec::with_capacity(parents.len());
                let mut offset = 0;
                for p in parents {
                    let len = p.shape()[axis];
                    let slice = grad
                        .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + len))
                        .to_owned();
                    out.push(slice);
                    offset += len;
                }
                out
            }),
        )
    }

    /// Contiguous range along one axis.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        self.unary(
            a,
            move |x| {
                x.slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
                    .to_owned()
            },
            move |g, x, _| {
                let mut out = ArrayD::zeros(x.raw_dim());
                out.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..start + len))
                    .assign(g);
                out
            },
        )
    }

    /// Softmax along `axis` (numerically stabilized).
    pub fn softmax(&self, a: Var, axis: usize) -> Var {
        self.unary(
            a,
            move |x| {
                let max = x.fold_axis(Axis(axis), f64::NEG_INFINITY, |m, &v| m.max(v));
                let max = max.insert_axis(Axis(axis));
                let mut e = x - &max;
                e.mapv_inplace(f64::exp);
                let denom = e.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                e / &denom
            },
            move |g, _, y| {
                let dot = (g * y).sum_axis(Axis(axis)).insert_axis(Axis(axis));
                y * &(g - &dot)
            },
        )
    }

    /// 2-D matrix product with deterministic row-chunk parallelism.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            let av = nodes[self.check(a)].value.view().into_dimensionality::<Ix2>().expect("matmul lhs rank");
            let bv = nodes[self.check(b)].value.view().into_dimensionality::<Ix2>().expect("matmul rhs rank");
            par_matmul(&av.to_owned(), &bv.to_owned()).into_dyn()
        };
        self.custom_op(
            &[a, b],
            value,
            Box::new(|grad, parents, _| {
                let g = grad.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let a = parents[0].view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let b = parents[1].view().into_dimensionality::<Ix2>().unwrap().to_owned();
                let ga = par_matmul(&g, &b.t().to_owned());
                let gb = par_matmul(&a.t().to_owned(), &g);
                vec![ga.into_dyn(), gb.into_dyn()]
            }),
        )
    }

    /// Batched matrix product on rank-3 tensors `(B, M, K) x (B, K, N)`.
    pub fn bmm(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            bmm_arrays(&nodes[self.check(a)].value, &nodes[self.check(b)].value)
        };
        self.custom_op(
            &[a, b],
            value,
            Box::new(|grad, parents, _| {
                let ga = bmm_arrays(grad, &transpose12(parents[1]));
                let gb = bmm_arrays(&transpose12(parents[0]), grad);
                vec![ga, gb]
            }),
        )
    }

    /// Permute tensor axes.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Var {
        let axes_vec = axes.to_vec();
        let inverse: Vec<usize> = {
            let mut inv = vec![0; axes_vec.len()];
            for (i, &ax) in axes_vec.iter().enumerate() {
                inv[ax] = i;
            }
            inv
        };
        self.unary(
            a,
            move |x| {
                x.view()
                    .permuted_axes(IxDyn(&axes_vec))
                    .as_standard_layout()
                    .to_owned()
            },
            move |g, _, _| {
                g.view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned()
            },
        )
    }
}

pub(crate) fn par_matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    use ndarray::parallel::prelude::*;
    let (m, _) = a.dim();
    let n = b.dim().1;
    let mut out = Array2::zeros((m, n));
    if m <= MATMUL_CHUNK {
        general_mat_mul(1.0, a, b, 0.0, &mut out);
    } else {
        out.axis_chunks_iter_mut(Axis(0), MATMUL_CHUNK)
            .into_par_iter()
            .enumerate()
            .for_each(|(i, mut chunk)| {
                let start = i * MATMUL_CHUNK;
                let end = (start + chunk.shape()[0]).min(m);
                let a_chunk = a.slice(ndarray::s![start..end, ..]);
                general_mat_mul(1.0, &a_chunk, b, 0.0, &mut chunk);
            });
    }
    out
}

fn transpose12(x: &ArrayD<f64>) -> ArrayD<f64> {
    x.view()
        .permuted_axes(IxDyn(&[0, 2, 1]))
        .as_standard_layout()
        .to_owned()
}

fn bmm_arrays(a: &ArrayD<f64>, b: &ArrayD<f64>) -> ArrayD<f64> {
    assert_eq!(a.ndim(), 3, "bmm expects rank-3 lhs");
    assert_eq!(b.ndim(), 3, "bmm expects rank-3 rhs");
    let (batch, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (b_batch, bk, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!(batch, b_batch);
    assert_eq!(k, bk);
    let mut out = ArrayD::zeros(IxDyn(&[batch, m, n]));
    for i in 0..batch {
        let av = a.index_axis(Axis(0), i);
        let bv = b.index_axis(Axis(0), i);
        let av2 = av.into_dimensionality::<Ix2>().unwrap();
        let bv2 = bv.into_dimensionality::<Ix2>().unwrap();
        let mut ov = out.index_axis_mut(Axis(0), i);
        let mut ov2 = ov.view_mut().into_dimensionality::<Ix2>().unwrap();
        general_mat_mul(1.0, &av2, &bv2, 0.0, &mut ov2);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::fd::check_gradients;
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn rand_array(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn add_mul_closed_form_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(arr1(&[1.0, 2.0, 3.0]).into_dyn(), true);
        let b = tape.leaf(arr1(&[4.0, 5.0, 6.0]).into_dyn(), true);
        let y = tape.sum_all(tape.mul(tape.add(a, b), a));
        // y = sum a*(a+b); dy/da = 2a + b, dy/db = a
        assert_eq!(tape.scalar_value(y), 1.0 * 5.0 + 2.0 * 7.0 + 3.0 * 9.0);
        let grads = tape.backward(y);
        assert_eq!(
            grads.get(a).unwrap().as_slice().unwrap(),
            &[6.0, 9.0, 12.0]
        );
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn broadcasting_reduces_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(rand_array(&[4, 3], 1), true);
        let bias = tape.leaf(rand_array(&[1, 3], 2), true);
        let y = tape.sum_all(tape.mul(tape.add(a, bias), tape.add(a, bias)));
        let grads = tape.backward(y);
        assert_eq!(grads.get(bias).unwrap().shape(), &[1, 3]);
        assert_eq!(grads.get(a).unwrap().shape(), &[4, 3]);
    }

    #[test]
    fn matmul_matches_reference() {
        let tape = Tape::new();
        let a = tape.constant(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = tape.constant(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let y = tape.matmul(a, b);
        let v = tape.value(y);
        assert_eq!(v.shape(), &[2, 2]);
        assert_eq!(v[[0, 0]], 19.0);
        assert_eq!(v[[1, 1]], 50.0);
    }

    #[test]
    fn par_matmul_is_chunk_invariant() {
        // Shapes straddling the chunk boundary must agree with the serial path.
        let a_small = rand_array(&[9, 7], 3).into_dimensionality::<Ix2>().unwrap();
        let b = rand_array(&[7, 5], 4).into_dimensionality::<Ix2>().unwrap();
        let mut reference = Array2::zeros((9, 5));
        general_mat_mul(1.0, &a_small, &b, 0.0, &mut reference);
        assert_eq!(par_matmul(&a_small, &b), reference);

        let a_big = rand_array(&[MATMUL_CHUNK * 2 + 13, 7], 5)
            .into_dimensionality::<Ix2>()
            .unwrap();
        let mut reference = Array2::zeros((MATMUL_CHUNK * 2 + 13, 5));
        general_mat_mul(1.0, &a_big, &b, 0.0, &mut reference);
        assert_eq!(par_matmul(&a_big, &b), reference);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let inputs = vec![rand_array(&[3, 4], 10)];
        check_gradients(
            &inputs,
            |tape, vars| {
                let x = vars[0];
                let mut y = tape.sigmoid(x);
                y = tape.add(y, tape.softplus(x));
                y = tape.mul(y, tape.exp(tape.mul_scalar(x, 0.3)));
                y = tape.add(y, tape.gelu(x));
                y = tape.add(y, tape.leaky_relu(x, 0.2));
                tape.sum_all(y)
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn reduction_and_shape_ops_match_finite_differences() {
        let inputs = vec![rand_array(&[2, 3, 4], 11)];
        check_gradients(
            &inputs,
            |tape, vars| {
                let x = vars[0];
                let m = tape.mean_axis_keep(x, 1);
                let centered = tape.sub(x, m);
                let s = tape.sum_axis_keep(tape.mul(centered, centered), 2);
                let r = tape.reshape(s, &[6]);
                let n = tape.narrow(r, 0, 1, 4);
                tape.mean_all(tape.sqrt(tape.add_scalar(n, 2.0)))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn matmul_softmax_gradients_match_finite_differences() {
        let inputs = vec![rand_array(&[4, 3], 12), rand_array(&[3, 5], 13)];
        check_gradients(
            &inputs,
            |tape, vars| {
                let y = tape.matmul(vars[0], vars[1]);
                let sm = tape.softmax(y, 1);
                let w = tape.constant(rand_array(&[4, 5], 14));
                tape.sum_all(tape.mul(sm, w))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn bmm_and_permute_gradients_match_finite_differences() {
        let inputs = vec![rand_array(&[2, 3, 4], 15), rand_array(&[2, 4, 5], 16)];
        check_gradients(
            &inputs,
            |tape, vars| {
                let y = tape.bmm(vars[0], vars[1]);
                let p = tape.permute(y, &[1, 0, 2]);
                tape.sum_all(tape.mul(p, p))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn concat_and_div_gradients_match_finite_differences() {
        let inputs = vec![rand_array(&[2, 3], 17), rand_array(&[2, 2], 18)];
        check_gradients(
            &inputs,
            |tape, vars| {
                let joined = tape.concat(1, &[vars[0], vars[1]]);
                let denom = tape.add_scalar(tape.mul(joined, joined), 1.5);
                tape.sum_all(tape.div(joined, denom))
            },
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn abs_and_clamp_gradients_away_from_kinks() {
        let mut x = rand_array(&[4, 4], 19);
        x.mapv_inplace(|v| if v.abs() < 0.2 { v + 0.4 } else { v });
        check_gradients(
            &[x],
            |tape, vars| {
                let a = tape.abs(vars[0]);
                let c = tape.clamp(vars[0], -0.9, 0.9);
                tape.sum_all(tape.add(a, tape.mul(c, c)))
            },
            1e-6,
            1e-5,
        );
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[2.0]).into_dyn(), true);
        let d = tape.detach(x);
        let y = tape.sum_all(tape.mul(d, x));
        let grads = tape.backward(y);
        // y = detach(x) * x, so dy/dx sees only the live branch.
        assert_eq!(grads.get(x).unwrap()[[0]], 2.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(arr1(&[1.0, 2.0]).into_dyn(), true);
        let frozen = tape.constant(arr1(&[3.0, 4.0]).into_dyn());
        let y = tape.sum_all(tape.mul(x, frozen));
        let grads = tape.backward(y);
        assert!(grads.get(frozen).is_none());
        assert_eq!(grads.get(x).unwrap().as_slice().unwrap(), &[3.0, 4.0]);
    }
}
