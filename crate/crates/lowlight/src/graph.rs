//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every operation appends a node holding its value and the indices of its
//! parents; `backward` walks the tape in reverse and accumulates exact
//! analytic adjoints. The op set is intentionally small: elementwise
//! arithmetic, matrix products, a general `gather` (which subsumes padding,
//! rolling, window partitioning, broadcasting and permutation — its adjoint
//! is scatter-add), axis reductions and a valid 3x3 convolution. Everything
//! else (softmax, layer norm, means) is composed from these, so adjoints
//! stay exact by construction.
//!
//! Values are computed eagerly at node creation. Shape errors inside the
//! graph are programmer errors and panic; user-facing validation lives in
//! the calling modules.

use std::cell::RefCell;
use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Neg,
    Exp,
    Sqrt,
    Abs,
    Relu,
    Sigmoid,
    Gelu,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op<T> {
    Leaf,
    Unary(UnaryKind, usize),
    Binary(BinaryKind, usize, usize),
    AddConst(T, usize),
    MulConst(T, usize),
    /// `[m,k] x [k,n]`.
    Matmul {
        a: usize,
        b: usize,
    },
    /// Batched `[g,m,k] x [g,k,n]`.
    BatchMatmul {
        a: usize,
        b: usize,
    },
    /// `out[i] = parent[indices[i]]`.
    Gather {
        p: usize,
        indices: Arc<Vec<usize>>,
    },
    Reshape(usize),
    SumAxis {
        p: usize,
        axis: usize,
    },
    SumAll(usize),
    /// Max over the last axis; ties resolve to the lowest index.
    MaxLast {
        p: usize,
        argmax: Vec<usize>,
    },
    /// Valid 3x3 convolution over a channels-last `[h,w,cin]` input.
    Conv3x3Valid {
        input: usize,
        weight: usize,
        bias: usize,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only computation tape.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Gradients of a scalar with respect to every tracked node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if `v` was not on any differentiable path.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Tracked input: gradients will be accumulated for it.
    pub fn leaf(&self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, true)
    }

    /// Untracked input: treated as a constant by `backward`.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes.borrow()[v.0].value.len()
    }

    /// Clone out the value of a node.
    pub fn value(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        Tensor::new(nodes[v.0].shape.clone(), nodes[v.0].value.clone())
    }

    /// Value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> T {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[v.0].value.len(), 1, "not a scalar node");
        nodes[v.0].value[0]
    }

    /// Read-only access to a node's data without cloning.
    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn unary(&self, kind: UnaryKind, a: Var) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let value = match kind {
                UnaryKind::Neg => n.value.iter().map(|&x| -x).collect(),
                UnaryKind::Exp => n.value.iter().map(|&x| x.exp()).collect(),
                UnaryKind::Sqrt => n.value.iter().map(|&x| x.sqrt()).collect(),
                UnaryKind::Abs => n.value.iter().map(|&x| x.abs()).collect(),
                UnaryKind::Relu => n
                    .value
                    .iter()
                    .map(|&x| if x > T::zero() { x } else { T::zero() })
                    .collect(),
                UnaryKind::Sigmoid => n
                    .value
                    .iter()
                    .map(|&x| T::one() / (T::one() + (-x).exp()))
                    .collect(),
                UnaryKind::Gelu => n.value.iter().map(|&x| gelu(x)).collect(),
            };
            (n.shape.clone(), value, n.needs_grad)
        };
        self.push(shape, value, Op::Unary(kind, a.0), needs)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(UnaryKind::Neg, a)
    }
    pub fn exp(&self, a: Var) -> Var {
        self.unary(UnaryKind::Exp, a)
    }
    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sqrt, a)
    }
    pub fn abs(&self, a: Var) -> Var {
        self.unary(UnaryKind::Abs, a)
    }
    pub fn relu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }
    pub fn gelu(&self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    fn binary(&self, kind: BinaryKind, a: Var, b: Var) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!(
                na.shape, nb.shape,
                "elementwise op on mismatched shapes {:?} vs {:?}",
                na.shape, nb.shape
            );
            let value = match kind {
                BinaryKind::Add => zip2(&na.value, &nb.value, |x, y| x + y),
                BinaryKind::Sub => zip2(&na.value, &nb.value, |x, y| x - y),
                BinaryKind::Mul => zip2(&na.value, &nb.value, |x, y| x * y),
                BinaryKind::Div => zip2(&na.value, &nb.value, |x, y| x / y),
            };
            (na.shape.clone(), value, na.needs_grad || nb.needs_grad)
        };
        self.push(shape, value, Op::Binary(kind, a.0, b.0), needs)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn add_const(&self, a: Var, c: T) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| x + c).collect(),
                n.needs_grad,
            )
        };
        self.push(shape, value, Op::AddConst(c, a.0), needs)
    }

    pub fn mul_const(&self, a: Var, c: T) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| x * c).collect(),
                n.needs_grad,
            )
        };
        self.push(shape, value, Op::MulConst(c, a.0), needs)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!(na.shape.len(), 2, "matmul lhs must be 2-d");
            assert_eq!(nb.shape.len(), 2, "matmul rhs must be 2-d");
            let (m, k) = (na.shape[0], na.shape[1]);
            let (k2, n) = (nb.shape[0], nb.shape[1]);
            assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
            let mut out = vec![T::zero(); m * n];
            matmul_into(&na.value, &nb.value, &mut out, m, k, n);
            (vec![m, n], out, na.needs_grad || nb.needs_grad)
        };
        self.push(shape, value, Op::Matmul { a: a.0, b: b.0 }, needs)
    }

    /// Batched matmul: `[g,m,k] x [g,k,n] -> [g,m,n]`.
    pub fn batch_matmul(&self, a: Var, b: Var) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            assert_eq!(na.shape.len(), 3, "batch_matmul lhs must be 3-d");
            assert_eq!(nb.shape.len(), 3, "batch_matmul rhs must be 3-d");
            let (g, m, k) = (na.shape[0], na.shape[1], na.shape[2]);
            assert_eq!(nb.shape[0], g, "batch dims differ");
            assert_eq!(nb.shape[1], k, "inner dims differ");
            let n = nb.shape[2];
            let mut out = vec![T::zero(); g * m * n];
            for i in 0..g {
                matmul_into(
                    &na.value[i * m * k..(i + 1) * m * k],
                    &nb.value[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
            (vec![g, m, n], out, na.needs_grad || nb.needs_grad)
        };
        self.push(shape, value, Op::BatchMatmul { a: a.0, b: b.0 }, needs)
    }

    /// `out[i] = a[indices[i]]`; the adjoint scatter-adds back.
    ///
    /// `indices.len()` must equal the product of `out_shape`.
    pub fn gather(&self, a: Var, indices: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            assert_eq!(indices.len(), out_shape.iter().product::<usize>());
            let value = indices.iter().map(|&i| n.value[i]).collect();
            (value, n.needs_grad)
        };
        self.push(out_shape, value, Op::Gather { p: a.0, indices }, needs)
    }

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            assert_eq!(shape.iter().product::<usize>(), n.value.len());
            (n.value.clone(), n.needs_grad)
        };
        self.push(shape, value, Op::Reshape(a.0), needs)
    }

    /// Sum over one axis (the axis is removed from the shape).
    pub fn sum_axis(&self, a: Var, axis: usize) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            assert!(axis < n.shape.len());
            let outer: usize = n.shape[..axis].iter().product();
            let mid = n.shape[axis];
            let inner: usize = n.shape[axis + 1..].iter().product();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for m in 0..mid {
                    let src = &n.value[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            let mut shape = n.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, out, n.needs_grad)
        };
        self.push(shape, value, Op::SumAxis { p: a.0, axis }, needs)
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self, a: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let mut acc = T::zero();
            for &v in &n.value {
                acc = acc + v;
            }
            (vec![acc], n.needs_grad)
        };
        self.push(vec![1], value, Op::SumAll(a.0), needs)
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.numel(a);
        let s = self.sum_all(a);
        self.mul_const(s, T::one() / T::from_f64(n as f64))
    }

    /// Max over the last axis; ties take the lowest index, and the
    /// subgradient routes there.
    pub fn max_last(&self, a: Var) -> Var {
        let (shape, value, argmax, needs) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let last = *n.shape.last().expect("max_last needs at least 1 axis");
            assert!(last > 0);
            let rows = n.value.len() / last;
            let mut value = Vec::with_capacity(rows);
            let mut argmax = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &n.value[r * last..(r + 1) * last];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                value.push(row[best]);
                argmax.push(r * last + best);
            }
            let mut shape = n.shape.clone();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, value, argmax, n.needs_grad)
        };
        self.push(shape, value, Op::MaxLast { p: a.0, argmax }, needs)
    }

    /// Numerically stable softmax over the last axis.
    ///
    /// The row max is subtracted as a detached constant; softmax is shift
    /// invariant, so the adjoint stays exact.
    pub fn softmax_last(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let last = *shape.last().expect("softmax needs at least 1 axis");
        let maxes = self.with_value(a, |v| {
            let rows = v.len() / last;
            let mut out = Vec::with_capacity(v.len());
            for r in 0..rows {
                let row = &v[r * last..(r + 1) * last];
                let m = row.iter().fold(T::neg_infinity(), |acc, &x| acc.max(x));
                out.extend(std::iter::repeat_n(m, last));
            }
            out
        });
        let z = self.sub(a, self.constant(Tensor::new(shape.clone(), maxes)));
        let e = self.exp(z);
        let s = self.sum_axis(e, shape.len() - 1);
        let idx: Vec<usize> = (0..self.numel(a)).map(|i| i / last).collect();
        let sb = self.gather(s, Arc::new(idx), shape);
        self.div(e, sb)
    }

    /// Layer normalization of `[n, c]` rows with per-channel affine params.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let shape = self.shape(x);
        assert_eq!(shape.len(), 2, "layer_norm expects [rows, channels]");
        let (rows, c) = (shape[0], shape[1]);
        assert_eq!(self.shape(gamma), vec![c]);
        assert_eq!(self.shape(beta), vec![c]);
        let inv_c = T::one() / T::from_f64(c as f64);
        let row_idx: Arc<Vec<usize>> = Arc::new((0..rows * c).map(|i| i / c).collect());
        let chan_idx: Arc<Vec<usize>> = Arc::new((0..rows * c).map(|i| i % c).collect());

        let mu = self.mul_const(self.sum_axis(x, 1), inv_c);
        let mu_b = self.gather(mu, row_idx.clone(), shape.clone());
        let centered = self.sub(x, mu_b);
        let var = self.mul_const(self.sum_axis(self.mul(centered, centered), 1), inv_c);
        let sd = self.sqrt(self.add_const(var, eps));
        let sd_b = self.gather(sd, row_idx, shape.clone());
        let normed = self.div(centered, sd_b);
        let gamma_b = self.gather(gamma, chan_idx.clone(), shape.clone());
        let beta_b = self.gather(beta, chan_idx, shape);
        self.add(self.mul(normed, gamma_b), beta_b)
    }

    /// Valid 3x3 convolution: input `[h,w,cin]`, weight `[cout,cin,3,3]`,
    /// bias `[cout]`, output `[h-2,w-2,cout]`.
    pub fn conv3x3_valid(&self, input: Var, weight: Var, bias: Var) -> Var {
        let (shape, value, needs) = {
            let nodes = self.nodes.borrow();
            let (ni, nw, nb) = (&nodes[input.0], &nodes[weight.0], &nodes[bias.0]);
            assert_eq!(ni.shape.len(), 3, "conv input must be [h,w,c]");
            let (h, w, cin) = (ni.shape[0], ni.shape[1], ni.shape[2]);
            assert!(h >= 3 && w >= 3, "conv input smaller than kernel");
            assert_eq!(nw.shape, vec![nw.shape[0], cin, 3, 3], "weight shape");
            let cout = nw.shape[0];
            assert_eq!(nb.shape, vec![cout], "bias shape");
            let (oh, ow) = (h - 2, w - 2);

            // Repack weights as [dy,dx,cin,cout] so the inner loop runs
            // contiguously over output channels.
            let wt = repack_weight(&nw.value, cout, cin);
            let mut out = vec![T::zero(); oh * ow * cout];
            for y in 0..oh {
                for x in 0..ow {
                    let orow = &mut out[(y * ow + x) * cout..(y * ow + x + 1) * cout];
                    orow.copy_from_slice(&nb.value);
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let ibase = ((y + dy) * w + (x + dx)) * cin;
                            for ci in 0..cin {
                                let v = ni.value[ibase + ci];
                                let wrow =
                                    &wt[((dy * 3 + dx) * cin + ci) * cout..][..cout];
                                for (o, &wv) in orow.iter_mut().zip(wrow) {
                                    *o = *o + v * wv;
                                }
                            }
                        }
                    }
                }
            }
            (
                vec![oh, ow, cout],
                out,
                ni.needs_grad || nw.needs_grad || nb.needs_grad,
            )
        };
        self.push(
            shape,
            value,
            Op::Conv3x3Valid {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
            },
            needs,
        )
    }

    /// Backpropagate from a scalar node, returning gradients for every node
    /// on a differentiable path.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<T>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }

        Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.shape.clone()).collect(),
        }
    }
}

fn zip2<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn repack_weight<T: Scalar>(w: &[T], cout: usize, cin: usize) -> Vec<T> {
    let mut out = vec![T::zero(); w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for dy in 0..3 {
                for dx in 0..3 {
                    out[((dy * 3 + dx) * cin + ci) * cout + co] =
                        w[((co * cin + ci) * 3 + dy) * 3 + dx];
                }
            }
        }
    }
    out
}

fn gelu<T: Scalar>(x: T) -> T {
    // tanh form of GELU; the adjoint below differentiates this exact formula
    let k = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = k * (x + a * x * x * x);
    half * x * (T::one() + u.tanh())
}

fn gelu_deriv<T: Scalar>(x: T) -> T {
    let k = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

#[allow(clippy::needless_range_loop)]
fn backprop_node<T: Scalar>(
    nodes: &[Node<T>],
    i: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Unary(kind, p) => {
            if !nodes[*p].needs_grad {
                return;
            }
            let pv = &nodes[*p].value;
            let ov = &nodes[i].value;
            accumulate(&mut grads[*p], pv.len(), |dst| match kind {
                UnaryKind::Neg => {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d - gv;
                    }
                }
                UnaryKind::Exp => {
                    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(ov) {
                        *d = *d + gv * o;
                    }
                }
                UnaryKind::Sqrt => {
                    let half = T::from_f64(0.5);
                    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(ov) {
                        *d = *d + gv * half / o;
                    }
                }
                UnaryKind::Abs => {
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(pv) {
                        let s = if x > T::zero() {
                            T::one()
                        } else if x < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        *d = *d + gv * s;
                    }
                }
                UnaryKind::Relu => {
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(pv) {
                        if x > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
                UnaryKind::Sigmoid => {
                    for ((d, &gv), &o) in dst.iter_mut().zip(g).zip(ov) {
                        *d = *d + gv * o * (T::one() - o);
                    }
                }
                UnaryKind::Gelu => {
                    for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(pv) {
                        *d = *d + gv * gelu_deriv(x);
                    }
                }
            });
        }
        Op::Binary(kind, a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let ov = &nodes[i].value;
            if nodes[*a].needs_grad {
                accumulate(&mut grads[*a], av.len(), |dst| match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    }
                    BinaryKind::Mul => {
                        for ((d, &gv), &y) in dst.iter_mut().zip(g).zip(bv) {
                            *d = *d + gv * y;
                        }
                    }
                    BinaryKind::Div => {
                        for ((d, &gv), &y) in dst.iter_mut().zip(g).zip(bv) {
                            *d = *d + gv / y;
                        }
                    }
                });
            }
            if nodes[*b].needs_grad {
                accumulate(&mut grads[*b], bv.len(), |dst| match kind {
                    BinaryKind::Add => {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    }
                    BinaryKind::Sub => {
                        for (d, &gv) in dst.iter_mut().zip(g) {
                            *d = *d - gv;
                        }
                    }
                    BinaryKind::Mul => {
                        for ((d, &gv), &x) in dst.iter_mut().zip(g).zip(av) {
                            *d = *d + gv * x;
                        }
                    }
                    BinaryKind::Div => {
                        // d(a/b)/db = -a/b^2 = -out/b
                        for (((d, &gv), &o), &y) in dst.iter_mut().zip(g).zip(ov).zip(bv) {
                            *d = *d - gv * o / y;
                        }
                    }
                });
            }
        }
        Op::AddConst(_, p) => {
            if nodes[*p].needs_grad {
                accumulate(&mut grads[*p], g.len(), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
        }
        Op::MulConst(c, p) => {
            if nodes[*p].needs_grad {
                let c = *c;
                accumulate(&mut grads[*p], g.len(), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv * c;
                    }
                });
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            matmul_backward(
                nodes, *a, *b, g, grads, m, k, n, 0, /* batch offset */
            );
        }
        Op::BatchMatmul { a, b } => {
            let (batches, m, k) = (
                nodes[*a].shape[0],
                nodes[*a].shape[1],
                nodes[*a].shape[2],
            );
            let n = nodes[*b].shape[2];
            for bi in 0..batches {
                matmul_backward(nodes, *a, *b, &g[bi * m * n..(bi + 1) * m * n], grads, m, k, n, bi);
            }
        }
        Op::Gather { p, indices } => {
            if nodes[*p].needs_grad {
                accumulate(&mut grads[*p], nodes[*p].value.len(), |dst| {
                    for (&src, &gv) in indices.iter().zip(g) {
                        dst[src] = dst[src] + gv;
                    }
                });
            }
        }
        Op::Reshape(p) => {
            if nodes[*p].needs_grad {
                accumulate(&mut grads[*p], g.len(), |dst| {
                    for (d, &gv) in dst.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                });
            }
        }
        Op::SumAxis { p, axis } => {
            if nodes[*p].needs_grad {
                let shape = &nodes[*p].shape;
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                accumulate(&mut grads[*p], nodes[*p].value.len(), |dst| {
                    for o in 0..outer {
                        let grow = &g[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let drow = &mut dst[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, &gv) in drow.iter_mut().zip(grow) {
                                *d = *d + gv;
                            }
                        }
                    }
                });
            }
        }
        Op::SumAll(p) => {
            if nodes[*p].needs_grad {
                let gv = g[0];
                accumulate(&mut grads[*p], nodes[*p].value.len(), |dst| {
                    for d in dst.iter_mut() {
                        *d = *d + gv;
                    }
                });
            }
        }
        Op::MaxLast { p, argmax } => {
            if nodes[*p].needs_grad {
                accumulate(&mut grads[*p], nodes[*p].value.len(), |dst| {
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dst[src] = dst[src] + gv;
                    }
                });
            }
        }
        Op::Conv3x3Valid {
            input,
            weight,
            bias,
        } => {
            let (h, w, cin) = (
                nodes[*input].shape[0],
                nodes[*input].shape[1],
                nodes[*input].shape[2],
            );
            let cout = nodes[*weight].shape[0];
            let (oh, ow) = (h - 2, w - 2);
            if nodes[*bias].needs_grad {
                accumulate(&mut grads[*bias], cout, |dst| {
                    for px in 0..oh * ow {
                        let grow = &g[px * cout..(px + 1) * cout];
                        for (d, &gv) in dst.iter_mut().zip(grow) {
                            *d = *d + gv;
                        }
                    }
                });
            }
            if nodes[*weight].needs_grad {
                let iv = &nodes[*input].value;
                // Accumulate in the repacked [dy,dx,cin,cout] layout, then
                // fold back into [cout,cin,3,3].
                let mut acc = vec![T::zero(); 9 * cin * cout];
                for y in 0..oh {
                    for x in 0..ow {
                        let grow = &g[(y * ow + x) * cout..(y * ow + x + 1) * cout];
                        for dy in 0..3 {
                            for dx in 0..3 {
                                let ibase = ((y + dy) * w + (x + dx)) * cin;
                                for ci in 0..cin {
                                    let v = iv[ibase + ci];
                                    let arow =
                                        &mut acc[((dy * 3 + dx) * cin + ci) * cout..][..cout];
                                    for (a, &gv) in arow.iter_mut().zip(grow) {
                                        *a = *a + v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                accumulate(&mut grads[*weight], cout * cin * 9, |dst| {
                    for co in 0..cout {
                        for ci in 0..cin {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    dst[((co * cin + ci) * 3 + dy) * 3 + dx] = dst
                                        [((co * cin + ci) * 3 + dy) * 3 + dx]
                                        + acc[((dy * 3 + dx) * cin + ci) * cout + co];
                                }
                            }
                        }
                    }
                });
            }
            if nodes[*input].needs_grad {
                // Repack weights as [dy,dx,cout,cin] for a contiguous inner
                // loop over input channels.
                let wv = &nodes[*weight].value;
                let mut wf = vec![T::zero(); 9 * cout * cin];
                for co in 0..cout {
                    for ci in 0..cin {
                        for dy in 0..3 {
                            for dx in 0..3 {
                                wf[((dy * 3 + dx) * cout + co) * cin + ci] =
                                    wv[((co * cin + ci) * 3 + dy) * 3 + dx];
                            }
                        }
                    }
                }
                accumulate(&mut grads[*input], h * w * cin, |dst| {
                    for y in 0..oh {
                        for x in 0..ow {
                            let grow = &g[(y * ow + x) * cout..(y * ow + x + 1) * cout];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let ibase = ((y + dy) * w + (x + dx)) * cin;
                                    for (co, &gv) in grow.iter().enumerate() {
                                        let wrow =
                                            &wf[((dy * 3 + dx) * cout + co) * cin..][..cin];
                                        let drow = &mut dst[ibase..ibase + cin];
                                        for (d, &wv) in drow.iter_mut().zip(wrow) {
                                            *d = *d + gv * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward<T: Scalar>(
    nodes: &[Node<T>],
    a: usize,
    b: usize,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
    m: usize,
    k: usize,
    n: usize,
    batch: usize,
) {
    let a_off = batch * m * k;
    let b_off = batch * k * n;
    if nodes[a].needs_grad {
        let bv = &nodes[b].value[b_off..b_off + k * n];
        accumulate(&mut grads[a], nodes[a].value.len(), |dst| {
            let dst = &mut dst[a_off..a_off + m * k];
            // dA[i,p] = sum_j g[i,j] * B[p,j]
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let brow = &bv[p * n..(p + 1) * n];
                    let mut acc = T::zero();
                    for (&gv, &bvv) in grow.iter().zip(brow) {
                        acc = acc + gv * bvv;
                    }
                    dst[i * k + p] = dst[i * k + p] + acc;
                }
            }
        });
    }
    if nodes[b].needs_grad {
        let av = &nodes[a].value[a_off..a_off + m * k];
        accumulate(&mut grads[b], nodes[b].value.len(), |dst| {
            let dst = &mut dst[b_off..b_off + k * n];
            // dB[p,j] = sum_i A[i,p] * g[i,j]
            for i in 0..m {
                let grow = &g[i * n..(i + 1) * n];
                for p in 0..k {
                    let av_ip = av[i * k + p];
                    let drow = &mut dst[p * n..(p + 1) * n];
                    for (d, &gv) in drow.iter_mut().zip(grow) {
                        *d = *d + av_ip * gv;
                    }
                }
            }
        });
    }
}
