//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters enter
//! the tape through [`Graph::param`], which copies the current value out of a
//! [`ParamStore`]; [`Graph::backward`] returns the gradient of a scalar with
//! respect to every parameter that contributed to it.
//!
//! Binary elementwise ops broadcast their second operand into the first: the
//! right-hand shape, left-padded with ones, must match the left-hand shape on
//! every axis or be 1 there.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, trans_b: bool },
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Exp(Var),
    Clamp { a: Var, lo: f64, hi: f64 },
    SmoothL1 { a: Var, beta: f64 },
    Softmax(Var),
    LayerNorm { a: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Select { a: Var, axis: usize, indices: Vec<usize> },
    SumAxis { a: Var, axis: usize },
    SumAll(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    node_grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Grads {
    /// Gradient with respect to an arbitrary recorded value.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.node_grads[v.0].as_deref()
    }

    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

/// Maps each flat index of `a_shape` to the flat index of the broadcast operand.
fn broadcast_map(a_shape: &[usize], b_shape: &[usize]) -> Option<Vec<usize>> {
    if a_shape == b_shape {
        return None;
    }
    assert!(
        b_shape.len() <= a_shape.len(),
        "cannot broadcast {:?} into {:?}",
        b_shape,
        a_shape
    );
    let pad = a_shape.len() - b_shape.len();
    let mut bs = vec![1usize; pad];
    bs.extend_from_slice(b_shape);
    for (i, (&da, &db)) in a_shape.iter().zip(&bs).enumerate() {
        assert!(
            db == da || db == 1,
            "cannot broadcast {:?} into {:?} (axis {})",
            b_shape,
            a_shape,
            i
        );
    }
    let b_strides = strides(&bs);
    let eff: Vec<usize> = bs
        .iter()
        .zip(&b_strides)
        .map(|(&d, &s)| if d == 1 { 0 } else { s })
        .collect();
    let n = numel(a_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a_shape.len()];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for ax in (0..a_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < a_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Some(map)
}

enum Bcast {
    Same,
    /// `b` repeats with period `len` (its non-unit dims are a suffix of `a`).
    Tile(usize),
    Map(Vec<usize>),
}

impl Bcast {
    fn new(a_shape: &[usize], b_shape: &[usize]) -> Self {
        let first = b_shape.iter().position(|&d| d != 1).unwrap_or(b_shape.len());
        let core = &b_shape[first..];
        if core.len() <= a_shape.len() && a_shape.ends_with(core) {
            let len = numel(core);
            return if len == numel(a_shape) { Bcast::Same } else { Bcast::Tile(len) };
        }
        match broadcast_map(a_shape, b_shape) {
            None => Bcast::Same,
            Some(m) => Bcast::Map(m),
        }
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Tile(len) => i % len,
            Bcast::Map(m) => m[i],
        }
    }
}

fn zip_bcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (ad, bd) = (a.data(), b.data());
    let data = match Bcast::new(a.shape(), b.shape()) {
        Bcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Tile(len) => ad
            .chunks(len)
            .flat_map(|c| c.iter().zip(bd).map(|(&x, &y)| f(x, y)))
            .collect(),
        Bcast::Map(m) => ad.iter().zip(&m).map(|(&x, &j)| f(x, bd[j])).collect(),
    };
    Tensor::new(a.shape(), data)
}

/// `out[i, n] = sum_k a[i, k] * w[k, n]` for row-major `a: [m, k]`, `w: [k, n]`.
fn gemm(a: &[f64], w: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let wrow = &w[kk * n..(kk + 1) * n];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += av * wv;
            }
        }
    }
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (xc, yc) = (x.chunks_exact(4), y.chunks_exact(4));
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..4 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (a, b) in xr.iter().zip(yr) {
        s += a * b;
    }
    s
}

/// `out[i, j] = sum_k a[i, k] * b[j, k]`.
fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k, j] += sum_i a[i, k] * b[i, j]`.
fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param => true,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Bring a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param, &[]);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = zip_bcast(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let out = zip_bcast(self.value(a), self.value(b), f64::max);
        self.push(out, Op::Maximum(a, b), &[a, b])
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = zip_bcast(self.value(a), self.value(b), f64::min);
        self.push(out, Op::Minimum(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x * c).collect());
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|x| x + c).collect());
        self.push(out, Op::Shift(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `[..., k] x [k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Var {
        let (at, wt) = (self.value(a), self.value(w));
        assert_eq!(wt.rank(), 2, "matmul weight must be 2-D");
        let k = *at.shape().last().expect("matmul input must have rank >= 1");
        assert_eq!(k, wt.dim(0), "matmul inner dims {:?} x {:?}", at.shape(), wt.shape());
        let n = wt.dim(1);
        let m = at.numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(at.data(), wt.data(), m, k, n, &mut out);
        let mut shape = at.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        self.push(Tensor::new(&shape, out), Op::MatMul(a, w), &[a, w])
    }

    /// Batched product `[b, m, k] x [b, k, n]`, or `[b, m, k] x [b, n, k]^T`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (at, bt) = (self.value(a), self.value(b));
        assert!(at.rank() == 3 && bt.rank() == 3, "bmm expects rank-3 operands");
        let (bsz, m, k) = (at.dim(0), at.dim(1), at.dim(2));
        assert_eq!(bsz, bt.dim(0), "bmm batch mismatch");
        let n = if trans_b {
            assert_eq!(bt.dim(2), k);
            bt.dim(1)
        } else {
            assert_eq!(bt.dim(1), k);
            bt.dim(2)
        };
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let aa = &at.data()[i * m * k..(i + 1) * m * k];
            let bb = &bt.data()[i * k * n..(i + 1) * k * n];
            let oo = &mut out[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(aa, bb, m, k, n, oo);
            } else {
                gemm(aa, bb, m, k, n, oo);
            }
        }
        self.push(
            Tensor::new(&[bsz, m, n], out),
            Op::Bmm { a, b, trans_b },
            &[a, b],
        )
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect());
        self.push(out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), libm::log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Op::Clamp { a, lo, hi }, |x| x.clamp(lo, hi))
    }

    /// Elementwise Huber-style smooth L1 with transition point `beta`.
    pub fn smooth_l1(&mut self, a: Var, beta: f64) -> Var {
        self.unary(a, Op::SmoothL1 { a, beta }, |x| {
            let ax = libm::fabs(x);
            if ax < beta {
                0.5 * x * x / beta
            } else {
                ax - 0.5 * beta
            }
        })
    }

    /// Softmax over the last axis. `-inf` entries receive exactly zero weight.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("softmax on scalar");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = libm::exp(*x - m);
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let out = Tensor::new(t.shape(), out);
        self.push(out, Op::Softmax(a), &[a])
    }

    /// Normalise the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let n = *t.shape().last().expect("layer_norm on scalar");
        let rows = t.numel() / n;
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        for (r, (src, dst)) in t.data().chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * rs;
            }
        }
        let out = Tensor::new(t.shape(), xhat.clone());
        self.push(out, Op::LayerNorm { a, xhat, rstd }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.value(a).clone().reshape(shape);
        self.push(out, Op::Reshape(a), &[a])
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(perm.len(), t.rank(), "permute rank mismatch");
        let out = permute_tensor(t, perm);
        self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.value(parts[0]).shape().to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&x, &y)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || x == y, "concat shape mismatch {:?} vs {:?}", s, first);
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.dim(axis) * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Gather `indices` along `axis` (repeats allowed).
    pub fn select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Var {
        let t = self.value(a);
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &ix in indices {
                assert!(ix < d, "select index {} out of range {}", ix, d);
                let base = (o * d + ix) * inner;
                out.extend_from_slice(&t.data()[base..base + inner]);
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape[axis] = indices.len();
        self.push(
            Tensor::new(&new_shape, out),
            Op::Select {
                a,
                axis,
                indices: indices.to_vec(),
            },
            &[a],
        )
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(a, axis, &idx)
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let t = self.value(a);
        let shape = t.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = shape[axis];
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..d {
                let src = &t.data()[(o * d + j) * inner..(o * d + j + 1) * inner];
                for (x, y) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *x += y;
                }
            }
        }
        let mut new_shape = shape.to_vec();
        new_shape.remove(axis);
        self.push(
            Tensor::new(&new_shape, out),
            Op::SumAxis { a, axis },
            &[a],
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Var {
        let d = self.shape(a)[axis];
        let s = self.sum_axis(a, axis);
        self.scale(s, 1.0 / d as f64)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .filter_map(|(&id, &v)| grads[v.0].clone().map(|g| (id, g)))
            .collect();
        Grads {
            node_grads: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    /// Accumulate `g * da` into `a` and `g * db` (reduced over broadcast axes) into `b`.
    fn acc_binary(
        &self,
        grads: &mut [Option<Vec<f64>>],
        a: Var,
        b: Var,
        g: &[f64],
        da: impl Fn(usize, f64, f64) -> f64,
        db: impl Fn(usize, f64, f64) -> f64,
    ) {
        let (at, bt) = (self.value(a), self.value(b));
        let map = Bcast::new(at.shape(), bt.shape());
        let bidx = |i: usize| map.index(i);
        let (ad, bd) = (at.data(), bt.data());
        self.acc(grads, a, |ga| {
            for i in 0..g.len() {
                ga[i] += g[i] * da(i, ad[i], bd[bidx(i)]);
            }
        });
        self.acc(grads, b, |gb| {
            for i in 0..g.len() {
                let j = bidx(i);
                gb[j] += g[i] * db(i, ad[i], bd[j]);
            }
        });
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::Add(a, b) => self.acc_binary(grads, a, b, g, |_, _, _| 1.0, |_, _, _| 1.0),
            &Op::Sub(a, b) => self.acc_binary(grads, a, b, g, |_, _, _| 1.0, |_, _, _| -1.0),
            &Op::Mul(a, b) => self.acc_binary(grads, a, b, g, |_, _, y| y, |_, x, _| x),
            &Op::Div(a, b) => {
                self.acc_binary(grads, a, b, g, |_, _, y| 1.0 / y, |_, x, y| -x / (y * y))
            }
            &Op::Maximum(a, b) => self.acc_binary(
                grads,
                a,
                b,
                g,
                |_, x, y| if x >= y { 1.0 } else { 0.0 },
                |_, x, y| if x >= y { 0.0 } else { 1.0 },
            ),
            &Op::Minimum(a, b) => self.acc_binary(
                grads,
                a,
                b,
                g,
                |_, x, y| if x <= y { 1.0 } else { 0.0 },
                |_, x, y| if x <= y { 0.0 } else { 1.0 },
            ),
            &Op::Scale(a, c) => self.acc(grads, a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)
            }),
            &Op::Shift(a) | &Op::Reshape(a) => self.acc(grads, a, |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)
            }),
            &Op::MatMul(a, w) => {
                let (at, wt) = (self.value(a), self.value(w));
                let (k, n) = (wt.dim(0), wt.dim(1));
                let m = at.numel() / k;
                self.acc(grads, a, |ga| gemm_nt(g, wt.data(), m, n, k, ga));
                self.acc(grads, w, |gw| gemm_tn(at.data(), g, m, k, n, gw));
            }
            &Op::Bmm { a, b, trans_b } => {
                let (at, bt) = (self.value(a), self.value(b));
                let (bsz, m, k) = (at.dim(0), at.dim(1), at.dim(2));
                let n = if trans_b { bt.dim(1) } else { bt.dim(2) };
                self.acc(grads, a, |ga| {
                    for s in 0..bsz {
                        let gg = &g[s * m * n..(s + 1) * m * n];
                        let bb = &bt.data()[s * k * n..(s + 1) * k * n];
                        let dst = &mut ga[s * m * k..(s + 1) * m * k];
                        if trans_b {
                            // dA = G B, with B stored [n, k]
                            gemm(gg, bb, m, n, k, dst);
                        } else {
                            // dA = G B^T, with B stored [k, n]
                            gemm_nt(gg, bb, m, n, k, dst);
                        }
                    }
                });
                self.acc(grads, b, |gb| {
                    for s in 0..bsz {
                        let gg = &g[s * m * n..(s + 1) * m * n];
                        let aa = &at.data()[s * m * k..(s + 1) * m * k];
                        let dst = &mut gb[s * k * n..(s + 1) * k * n];
                        if trans_b {
                            // dB[n, k] = G^T A
                            gemm_tn(gg, aa, m, n, k, dst);
                        } else {
                            // dB[k, n] = A^T G
                            gemm_tn(aa, gg, m, k, n, dst);
                        }
                    }
                });
            }
            &Op::Relu(a) => self.acc(grads, a, |ga| {
                for j in 0..g.len() {
                    if out[j] > 0.0 {
                        ga[j] += g[j];
                    }
                }
            }),
            &Op::Sigmoid(a) => self.acc(grads, a, |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j] * (1.0 - out[j]);
                }
            }),
            &Op::Log(a) => {
                let x = self.value(a).data();
                self.acc(grads, a, |ga| {
                    for j in 0..g.len() {
                        ga[j] += g[j] / x[j];
                    }
                })
            }
            &Op::Exp(a) => self.acc(grads, a, |ga| {
                for j in 0..g.len() {
                    ga[j] += g[j] * out[j];
                }
            }),
            &Op::Clamp { a, lo, hi } => {
                let x = self.value(a).data();
                self.acc(grads, a, |ga| {
                    for j in 0..g.len() {
                        if x[j] >= lo && x[j] <= hi {
                            ga[j] += g[j];
                        }
                    }
                })
            }
            &Op::SmoothL1 { a, beta } => {
                let x = self.value(a).data();
                self.acc(grads, a, |ga| {
                    for j in 0..g.len() {
                        let d = if libm::fabs(x[j]) < beta {
                            x[j] / beta
                        } else if x[j] > 0.0 {
                            1.0
                        } else {
                            -1.0
                        };
                        ga[j] += g[j] * d;
                    }
                })
            }
            &Op::Softmax(a) => {
                let n = *node.value.shape().last().unwrap();
                self.acc(grads, a, |ga| {
                    for ((y, gy), gx) in out.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = y.iter().zip(gy).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gx[j] += y[j] * (gy[j] - dot);
                        }
                    }
                })
            }
            Op::LayerNorm { a, xhat, rstd } => {
                let n = *node.value.shape().last().unwrap();
                self.acc(grads, *a, |ga| {
                    for (r, ((xh, gy), gx)) in xhat
                        .chunks(n)
                        .zip(g.chunks(n))
                        .zip(ga.chunks_mut(n))
                        .enumerate()
                    {
                        let mg = gy.iter().sum::<f64>() / n as f64;
                        let mgx = gy.iter().zip(xh).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for j in 0..n {
                            gx[j] += rstd[r] * (gy[j] - mg - xh[j] * mgx);
                        }
                    }
                })
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = permute_tensor(&Tensor::new(node.value.shape(), g.to_vec()), &inv);
                self.acc(grads, *a, |ga| {
                    ga.iter_mut().zip(gt.data()).for_each(|(x, y)| *x += y)
                })
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).dim(*axis) * inner;
                    self.acc(grads, p, |gp| {
                        for o in 0..outer {
                            let src = &g[o * total + off..o * total + off + w];
                            for (x, y) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Select { a, axis, indices } => {
                let shape = self.value(*a).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let d = shape[*axis];
                self.acc(grads, *a, |ga| {
                    let mut src = 0;
                    for o in 0..outer {
                        for &ix in indices {
                            let base = (o * d + ix) * inner;
                            for (x, y) in ga[base..base + inner].iter_mut().zip(&g[src..src + inner]) {
                                *x += y;
                            }
                            src += inner;
                        }
                    }
                })
            }
            &Op::SumAxis { a, axis } => {
                let shape = self.value(a).shape();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let d = shape[axis];
                self.acc(grads, a, |ga| {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..d {
                            let base = (o * d + j) * inner;
                            for (x, y) in ga[base..base + inner].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                })
            }
            &Op::SumAll(a) => self.acc(grads, a, |ga| ga.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = t.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    // stride in the source for each output axis
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    let data = t.data();
    for _ in 0..n {
        out.push(data[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamGroup};
    use alloc::boxed::Box;

    /// Central finite differences of `f` at every entry of parameter `id`.
    fn check_grad(
        store: &mut ParamStore,
        id: ParamId,
        f: &dyn Fn(&mut Graph) -> Var,
    ) -> f64 {
        let analytic = {
            let mut g = Graph::new(store);
            let l = f(&mut g);
            g.backward(l).param(id).unwrap().to_vec()
        };
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for j in 0..analytic.len() {
            let orig = store.value(id).data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let up = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let dn = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).value.data_mut()[j] = orig;
            let fd = (up - dn) / (2.0 * h);
            let err = libm::fabs(fd - analytic[j]) / (libm::fabs(fd) + libm::fabs(analytic[j])).max(1e-8);
            worst = worst.max(err);
        }
        worst
    }

    fn setup(shapes: &[&[usize]]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let mut init = Init::new(3);
        let ids = shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                store.add(alloc::format!("p{}", i), init.uniform(s, 1.0), ParamGroup::Head)
            })
            .collect();
        (store, ids)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let (mut store, ids) = setup(&[&[2, 3, 4], &[4, 5], &[3, 1], &[2, 3, 4], &[5]]);
        let (x, w, c, y, b) = (ids[0], ids[1], ids[2], ids[3], ids[4]);
        let cases: Vec<Box<dyn Fn(&mut Graph) -> Var>> = vec![
            Box::new(move |g| {
                let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
                let h = g.matmul(xv, wv);
                let h = g.add(h, bv);
                let h = g.sigmoid(h);
                let h = g.layer_norm(h, 1e-5);
                let s = g.softmax(h);
                let l = g.log(s);
                g.mean(l)
            }),
            Box::new(move |g| {
                let (xv, yv, cv) = (g.param(x), g.param(y), g.param(c));
                let p = g.mul(xv, cv);
                let q = g.bmm(p, yv, true);
                let r = g.bmm(q, yv, false);
                let t = g.permute(r, &[2, 0, 1]);
                let t = g.sum_axis(t, 1);
                let t = g.smooth_l1(t, 0.3);
                g.sum(t)
            }),
            Box::new(move |g| {
                let (xv, yv) = (g.param(x), g.param(y));
                let mx = g.maximum(xv, yv);
                let mn = g.minimum(xv, yv);
                let e = g.exp(mn);
                let d = g.div(mx, e);
                let cat = g.concat(&[d, xv], 1);
                let sel = g.select(cat, 1, &[0, 4, 4, 2]);
                let sel = g.reshape(sel, &[8, 4]);
                let s = g.sub(sel, sel);
                let s = g.add(s, sel);
                let s = g.shift(s, 0.1);
                let s = g.relu(s);
                g.mean(s)
            }),
        ];
        for (k, case) in cases.iter().enumerate() {
            for &id in &ids {
                let used = {
                    let mut g = Graph::new(&store);
                    let l = case(&mut g);
                    g.backward(l).param(id).is_some()
                };
                if used {
                    let err = check_grad(&mut store, id, case.as_ref());
                    assert!(err < 1e-6, "case {} param {:?}: rel err {}", k, id, err);
                }
            }
        }
    }

    #[test]
    fn softmax_masks_neg_infinity() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new(&[1, 3], alloc::vec![1.0, f64::NEG_INFINITY, 2.0]));
        let s = g.softmax(x);
        let v = g.value(s).data();
        assert_eq!(v[1], 0.0);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn broadcast_map_handles_inner_ones() {
        let m = broadcast_map(&[2, 3, 2], &[2, 1, 2]).unwrap();
        assert_eq!(m, alloc::vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
        let m = broadcast_map(&[2, 3], &[3]).unwrap();
        assert_eq!(m, alloc::vec![0, 1, 2, 0, 1, 2]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let (store, ids) = setup(&[&[3]]);
        let mut g = Graph::new(&store);
        let p = g.param(ids[0]);
        let c = g.constant(Tensor::full(&[3], 2.0));
        let m = g.mul(p, c);
        let l = g.sum(m);
        let grads = g.backward(l);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.param(ids[0]).unwrap(), &[2.0, 2.0, 2.0]);
    }
}
