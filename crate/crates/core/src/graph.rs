//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! Graphs are built define-by-run: every [`forward_op`] call evaluates
//! eagerly and returns a new node holding its value, a same-shaped gradient
//! buffer, and references to its parents. [`backward`] propagates adjoints
//! from a scalar root in reverse topological order; repeated calls without a
//! [`zero_grads`] in between accumulate. A graph can also be re-evaluated in
//! place after mutating leaf values ([`recompute`]), which is what the
//! projection solver does every descent iteration.
//!
//! Graphs are single-threaded (`Rc`-based); concurrency happens one level up
//! by building independent graphs on independent threads.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::{Ref, RefCell};
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{CoreError, Result};
use crate::math;
use crate::parallel::for_each_chunk;
use crate::tensor::{self, Tensor};

/// Additive constant used by `MaskCausal`; large enough that `exp` underflows
/// to exactly 0 after the softmax shift, small enough to stay finite.
pub const CAUSAL_MASK_NEG: f64 = -1e9;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub type NodeRef = Rc<DiffNode>;

/// Operation tag of a graph node.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Input node (parameter, activation seed, or constant).
    Leaf,
    /// `(m,k)·(k,n)` or batched `(b,m,k)·(b,k,n)`.
    Matmul,
    /// `(m,k)·(n,k)ᵀ` or batched; the form attention scores and tied output
    /// heads want.
    MatmulNT,
    /// Element-wise sum; the right operand may be a suffix-shaped broadcast
    /// (e.g. a bias row added to every row).
    Add,
    /// Element-wise product (same shapes).
    Mul,
    Scale(f64),
    /// Softmax along the last axis.
    Softmax,
    /// Layer normalization along the last axis; inputs `[x, gain, bias]`.
    LayerNorm { eps: f64 },
    /// Tanh-approximated GELU.
    Gelu,
    /// Row gather from an embedding table; input `[table]`.
    EmbedLookup(Vec<u32>),
    /// `−Σ target·ln(probs)`, summed over all entries; inputs `[probs, target]`.
    CrossEntropy,
    /// `Σ p·(ln p − ln q)` with the target-floor convention; inputs `[p, q]`.
    KlDivergence { target_floor: f64 },
    /// Sets entries above the main diagonal of the last two axes to
    /// [`CAUSAL_MASK_NEG`].
    MaskCausal,
    /// `(batch·seq, heads·hd) → (batch·heads, seq, hd)`.
    SplitHeads { batch: usize, heads: usize },
    /// Inverse of `SplitHeads`.
    MergeHeads { batch: usize, heads: usize },
    /// Sum of all entries, yielding a scalar.
    Sum,
}

/// A node in the computation graph: a value plus an accumulated gradient of
/// identical shape, with the op tag and parent references needed to traverse.
#[derive(Debug)]
pub struct DiffNode {
    id: u64,
    op: OpKind,
    parents: Vec<NodeRef>,
    needs_grad: bool,
    value: RefCell<Tensor>,
    grad: RefCell<Tensor>,
}

impl DiffNode {
    fn alloc(op: OpKind, parents: Vec<NodeRef>, needs_grad: bool, value: Tensor) -> NodeRef {
        let grad = Tensor::zeros(value.shape());
        Rc::new(DiffNode {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            op,
            parents,
            needs_grad,
            value: RefCell::new(value),
            grad: RefCell::new(grad),
        })
    }

    /// A differentiable input node.
    pub fn leaf(value: Tensor) -> NodeRef {
        Self::alloc(OpKind::Leaf, Vec::new(), true, value)
    }

    /// An input node excluded from gradient propagation (targets, masks).
    pub fn constant(value: Tensor) -> NodeRef {
        Self::alloc(OpKind::Leaf, Vec::new(), false, value)
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn op(&self) -> &OpKind {
        &self.op
    }

    pub fn parents(&self) -> &[NodeRef] {
        &self.parents
    }

    pub fn needs_grad(&self) -> bool {
        self.needs_grad
    }

    pub fn value(&self) -> Ref<'_, Tensor> {
        self.value.borrow()
    }

    /// Mutable access to a leaf's value (optimizer updates).
    pub fn value_mut(&self) -> core::cell::RefMut<'_, Tensor> {
        self.value.borrow_mut()
    }

    pub fn grad(&self) -> Ref<'_, Tensor> {
        self.grad.borrow()
    }

    /// Replace a leaf's value in place (shape must match).
    pub fn set_value(&self, t: &[f64]) {
        let mut v = self.value.borrow_mut();
        assert_eq!(v.numel(), t.len(), "set_value shape mismatch");
        v.data_mut().copy_from_slice(t);
    }

    pub fn zero_grad(&self) {
        self.grad.borrow_mut().fill(0.0);
    }
}

/// A named, optionally trainable leaf.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub node: NodeRef,
    pub name: String,
    pub trainable: bool,
}

// ── Shape and validity rules ────────────────────────────────────────────

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> CoreError {
    CoreError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn output_shape(op: &OpKind, ins: &[&Tensor]) -> Result<Vec<usize>> {
    let want = |n: usize| -> Result<()> {
        if ins.len() == n {
            Ok(())
        } else {
            Err(CoreError::InvalidConfig(alloc::format!(
                "{op:?} expects {n} inputs, got {}",
                ins.len()
            )))
        }
    };
    match op {
        OpKind::Leaf => Err(CoreError::InvalidConfig("leaf is not an op".into())),
        OpKind::Matmul | OpKind::MatmulNT => {
            want(2)?;
            let (a, b) = (ins[0].shape(), ins[1].shape());
            let nt = matches!(op, OpKind::MatmulNT);
            match (a.len(), b.len()) {
                (2, 2) => {
                    let (m, k) = (a[0], a[1]);
                    let (bk, bn) = if nt { (b[1], b[0]) } else { (b[0], b[1]) };
                    if k != bk {
                        return Err(shape_err("matmul", a, b));
                    }
                    Ok(vec![m, bn])
                }
                (3, 3) => {
                    let (ba, m, k) = (a[0], a[1], a[2]);
                    let (bb, bk, bn) =
                        if nt { (b[0], b[2], b[1]) } else { (b[0], b[1], b[2]) };
                    if ba != bb || k != bk {
                        return Err(shape_err("matmul", a, b));
                    }
                    Ok(vec![ba, m, bn])
                }
                _ => Err(shape_err("matmul", a, b)),
            }
        }
        OpKind::Add => {
            want(2)?;
            let (a, b) = (ins[0].shape(), ins[1].shape());
            if a == b || (b.len() < a.len() && a.ends_with(b)) {
                Ok(a.to_vec())
            } else {
                Err(shape_err("add", a, b))
            }
        }
        OpKind::Mul => {
            want(2)?;
            if ins[0].shape() == ins[1].shape() {
                Ok(ins[0].shape().to_vec())
            } else {
                Err(shape_err("mul", ins[0].shape(), ins[1].shape()))
            }
        }
        OpKind::Scale(_) | OpKind::Gelu => {
            want(1)?;
            Ok(ins[0].shape().to_vec())
        }
        OpKind::Softmax => {
            want(1)?;
            ins[0].require_finite("softmax")?;
            if ins[0].shape().is_empty() {
                return Err(shape_err("softmax", ins[0].shape(), &[]));
            }
            Ok(ins[0].shape().to_vec())
        }
        OpKind::LayerNorm { .. } => {
            want(3)?;
            let cols = ins[0].cols();
            if ins[0].shape().is_empty()
                || ins[1].shape() != [cols]
                || ins[2].shape() != [cols]
            {
                return Err(shape_err("layernorm", ins[0].shape(), ins[1].shape()));
            }
            Ok(ins[0].shape().to_vec())
        }
        OpKind::EmbedLookup(ids) => {
            want(1)?;
            let t = ins[0].shape();
            if t.len() != 2 {
                return Err(shape_err("embed_lookup", t, &[]));
            }
            for &id in ids {
                if id as usize >= t[0] {
                    return Err(CoreError::TokenOutOfRange { id, vocab: t[0] });
                }
            }
            Ok(vec![ids.len(), t[1]])
        }
        OpKind::CrossEntropy => {
            want(2)?;
            ins[0].require_finite("cross_entropy")?;
            ins[1].require_finite("cross_entropy")?;
            if ins[0].shape() != ins[1].shape() {
                return Err(shape_err("cross_entropy", ins[0].shape(), ins[1].shape()));
            }
            Ok(Vec::new())
        }
        OpKind::KlDivergence { .. } => {
            want(2)?;
            ins[0].require_finite("kl_divergence")?;
            ins[1].require_finite("kl_divergence")?;
            if ins[0].shape() != ins[1].shape() {
                return Err(shape_err("kl_divergence", ins[0].shape(), ins[1].shape()));
            }
            Ok(Vec::new())
        }
        OpKind::MaskCausal => {
            want(1)?;
            let s = ins[0].shape();
            if s.len() < 2 || s[s.len() - 1] != s[s.len() - 2] {
                return Err(shape_err("mask_causal", s, &[]));
            }
            Ok(s.to_vec())
        }
        OpKind::SplitHeads { batch, heads } => {
            want(1)?;
            let s = ins[0].shape();
            if s.len() != 2 || s[0] % batch != 0 || s[1] % heads != 0 {
                return Err(shape_err("split_heads", s, &[*batch, *heads]));
            }
            Ok(vec![batch * heads, s[0] / batch, s[1] / heads])
        }
        OpKind::MergeHeads { batch, heads } => {
            want(1)?;
            let s = ins[0].shape();
            if s.len() != 3 || s[0] != batch * heads {
                return Err(shape_err("merge_heads", s, &[*batch, *heads]));
            }
            Ok(vec![batch * s[1], heads * s[2]])
        }
        OpKind::Sum => {
            want(1)?;
            Ok(Vec::new())
        }
    }
}

// ── Forward evaluation ──────────────────────────────────────────────────

fn compute_into(op: &OpKind, ins: &[&Tensor], out: &mut Tensor) {
    match op {
        OpKind::Leaf => {}
        OpKind::Matmul | OpKind::MatmulNT => {
            let (a, b) = (ins[0], ins[1]);
            let nt = matches!(op, OpKind::MatmulNT);
            if a.rank() == 2 {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = out.shape()[1];
                if nt {
                    tensor::mm_nt(a.data(), b.data(), out.data_mut(), m, k, n);
                } else {
                    tensor::mm_nn(a.data(), b.data(), out.data_mut(), m, k, n);
                }
            } else {
                let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = out.shape()[2];
                if nt {
                    tensor::bmm_nt(a.data(), b.data(), out.data_mut(), ba, m, k, n);
                } else {
                    tensor::bmm_nn(a.data(), b.data(), out.data_mut(), ba, m, k, n);
                }
            }
        }
        OpKind::Add => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() == b.shape() {
                for ((o, &x), &y) in out.data_mut().iter_mut().zip(a.data()).zip(b.data()) {
                    *o = x + y;
                }
            } else {
                let cols = b.numel();
                let bd = b.data();
                for (o, chunk) in out.data_mut().chunks_mut(cols).zip(a.data().chunks(cols)) {
                    for ((oi, &x), &y) in o.iter_mut().zip(chunk).zip(bd) {
                        *oi = x + y;
                    }
                }
            }
        }
        OpKind::Mul => {
            for ((o, &x), &y) in
                out.data_mut().iter_mut().zip(ins[0].data()).zip(ins[1].data())
            {
                *o = x * y;
            }
        }
        OpKind::Scale(f) => {
            for (o, &x) in out.data_mut().iter_mut().zip(ins[0].data()) {
                *o = f * x;
            }
        }
        OpKind::Softmax => {
            let cols = ins[0].cols();
            tensor::softmax_rows(ins[0].data(), out.data_mut(), cols);
        }
        OpKind::LayerNorm { eps } => {
            let cols = ins[0].cols();
            tensor::layernorm_rows(
                ins[0].data(),
                ins[1].data(),
                ins[2].data(),
                out.data_mut(),
                cols,
                *eps,
            );
        }
        OpKind::Gelu => {
            tensor::gelu(ins[0].data(), out.data_mut());
        }
        OpKind::EmbedLookup(ids) => {
            let d = ins[0].shape()[1];
            let table = ins[0].data();
            for (r, &id) in ids.iter().enumerate() {
                let src = &table[id as usize * d..(id as usize + 1) * d];
                out.data_mut()[r * d..(r + 1) * d].copy_from_slice(src);
            }
        }
        OpKind::CrossEntropy => {
            let mut s = 0.0;
            for (&p, &t) in ins[0].data().iter().zip(ins[1].data()) {
                if t != 0.0 {
                    s -= t * math::ln(p);
                }
            }
            out.data_mut()[0] = s;
        }
        OpKind::KlDivergence { target_floor } => {
            out.data_mut()[0] =
                crate::dist::kl_divergence(ins[0].data(), ins[1].data(), *target_floor);
        }
        OpKind::MaskCausal => {
            let s = ins[0].shape();
            let t = s[s.len() - 1];
            let data = ins[0].data();
            for (o, chunk) in out.data_mut().chunks_mut(t * t).zip(data.chunks(t * t)) {
                for i in 0..t {
                    for j in 0..t {
                        o[i * t + j] = if j > i { CAUSAL_MASK_NEG } else { chunk[i * t + j] };
                    }
                }
            }
        }
        OpKind::SplitHeads { batch, heads } => {
            let s = ins[0].shape();
            let (rows, d) = (s[0], s[1]);
            let (t, hd) = (rows / batch, d / heads);
            let src = ins[0].data();
            let dst = out.data_mut();
            for b in 0..*batch {
                for h in 0..*heads {
                    for ti in 0..t {
                        let from = (b * t + ti) * d + h * hd;
                        let to = ((b * heads + h) * t + ti) * hd;
                        dst[to..to + hd].copy_from_slice(&src[from..from + hd]);
                    }
                }
            }
        }
        OpKind::MergeHeads { batch, heads } => {
            let s = ins[0].shape();
            let (t, hd) = (s[1], s[2]);
            let d = heads * hd;
            let src = ins[0].data();
            let dst = out.data_mut();
            for b in 0..*batch {
                for h in 0..*heads {
                    for ti in 0..t {
                        let from = ((b * heads + h) * t + ti) * hd;
                        let to = (b * t + ti) * d + h * hd;
                        dst[to..to + hd].copy_from_slice(&src[from..from + hd]);
                    }
                }
            }
        }
        OpKind::Sum => {
            out.data_mut()[0] = ins[0].data().iter().sum();
        }
    }
}

/// Build a new graph node applying `kind` to `inputs`; the value is computed
/// eagerly and the gradient buffer starts at zero.
pub fn forward_op(kind: OpKind, inputs: &[NodeRef]) -> Result<NodeRef> {
    let values: Vec<Ref<'_, Tensor>> = inputs.iter().map(|n| n.value()).collect();
    let refs: Vec<&Tensor> = values.iter().map(|r| &**r).collect();
    let shape = output_shape(&kind, &refs)?;
    let mut out = Tensor::zeros(&shape);
    compute_into(&kind, &refs, &mut out);
    let needs = inputs.iter().any(|n| n.needs_grad);
    drop(values);
    Ok(DiffNode::alloc(kind, inputs.to_vec(), needs, out))
}

// ── Traversal ───────────────────────────────────────────────────────────

/// Dependency-first (parents before children) order of the graph under `root`.
pub fn topo_order(root: &NodeRef) -> Vec<NodeRef> {
    let mut order: Vec<NodeRef> = Vec::new();
    let mut visited: BTreeSet<u64> = BTreeSet::new();
    let mut stack: Vec<(NodeRef, usize)> = Vec::new();
    visited.insert(root.id);
    stack.push((root.clone(), 0));
    while let Some(top) = stack.last_mut() {
        let node = top.0.clone();
        let ci = top.1;
        if ci < node.parents.len() {
            top.1 += 1;
            let p = node.parents[ci].clone();
            if visited.insert(p.id) {
                stack.push((p, 0));
            }
        } else {
            stack.pop();
            order.push(node);
        }
    }
    order
}

/// Re-evaluate every node of a topo order in place (after leaf mutation).
pub fn recompute(topo: &[NodeRef]) {
    for node in topo {
        if matches!(node.op, OpKind::Leaf) {
            continue;
        }
        let values: Vec<Ref<'_, Tensor>> = node.parents.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|r| &**r).collect();
        let mut out = node.value.borrow_mut();
        compute_into(&node.op, &refs, &mut out);
    }
}

/// Zero the gradient of every node reachable from `root`.
pub fn zero_grads(root: &NodeRef) {
    for node in topo_order(root) {
        node.zero_grad();
    }
}

// ── Backward pass ───────────────────────────────────────────────────────

/// Accumulate `∂root/∂node` into every reachable node's gradient.
///
/// Each call contributes one full adjoint pass, so calling twice without
/// zeroing doubles the gradients.
pub fn backward(root: &NodeRef) -> Result<()> {
    let topo = topo_order(root);
    backward_with_topo(root, &topo)
}

/// `backward` for a pre-computed topo order (saves the traversal when a graph
/// is reused across many iterations).
pub fn backward_with_topo(root: &NodeRef, topo: &[NodeRef]) -> Result<()> {
    if root.value().numel() != 1 {
        return Err(CoreError::NonScalarRoot { shape: root.value().shape().to_vec() });
    }
    let index: BTreeMap<u64, usize> =
        topo.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut adjoint: Vec<Option<Tensor>> = topo.iter().map(|_| None).collect();
    let ri = index[&root.id];
    adjoint[ri] = Some(Tensor::new(root.value().shape(), vec![1.0]));

    for i in (0..topo.len()).rev() {
        let Some(adj) = adjoint[i].take() else { continue };
        let node = &topo[i];
        if !node.needs_grad {
            continue;
        }
        {
            let mut g = node.grad.borrow_mut();
            for (gi, ai) in g.data_mut().iter_mut().zip(adj.data()) {
                *gi += ai;
            }
        }
        propagate(node, &adj, &index, &mut adjoint);
    }
    Ok(())
}

/// Fetch (allocating on first touch) the adjoint slot for `parent`.
fn slot<'a>(
    adjoint: &'a mut [Option<Tensor>],
    index: &BTreeMap<u64, usize>,
    parent: &NodeRef,
) -> &'a mut Tensor {
    let i = index[&parent.id];
    adjoint[i].get_or_insert_with(|| Tensor::zeros(parent.value().shape()))
}

fn propagate(
    node: &NodeRef,
    adj: &Tensor,
    index: &BTreeMap<u64, usize>,
    adjoint: &mut [Option<Tensor>],
) {
    let parents = &node.parents;
    match &node.op {
        OpKind::Leaf => {}
        OpKind::Matmul | OpKind::MatmulNT => {
            let nt = matches!(node.op, OpKind::MatmulNT);
            let a = parents[0].value();
            let b = parents[1].value();
            let batched = a.rank() == 3;
            let (bt, m, k) = if batched {
                (a.shape()[0], a.shape()[1], a.shape()[2])
            } else {
                (1, a.shape()[0], a.shape()[1])
            };
            let n = if nt {
                if batched { b.shape()[1] } else { b.shape()[0] }
            } else if batched {
                b.shape()[2]
            } else {
                b.shape()[1]
            };
            if parents[0].needs_grad {
                let da = slot(adjoint, index, &parents[0]);
                for bi in 0..bt {
                    let (ga, gb) = (bi * m * n, bi * n * k);
                    let dst = &mut da.data_mut()[bi * m * k..(bi + 1) * m * k];
                    if nt {
                        // dA += dC · B
                        tensor::mm_nn_acc(&adj.data()[ga..ga + m * n], &b.data()[gb..gb + n * k], dst, m, n, k);
                    } else {
                        // dA += dC · Bᵀ
                        tensor::mm_nt_acc(&adj.data()[ga..ga + m * n], &b.data()[bi * k * n..(bi + 1) * k * n], dst, m, n, k);
                    }
                }
            }
            if parents[1].needs_grad {
                let db = slot(adjoint, index, &parents[1]);
                for bi in 0..bt {
                    let ga = bi * m * n;
                    if nt {
                        // dB += dCᵀ · A
                        let dst = &mut db.data_mut()[bi * n * k..(bi + 1) * n * k];
                        tensor::mm_tn_acc(&adj.data()[ga..ga + m * n], &a.data()[bi * m * k..(bi + 1) * m * k], dst, m, n, k);
                    } else {
                        // dB += Aᵀ · dC
                        let dst = &mut db.data_mut()[bi * k * n..(bi + 1) * k * n];
                        tensor::mm_tn_acc(&a.data()[bi * m * k..(bi + 1) * m * k], &adj.data()[ga..ga + m * n], dst, m, k, n);
                    }
                }
            }
        }
        OpKind::Add => {
            if parents[0].needs_grad {
                let da = slot(adjoint, index, &parents[0]);
                tensor::axpy(da.data_mut(), 1.0, adj.data());
            }
            if parents[1].needs_grad {
                let db = slot(adjoint, index, &parents[1]);
                let cols = db.numel();
                if cols == adj.numel() {
                    tensor::axpy(db.data_mut(), 1.0, adj.data());
                } else {
                    for chunk in adj.data().chunks(cols) {
                        tensor::axpy(db.data_mut(), 1.0, chunk);
                    }
                }
            }
        }
        OpKind::Mul => {
            for (this, other) in [(0usize, 1usize), (1, 0)] {
                if parents[this].needs_grad {
                    let ov = parents[other].value();
                    let d = slot(adjoint, index, &parents[this]);
                    for ((di, &ai), &oi) in
                        d.data_mut().iter_mut().zip(adj.data()).zip(ov.data())
                    {
                        *di += ai * oi;
                    }
                }
            }
        }
        OpKind::Scale(f) => {
            if parents[0].needs_grad {
                let d = slot(adjoint, index, &parents[0]);
                tensor::axpy(d.data_mut(), *f, adj.data());
            }
        }
        OpKind::Softmax => {
            if parents[0].needs_grad {
                let p = node.value();
                let cols = p.cols();
                let pdata = p.data();
                let adata = adj.data();
                let d = slot(adjoint, index, &parents[0]);
                for_each_chunk(d.data_mut(), cols, pdata.len() * 4, |r, drow| {
                    let prow = &pdata[r * cols..(r + 1) * cols];
                    let arow = &adata[r * cols..(r + 1) * cols];
                    let s = tensor::dot(arow, prow);
                    for ((di, &pi), &ai) in drow.iter_mut().zip(prow).zip(arow) {
                        *di += pi * (ai - s);
                    }
                });
            }
        }
        OpKind::LayerNorm { eps } => {
            let x = parents[0].value();
            let gain = parents[1].value();
            let cols = x.cols();
            let rows = x.numel() / cols;
            if parents[0].needs_grad {
                let xdata = x.data();
                let gdata = gain.data();
                let adata = adj.data();
                let eps = *eps;
                let d = slot(adjoint, index, &parents[0]);
                for_each_chunk(d.data_mut(), cols, xdata.len() * 8, |r, drow| {
                    let xr = &xdata[r * cols..(r + 1) * cols];
                    let ar = &adata[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let mut var = 0.0;
                    for &v in xr {
                        let dv = v - mean;
                        var += dv * dv;
                    }
                    var /= cols as f64;
                    let inv_std = 1.0 / math::sqrt(var + eps);
                    // dy∘g and its row statistics
                    let mut mean_dg = 0.0;
                    let mut mean_dg_xhat = 0.0;
                    for j in 0..cols {
                        let dg = ar[j] * gdata[j];
                        let xhat = (xr[j] - mean) * inv_std;
                        mean_dg += dg;
                        mean_dg_xhat += dg * xhat;
                    }
                    mean_dg /= cols as f64;
                    mean_dg_xhat /= cols as f64;
                    for j in 0..cols {
                        let dg = ar[j] * gdata[j];
                        let xhat = (xr[j] - mean) * inv_std;
                        drow[j] += inv_std * (dg - mean_dg - xhat * mean_dg_xhat);
                    }
                });
            }
            if parents[1].needs_grad || parents[2].needs_grad {
                // column reductions, done serially for determinism
                for which in [1usize, 2] {
                    if !parents[which].needs_grad {
                        continue;
                    }
                    let d = slot(adjoint, index, &parents[which]);
                    for r in 0..rows {
                        let xr = &x.data()[r * cols..(r + 1) * cols];
                        let ar = &adj.data()[r * cols..(r + 1) * cols];
                        if which == 2 {
                            tensor::axpy(d.data_mut(), 1.0, ar);
                        } else {
                            let mean = xr.iter().sum::<f64>() / cols as f64;
                            let mut var = 0.0;
                            for &v in xr {
                                let dv = v - mean;
                                var += dv * dv;
                            }
                            var /= cols as f64;
                            let inv_std = 1.0 / math::sqrt(var + eps);
                            for j in 0..cols {
                                d.data_mut()[j] += ar[j] * (xr[j] - mean) * inv_std;
                            }
                        }
                    }
                }
            }
        }
        OpKind::Gelu => {
            if parents[0].needs_grad {
                let x = parents[0].value();
                let d = slot(adjoint, index, &parents[0]);
                for ((di, &ai), &xi) in d.data_mut().iter_mut().zip(adj.data()).zip(x.data())
                {
                    *di += ai * tensor::gelu_grad(xi);
                }
            }
        }
        OpKind::EmbedLookup(ids) => {
            if parents[0].needs_grad {
                let d = slot(adjoint, index, &parents[0]);
                let cols = d.cols();
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d.data_mut()[id as usize * cols..(id as usize + 1) * cols];
                    tensor::axpy(dst, 1.0, &adj.data()[r * cols..(r + 1) * cols]);
                }
            }
        }
        OpKind::CrossEntropy => {
            let a = adj.data()[0];
            let p = parents[0].value();
            let t = parents[1].value();
            if parents[0].needs_grad {
                let d = slot(adjoint, index, &parents[0]);
                for ((di, &pi), &ti) in d.data_mut().iter_mut().zip(p.data()).zip(t.data()) {
                    if ti != 0.0 {
                        *di -= a * ti / pi;
                    }
                }
            }
            if parents[1].needs_grad {
                let d = slot(adjoint, index, &parents[1]);
                for (di, &pi) in d.data_mut().iter_mut().zip(p.data()) {
                    *di -= a * math::ln(pi);
                }
            }
        }
        OpKind::KlDivergence { target_floor } => {
            let a = adj.data()[0];
            let p = parents[0].value();
            let q = parents[1].value();
            if parents[0].needs_grad {
                let d = slot(adjoint, index, &parents[0]);
                for ((di, &pi), &qi) in d.data_mut().iter_mut().zip(p.data()).zip(q.data()) {
                    if pi > 0.0 && qi >= *target_floor {
                        *di += a * (math::ln(pi) - math::ln(qi) + 1.0);
                    }
                }
            }
            if parents[1].needs_grad {
                let d = slot(adjoint, index, &parents[1]);
                for ((di, &pi), &qi) in d.data_mut().iter_mut().zip(p.data()).zip(q.data()) {
                    if pi > 0.0 && qi >= *target_floor {
                        *di -= a * pi / qi;
                    }
                }
            }
        }
        OpKind::MaskCausal => {
            if parents[0].needs_grad {
                let t = {
                    let s = node.value();
                    s.shape()[s.rank() - 1]
                };
                let d = slot(adjoint, index, &parents[0]);
                for (dchunk, achunk) in
                    d.data_mut().chunks_mut(t * t).zip(adj.data().chunks(t * t))
                {
                    for i in 0..t {
                        for j in 0..=i {
                            dchunk[i * t + j] += achunk[i * t + j];
                        }
                    }
                }
            }
        }
        OpKind::SplitHeads { batch, heads } => {
            if parents[0].needs_grad {
                let d = slot(adjoint, index, &parents[0]);
                let dm = d.cols();
                let rows = d.numel() / dm;
                let (t, hd) = (rows / batch, dm / heads);
                for b in 0..*batch {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let from = ((b * heads + h) * t + ti) * hd;
                            let to = (b * t + ti) * dm + h * hd;
                            tensor::axpy(
                                &mut d.data_mut()[to..to + hd],
                                1.0,
                                &adj.data()[from..from + hd],
                            );
                        }
                    }
                }
            }
        }
        OpKind::MergeHeads { batch, heads } => {
            if parents[0].needs_grad {
                let d = slot(adjoint, index, &parents[0]);
                let (t, hd) = {
                    let s = parents[0].value();
                    (s.shape()[1], s.shape()[2])
                };
                let dm = heads * hd;
                for b in 0..*batch {
                    for h in 0..*heads {
                        for ti in 0..t {
                            let to = ((b * heads + h) * t + ti) * hd;
                            let from = (b * t + ti) * dm + h * hd;
                            tensor::axpy(
                                &mut d.data_mut()[to..to + hd],
                                1.0,
                                &adj.data()[from..from + hd],
                            );
                        }
                    }
                }
            }
        }
        OpKind::Sum => {
            if parents[0].needs_grad {
                let a = adj.data()[0];
                let d = slot(adjoint, index, &parents[0]);
                for di in d.data_mut().iter_mut() {
                    *di += a;
                }
            }
        }
    }
}

// ── Ergonomic op constructors ───────────────────────────────────────────

pub mod ops {
    use super::*;

    pub fn matmul(a: &NodeRef, b: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::Matmul, &[a.clone(), b.clone()])
    }

    pub fn matmul_nt(a: &NodeRef, b: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::MatmulNT, &[a.clone(), b.clone()])
    }

    pub fn add(a: &NodeRef, b: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::Add, &[a.clone(), b.clone()])
    }

    pub fn mul(a: &NodeRef, b: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::Mul, &[a.clone(), b.clone()])
    }

    pub fn scale(a: &NodeRef, f: f64) -> Result<NodeRef> {
        forward_op(OpKind::Scale(f), &[a.clone()])
    }

    pub fn softmax(a: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::Softmax, &[a.clone()])
    }

    pub fn layernorm(x: &NodeRef, gain: &NodeRef, bias: &NodeRef, eps: f64) -> Result<NodeRef> {
        forward_op(OpKind::LayerNorm { eps }, &[x.clone(), gain.clone(), bias.clone()])
    }

    pub fn gelu(a: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::Gelu, &[a.clone()])
    }

    pub fn embed_lookup(table: &NodeRef, ids: &[u32]) -> Result<NodeRef> {
        forward_op(OpKind::EmbedLookup(ids.to_vec()), &[table.clone()])
    }

    pub fn cross_entropy(probs: &NodeRef, target: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::CrossEntropy, &[probs.clone(), target.clone()])
    }

    pub fn kl_divergence(p: &NodeRef, q: &NodeRef, target_floor: f64) -> Result<NodeRef> {
        forward_op(OpKind::KlDivergence { target_floor }, &[p.clone(), q.clone()])
    }

    pub fn mask_causal(a: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::MaskCausal, &[a.clone()])
    }

    pub fn split_heads(a: &NodeRef, batch: usize, heads: usize) -> Result<NodeRef> {
        forward_op(OpKind::SplitHeads { batch, heads }, &[a.clone()])
    }

    pub fn merge_heads(a: &NodeRef, batch: usize, heads: usize) -> Result<NodeRef> {
        forward_op(OpKind::MergeHeads { batch, heads }, &[a.clone()])
    }

    pub fn sum(a: &NodeRef) -> Result<NodeRef> {
        forward_op(OpKind::Sum, &[a.clone()])
    }
}

// ── Gradient checking ───────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Max elements probed per parameter tensor (0 = all).
    pub max_samples_per_param: usize,
    /// Seed for element sampling.
    pub seed: u64,
    /// Absolute floor in the relative-error denominator.
    pub denom_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, max_samples_per_param: 0, seed: 0, denom_floor: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
}

/// Compare analytic gradients against central finite differences.
///
/// `build` must construct a scalar root from the *same* parameter leaves on
/// every call; the analytic pass runs once, then each probed element is
/// perturbed by ±step with the graph rebuilt for the two evaluations.
pub fn grad_check<F>(params: &[Parameter], build: F, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn() -> Result<NodeRef>,
{
    use rand::seq::SliceRandom;

    let root = build()?;
    for p in params {
        p.node.zero_grad();
    }
    zero_grads(&root);
    backward(&root)?;
    let analytic: Vec<Tensor> = params.iter().map(|p| p.node.grad().clone()).collect();

    let mut entries = Vec::with_capacity(params.len());
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let n = p.node.value().numel();
        let mut picks: Vec<usize> = (0..n).collect();
        if cfg.max_samples_per_param > 0 && n > cfg.max_samples_per_param {
            let mut rng = crate::rng::substream(cfg.seed, &p.name);
            picks.shuffle(&mut rng);
            picks.truncate(cfg.max_samples_per_param);
        }
        let mut max_rel = 0.0f64;
        for &e in &picks {
            let orig = p.node.value().data()[e];
            let probe = |v: f64| -> Result<f64> {
                {
                    let mut val = p.node.value.borrow_mut();
                    val.data_mut()[e] = v;
                }
                let r = build()?;
                let out = r.value().item();
                Ok(out)
            };
            let f_plus = probe(orig + cfg.step)?;
            let f_minus = probe(orig - cfg.step)?;
            {
                let mut val = p.node.value.borrow_mut();
                val.data_mut()[e] = orig;
            }
            let fd = (f_plus - f_minus) / (2.0 * cfg.step);
            let g = analytic[pi].data()[e];
            let denom = fd.abs().max(g.abs()).max(cfg.denom_floor);
            max_rel = max_rel.max((fd - g).abs() / denom);
        }
        worst = worst.max(max_rel);
        entries.push(GradCheckEntry { name: p.name.clone(), max_rel_err: max_rel, checked: picks.len() });
    }
    Ok(GradCheckReport { entries, max_rel_err: worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let z = DiffNode::leaf(Tensor::new(&[2], vec![0.0, 0.0]));
        let p = ops::softmax(&z).unwrap();
        assert_eq!(p.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn matmul_identity_returns_operand() {
        let eye = Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let m = Tensor::new(&[3, 3], (0..9).map(|i| i as f64 * 0.7 - 2.0).collect());
        let a = DiffNode::leaf(eye);
        let b = DiffNode::leaf(m.clone());
        let c = ops::matmul(&a, &b).unwrap();
        for (x, y) in c.value().data().iter().zip(m.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = DiffNode::leaf(Tensor::zeros(&[2, 3]));
        let b = DiffNode::leaf(Tensor::zeros(&[4, 5]));
        match ops::matmul(&a, &b) {
            Err(CoreError::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rejects_non_finite_input() {
        let z = DiffNode::leaf(Tensor::new(&[2], vec![f64::NAN, 0.0]));
        assert!(matches!(ops::softmax(&z), Err(CoreError::NonFinite { .. })));
    }

    #[test]
    fn sum_backward_gives_all_ones() {
        let x = DiffNode::leaf(Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]));
        let s = ops::sum(&x).unwrap();
        backward(&s).unwrap();
        assert_eq!(x.grad().data(), &[1.0; 4]);
    }

    #[test]
    fn backward_without_reset_accumulates() {
        let x = DiffNode::leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
        let s = ops::sum(&x).unwrap();
        backward(&s).unwrap();
        backward(&s).unwrap();
        assert_eq!(x.grad().data(), &[2.0; 3]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let x = DiffNode::leaf(Tensor::new(&[2], vec![1.0, 2.0]));
        assert!(matches!(backward(&x), Err(CoreError::NonScalarRoot { .. })));
    }

    #[test]
    fn kl_gradient_vanishes_at_the_minimum() {
        let z = DiffNode::leaf(Tensor::new(&[4], vec![0.3, -0.7, 1.1, 0.2]));
        let p = ops::softmax(&z).unwrap();
        let target = DiffNode::constant(p.value().clone());
        let kl = ops::kl_divergence(&p, &target, 1e-12).unwrap();
        assert!(kl.value().item().abs() < 1e-12);
        backward(&kl).unwrap();
        for &g in z.grad().data() {
            assert!(g.abs() < 1e-8, "grad {g} not ~0 at the KL minimum");
        }
    }

    #[test]
    fn cross_entropy_matches_direct_scalar_evaluation() {
        let mut rng = crate::rng::substream(11, "ce");
        for _ in 0..50 {
            let z_vals: Vec<f64> = (0..6).map(|_| crate::rng::normal(&mut rng)).collect();
            let i = 3usize;
            let z = DiffNode::leaf(Tensor::new(&[6], z_vals.clone()));
            let p = ops::softmax(&z).unwrap();
            let t = DiffNode::constant(Tensor::new(&[6], {
                let mut v = vec![0.0; 6];
                v[i] = 1.0;
                v
            }));
            let ce = ops::cross_entropy(&p, &t).unwrap();
            // direct: −log softmax(z)[i]
            let m = z_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + (z_vals.iter().map(|&v| (v - m).exp()).sum::<f64>()).ln();
            let direct = -(z_vals[i] - lse);
            assert!((ce.value().item() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_causal_zeroes_future_attention() {
        let x = DiffNode::leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let m = ops::mask_causal(&x).unwrap();
        let p = ops::softmax(&m).unwrap();
        assert_eq!(p.value().data()[0], 1.0);
        assert_eq!(p.value().data()[1], 0.0);
    }

    #[test]
    fn split_merge_heads_round_trip() {
        let x = Tensor::new(&[6, 4], (0..24).map(|i| i as f64).collect());
        let n = DiffNode::leaf(x.clone());
        let s = ops::split_heads(&n, 2, 2).unwrap();
        assert_eq!(s.value().shape(), &[4, 3, 2]);
        let m = ops::merge_heads(&s, 2, 2).unwrap();
        assert_eq!(m.value().data(), x.data());
    }

    #[test]
    fn grad_check_passes_on_linear_softmax_ce() {
        let mut rng = crate::rng::substream(3, "gc");
        let w = Parameter {
            node: DiffNode::leaf(Tensor::new(
                &[5, 4],
                (0..20).map(|_| crate::rng::normal(&mut rng) * 0.5).collect(),
            )),
            name: "w".into(),
            trainable: true,
        };
        let x = DiffNode::constant(Tensor::new(
            &[1, 4],
            (0..4).map(|_| crate::rng::normal(&mut rng)).collect(),
        ));
        let t = DiffNode::constant(Tensor::new(&[1, 5], vec![0.0, 0.0, 1.0, 0.0, 0.0]));
        let build = || {
            let logits = ops::matmul_nt(&x, &w.node)?;
            let p = ops::softmax(&logits)?;
            ops::cross_entropy(&p, &t)
        };
        let report = grad_check(core::slice::from_ref(&w), build, &GradCheckConfig::default()).unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn grad_check_on_constant_root_is_exactly_zero() {
        let w = Parameter {
            node: DiffNode::leaf(Tensor::new(&[3], vec![0.5, -1.0, 2.0])),
            name: "w".into(),
            trainable: true,
        };
        let c = DiffNode::constant(Tensor::new(&[3], vec![1.0, 1.0, 1.0]));
        let build = || ops::sum(&c);
        let report = grad_check(core::slice::from_ref(&w), build, &GradCheckConfig::default()).unwrap();
        assert_eq!(report.max_rel_err, 0.0);
        let _ = w;
    }
}
