//! Tape-based reverse-mode differentiation.
//!
//! Every op applied to a [`Var`] is evaluated eagerly and, when any input
//! requires a gradient, recorded on the [`Tape`] together with whatever it
//! needs for its backward rule. Node ids grow monotonically, so the recorded
//! order is already a topological order and [`Tape::backward`] is a single
//! reverse sweep.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{dim_err, domain_err, Result, TensorError};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{numel, split_axis, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Concat,
    Slice,
    Permute,
    Reshape,
    Expand,
    Sum,
    Mean,
    SumAll,
    Softmax,
    MaskedSoftmax,
    Log,
    Exp,
    Gelu,
    LayerNorm,
    L2Normalize,
    EmbeddingLookup,
    EmbeddingBag,
    Mse,
    CrossEntropy,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 25] = [
        OpKind::MatMul,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Concat,
        OpKind::Slice,
        OpKind::Permute,
        OpKind::Reshape,
        OpKind::Expand,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumAll,
        OpKind::Softmax,
        OpKind::MaskedSoftmax,
        OpKind::Log,
        OpKind::Exp,
        OpKind::Gelu,
        OpKind::LayerNorm,
        OpKind::L2Normalize,
        OpKind::EmbeddingLookup,
        OpKind::EmbeddingBag,
        OpKind::Mse,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul_elementwise",
            OpKind::Scale => "scale",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Permute => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Expand => "expand",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumAll => "sum_all",
            OpKind::Softmax => "softmax",
            OpKind::MaskedSoftmax => "masked_softmax",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
            OpKind::Gelu => "gelu",
            OpKind::LayerNorm => "layer_norm",
            OpKind::L2Normalize => "l2_normalize",
            OpKind::EmbeddingLookup => "embedding_lookup",
            OpKind::EmbeddingBag => "embedding_bag",
            OpKind::Mse => "mse",
            OpKind::CrossEntropy => "cross_entropy_with_logits",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.iter().copied().find(|k| k.name() == name)
    }
}

/// Sparse weighted rows: `bags[i]` lists `(row, weight)` pairs summed into output row `i`.
pub type Bags<F> = Arc<Vec<Vec<(usize, F)>>>;

enum Op<F> {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Linear { x: usize, w: usize, b: Option<usize> },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: F },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Permute { a: usize, perm: Vec<usize> },
    Reshape { a: usize },
    Expand { a: usize },
    Sum { a: usize, axis: usize },
    Mean { a: usize, axis: usize },
    SumAll { a: usize },
    Softmax { a: usize, axis: usize },
    MaskedSoftmax { a: usize },
    Log { a: usize },
    Exp { a: usize },
    Gelu { a: usize },
    LayerNorm { a: usize, rstd: Vec<F> },
    L2Normalize { a: usize, axis: usize, norms: Vec<F>, eps: F },
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    EmbeddingBag { table: usize, bags: Bags<F> },
    Mse { a: usize, b: usize },
    CrossEntropy { logits: usize, targets: Vec<usize>, probs: Vec<F> },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Permute { .. } => OpKind::Permute,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Expand { .. } => OpKind::Expand,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::SumAll { .. } => OpKind::SumAll,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::MaskedSoftmax { .. } => OpKind::MaskedSoftmax,
            Op::Log { .. } => OpKind::Log,
            Op::Exp { .. } => OpKind::Exp,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::EmbeddingLookup { .. } => OpKind::EmbeddingLookup,
            Op::EmbeddingBag { .. } => OpKind::EmbeddingBag,
            Op::Mse { .. } => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records operations for one forward/backward pass. Single-threaded.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
    params: RefCell<HashMap<ParamId, Var>>,
    fault: Cell<Option<OpKind>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by node.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of `len` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<F> {
        self.get(v).map(<[F]>::to_vec).unwrap_or_else(|| vec![F::zero(); len])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

/// Right-aligned numpy broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(input: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        let o = i + rank - input.len();
        strides[o] = if input[i] == 1 { 0 } else { acc };
        acc *= input[i];
    }
    strides
}

/// Visits `(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Visits `(out_index, in_offset)` for a permutation of axes.
fn for_each_permuted(in_shape: &[usize], perm: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    for_each_broadcast(&out, &strides, &zeros, |o, i, _| f(o, i));
}

struct MatDims {
    batch: usize,
    /// rows and columns of `a` and `b` as stored
    a_rc: (usize, usize),
    b_rc: (usize, usize),
    b_batched: bool,
    n: usize,
    k: usize,
    m: usize,
}

fn view_strides(rc: (usize, usize), transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rc.1 as isize)
    } else {
        (rc.1 as isize, 1)
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            fault: Cell::new(None),
        }
    }

    /// Negates the upstream gradient of every `kind` node during backward.
    /// Only used to prove the finite-difference suite catches broken rules.
    pub fn inject_fault(&self, kind: Option<OpKind>) {
        self.fault.set(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes.borrow()[v.0].op.kind()
    }

    pub fn leaf(&self, value: Tensor<F>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn var(&self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&self, set: &ParamSet<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.borrow().get(&id) {
            return v;
        }
        let v = self.leaf(set.value(id).clone(), set.is_trainable(id));
        self.params.borrow_mut().insert(id, v);
        v
    }

    /// Gradient-free copy of `v`.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.constant(value)
    }

    /// Collects per-parameter gradients in parameter order.
    pub fn param_grads(&self, grads: &Gradients<F>, n_params: usize) -> Vec<Option<Vec<F>>> {
        let mut out = vec![None; n_params];
        for (id, v) in self.params.borrow().iter() {
            if let Some(g) = grads.get(*v) {
                out[id.index()] = Some(g.to_vec());
            }
        }
        out
    }

    fn push(&self, value: Tensor<F>, op: Op<F>, inputs: &[usize]) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let rg = inputs.iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op: if rg { op } else { Op::Leaf },
            requires_grad: rg,
        });
        Var(nodes.len() - 1)
    }

    // ---------------------------------------------------------------- matmul

    fn mat_dims(&self, op: &'static str, a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatDims> {
        if a.len() < 2 || b.len() < 2 {
            return dim_err(op, format!("need rank >= 2, got {a:?} x {b:?}"));
        }
        let a_rc = (a[a.len() - 2], a[a.len() - 1]);
        let b_rc = (b[b.len() - 2], b[b.len() - 1]);
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let b_batched = !b_batch.is_empty();
        if b_batched && a_batch != b_batch {
            return dim_err(op, format!("batch dims differ: {a:?} x {b:?}"));
        }
        let (n, k) = if ta { (a_rc.1, a_rc.0) } else { a_rc };
        let (k2, m) = if tb { (b_rc.1, b_rc.0) } else { b_rc };
        if k != k2 {
            return dim_err(op, format!("inner dims differ: {a:?} x {b:?} (ta={ta}, tb={tb})"));
        }
        Ok(MatDims {
            batch: a_batch.iter().product(),
            a_rc,
            b_rc,
            b_batched,
            n,
            k,
            m,
        })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes the last two axes.
    /// `a` may carry leading batch axes; `b` is either 2-D or has the same batch axes.
    pub fn matmul_t(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let d = self.mat_dims("matmul", av.shape(), bv.shape(), ta, tb)?;
        let mut shape = av.shape()[..av.rank() - 2].to_vec();
        shape.extend([d.n, d.m]);
        let mut out = vec![F::zero(); d.batch * d.n * d.m];
        let (rsa, csa) = view_strides(d.a_rc, ta);
        let (rsb, csb) = view_strides(d.b_rc, tb);
        let a_sz = d.a_rc.0 * d.a_rc.1;
        let b_sz = d.b_rc.0 * d.b_rc.1;
        if !d.b_batched && !ta {
            F::gemm(
                d.batch * d.n,
                d.k,
                d.m,
                av.data(),
                rsa,
                csa,
                bv.data(),
                rsb,
                csb,
                F::zero(),
                &mut out,
                d.m as isize,
                1,
            );
        } else {
            for i in 0..d.batch {
                let bo = if d.b_batched { i * b_sz } else { 0 };
                F::gemm(
                    d.n,
                    d.k,
                    d.m,
                    &av.data()[i * a_sz..(i + 1) * a_sz],
                    rsa,
                    csa,
                    &bv.data()[bo..bo + b_sz],
                    rsb,
                    csb,
                    F::zero(),
                    &mut out[i * d.n * d.m..(i + 1) * d.n * d.m],
                    d.m as isize,
                    1,
                );
            }
        }
        Ok(self.push(Tensor::from_vec(shape, out), Op::MatMul { a: a.0, b: b.0, ta, tb }, &[a.0, b.0]))
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() < 1 || wv.rank() != 2 || xv.shape()[xv.rank() - 1] != wv.shape()[1] {
            return dim_err("linear", format!("x {:?}, w {:?}", xv.shape(), wv.shape()));
        }
        let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
        let rows = xv.numel() / in_dim.max(1);
        let mut out = vec![F::zero(); rows * out_dim];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [out_dim] {
                return dim_err("linear", format!("bias {:?} for out dim {out_dim}", bv.shape()));
            }
            for row in out.chunks_mut(out_dim.max(1)) {
                row.copy_from_slice(bv.data());
            }
        }
        F::gemm(
            rows,
            in_dim,
            out_dim,
            xv.data(),
            in_dim as isize,
            1,
            wv.data(),
            1,
            in_dim as isize,
            F::one(),
            &mut out,
            out_dim as isize,
            1,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = out_dim;
        let mut inputs = vec![x.0, w.0];
        inputs.extend(b.map(|b| b.0));
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
            },
            &inputs,
        ))
    }

    // ----------------------------------------------------------- elementwise

    fn binary(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<(Tensor<F>, [usize; 2])> {
        let (av, bv) = (self.value(a), self.value(b));
        let Some(shape) = broadcast_shape(av.shape(), bv.shape()) else {
            return dim_err(op, format!("cannot broadcast {:?} with {:?}", av.shape(), bv.shape()));
        };
        let out = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(av.shape(), &shape);
            let sb = broadcast_strides(bv.shape(), &shape);
            let mut out = vec![F::zero(); numel(&shape)];
            let (ad, bd) = (av.data(), bv.data());
            for_each_broadcast(&shape, &sa, &sb, |o, ia, ib| out[o] = f(ad[ia], bd[ib]));
            out
        };
        Ok((Tensor::from_vec(shape, out), [a.0, b.0]))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add { a: a.0, b: b.0 }, &ins))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub { a: a.0, b: b.0 }, &ins))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let (t, ins) = self.binary("mul_elementwise", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul { a: a.0, b: b.0 }, &ins))
    }

    pub fn scale(&self, a: Var, c: F) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x * c).collect();
        self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::Scale { a: a.0, c }, &[a.0])
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.numel() == 0 {
            return domain_err("log", "empty input");
        }
        if let Some(bad) = av.data().iter().find(|&&x| x <= F::zero()) {
            return domain_err("log", format!("non-positive input {bad}"));
        }
        let out = av.data().iter().map(|&x| x.ln()).collect();
        Ok(self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::Log { a: a.0 }, &[a.0]))
    }

    pub fn exp(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| x.exp()).collect();
        self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::Exp { a: a.0 }, &[a.0])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self, a: Var) -> Var {
        let av = self.value(a);
        let (c, k) = (F::from_f64_lossy(GELU_C), F::from_f64_lossy(GELU_A));
        let half = F::from_f64_lossy(0.5);
        let out = av.data().iter().map(|&x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh())).collect();
        self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::Gelu { a: a.0 }, &[a.0])
    }

    // -------------------------------------------------------------- layout

    pub fn concat(&self, vars: &[Var], axis: usize) -> Result<Var> {
        if vars.is_empty() {
            return dim_err("concat", "no inputs");
        }
        let vals: Vec<Tensor<F>> = vars.iter().map(|&v| self.value(v)).collect();
        let base = vals[0].shape().to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} for rank {}", base.len()));
        }
        let mut total = 0;
        for v in &vals {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return dim_err("concat", format!("{:?} vs {:?} on axis {axis}", s, base));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for v in &vals {
                let blk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * blk..(o + 1) * blk]);
            }
        }
        let ins: Vec<usize> = vars.iter().map(|v| v.0).collect();
        Ok(self.push(Tensor::from_vec(shape, out), Op::Concat { inputs: ins.clone(), axis }, &ins))
    }

    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() || start + len > av.shape()[axis] {
            return dim_err("slice", format!("{start}..{} on axis {axis} of {:?}", start + len, av.shape()));
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&av.data()[base..base + len * inner]);
        }
        let mut shape = av.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(Tensor::from_vec(shape, out), Op::Slice { a: a.0, axis, start }, &[a.0]))
    }

    pub fn permute(&self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let mut seen = vec![false; av.rank()];
        if perm.len() != av.rank() || perm.iter().any(|&p| p >= av.rank() || std::mem::replace(&mut seen[p], true)) {
            return dim_err("transpose", format!("bad permutation {perm:?} for {:?}", av.shape()));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| av.shape()[p]).collect();
        let mut out = vec![F::zero(); av.numel()];
        let d = av.data();
        for_each_permuted(av.shape(), perm, |o, i| out[o] = d[i]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Permute { a: a.0, perm: perm.to_vec() }, &[a.0]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r < 2 {
            return dim_err("transpose", format!("rank {r}"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshaped(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Repeats `a` along a new leading axis of extent `n`.
    pub fn expand(&self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        let mut shape = vec![n];
        shape.extend_from_slice(av.shape());
        let out = av.data().repeat(n);
        self.push(Tensor::from_vec(shape, out), Op::Expand { a: a.0 }, &[a.0])
    }

    // ---------------------------------------------------------- reductions

    fn reduce(&self, op: &'static str, a: Var, axis: usize, mean: bool) -> Result<(Tensor<F>, usize)> {
        let av = self.value(a);
        if axis >= av.rank() {
            return dim_err(op, format!("axis {axis} for {:?}", av.shape()));
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        if mean && n == 0 {
            return domain_err(op, "mean over empty axis");
        }
        let mut out = vec![F::zero(); outer * inner];
        let d = av.data();
        for o in 0..outer {
            for j in 0..n {
                let src = &d[(o * n + j) * inner..(o * n + j + 1) * inner];
                add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        if mean {
            let inv = F::one() / F::from_usize(n).unwrap();
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut shape = av.shape().to_vec();
        shape.remove(axis);
        Ok((Tensor::from_vec(shape, out), a.0))
    }

    pub fn sum(&self, a: Var, axis: usize) -> Result<Var> {
        let (t, i) = self.reduce("sum", a, axis, false)?;
        Ok(self.push(t, Op::Sum { a: i, axis }, &[i]))
    }

    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        let (t, i) = self.reduce("mean", a, axis, true)?;
        Ok(self.push(t, Op::Mean { a: i, axis }, &[i]))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll { a: a.0 }, &[a.0])
    }

    // ------------------------------------------------------------ softmax

    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return dim_err("softmax", format!("axis {axis} for {:?}", av.shape()));
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        if n == 0 {
            return domain_err("softmax", "empty axis");
        }
        let d = av.data();
        let mut out = vec![F::zero(); av.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| d[at(j)]).fold(F::neg_infinity(), F::max);
                let mut z = F::zero();
                for j in 0..n {
                    let e = (d[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[at(j)] /= z;
                }
            }
        }
        Ok(self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::Softmax { a: a.0, axis }, &[a.0]))
    }

    /// Softmax over the last axis restricted to `mask[q][k] == true` entries.
    ///
    /// `mask` is `[nq, nk]` row-major and broadcasts over leading axes. Rows
    /// with no allowed entry are an error unless `zero_fill`, in which case
    /// they come out as zeros. Returns the output and the zero-filled row count.
    pub fn masked_softmax(&self, a: Var, mask: &[bool], zero_fill: bool) -> Result<(Var, usize)> {
        let av = self.value(a);
        let r = av.rank();
        if r < 2 {
            return dim_err("masked_softmax", format!("rank {r}"));
        }
        let (nq, nk) = (av.shape()[r - 2], av.shape()[r - 1]);
        if mask.len() != nq * nk {
            return dim_err("masked_softmax", format!("mask of {} for {nq}x{nk}", mask.len()));
        }
        if nk == 0 {
            return domain_err("masked_softmax", "empty axis");
        }
        let d = av.data();
        let mut out = vec![F::zero(); av.numel()];
        let mut empty_rows = 0;
        for (row, (src, dst)) in d.chunks(nk).zip(out.chunks_mut(nk)).enumerate() {
            let m = &mask[(row % nq) * nk..(row % nq + 1) * nk];
            let mx = src.iter().zip(m).filter(|(_, &ok)| ok).map(|(&v, _)| v).fold(F::neg_infinity(), F::max);
            if src.iter().zip(m).any(|(v, &ok)| ok && v.is_nan()) {
                dst.iter_mut().for_each(|o| *o = F::nan());
                continue;
            }
            if mx == F::neg_infinity() {
                if !zero_fill {
                    return Err(TensorError::Contract(format!("masked_softmax: query row {} has no allowed key", row % nq)));
                }
                empty_rows += 1;
                continue;
            }
            let mut z = F::zero();
            for ((o, &v), &ok) in dst.iter_mut().zip(src).zip(m) {
                if ok {
                    *o = (v - mx).exp();
                    z += *o;
                }
            }
            dst.iter_mut().for_each(|o| *o /= z);
        }
        let v = self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::MaskedSoftmax { a: a.0 }, &[a.0]);
        Ok((v, empty_rows))
    }

    // -------------------------------------------------------- normalizers

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, a: Var, eps: F) -> Result<Var> {
        let av = self.value(a);
        let Some(&n) = av.shape().last() else {
            return dim_err("layer_norm", "scalar input");
        };
        if n == 0 {
            return domain_err("layer_norm", "empty axis");
        }
        let nf = F::from_usize(n).unwrap();
        let mut out = vec![F::zero(); av.numel()];
        let mut rstd = Vec::with_capacity(av.numel() / n);
        for (src, dst) in av.data().chunks(n).zip(out.chunks_mut(n)) {
            let mu = src.iter().copied().sum::<F>() / nf;
            let var = src.iter().map(|&x| (x - mu) * (x - mu)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            for (o, &x) in dst.iter_mut().zip(src) {
                *o = (x - mu) * r;
            }
            rstd.push(r);
        }
        Ok(self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::LayerNorm { a: a.0, rstd }, &[a.0]))
    }

    /// `x / max(‖x‖, eps)` along `axis`.
    pub fn l2_normalize(&self, a: Var, axis: usize, eps: F) -> Result<Var> {
        let av = self.value(a);
        if axis >= av.rank() {
            return dim_err("l2_normalize", format!("axis {axis} for {:?}", av.shape()));
        }
        let (outer, n, inner) = split_axis(av.shape(), axis);
        let d = av.data();
        let mut out = vec![F::zero(); av.numel()];
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let nrm = (0..n).map(|j| d[at(j)] * d[at(j)]).sum::<F>().sqrt();
                let den = nrm.max(eps);
                for j in 0..n {
                    out[at(j)] = d[at(j)] / den;
                }
                norms.push(nrm);
            }
        }
        Ok(self.push(Tensor::from_vec(av.shape().to_vec(), out), Op::L2Normalize { a: a.0, axis, norms, eps }, &[a.0]))
    }

    // --------------------------------------------------------- embeddings

    pub fn embedding_lookup(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return dim_err("embedding_lookup", format!("table {:?}", tv.shape()));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return dim_err("embedding_lookup", format!("id {id} >= {rows}"));
            }
            out.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_vec(vec![ids.len(), d], out),
            Op::EmbeddingLookup {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Weighted sum of table rows per bag: a sparse-by-dense product.
    pub fn embedding_bag(&self, table: Var, bags: Bags<F>) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return dim_err("embedding_bag", format!("table {:?}", tv.shape()));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = vec![F::zero(); bags.len() * d];
        for (bag, dst) in bags.iter().zip(out.chunks_mut(d.max(1))) {
            for &(id, w) in bag {
                if id >= rows {
                    return dim_err("embedding_bag", format!("id {id} >= {rows}"));
                }
                for (o, &t) in dst.iter_mut().zip(&tv.data()[id * d..(id + 1) * d]) {
                    *o += w * t;
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(vec![bags.len(), d], out),
            Op::EmbeddingBag { table: table.0, bags },
            &[table.0],
        ))
    }

    // --------------------------------------------------------------- losses

    /// Mean of squared differences; scalar output.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return dim_err("mse", format!("{:?} vs {:?}", av.shape(), bv.shape()));
        }
        if av.numel() == 0 {
            return domain_err("mse", "empty input");
        }
        let s: F = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let v = s / F::from_usize(av.numel()).unwrap();
        Ok(self.push(Tensor::scalar(v), Op::Mse { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Mean softmax cross-entropy of `[N, C]` logits against class ids.
    pub fn cross_entropy_with_logits(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != targets.len() {
            return dim_err("cross_entropy_with_logits", format!("logits {:?} for {} targets", lv.shape(), targets.len()));
        }
        let (n, c) = (lv.shape()[0], lv.shape()[1]);
        if n == 0 || c == 0 {
            return domain_err("cross_entropy_with_logits", "empty batch or class axis");
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return domain_err("cross_entropy_with_logits", format!("target {t} out of range for {c} classes"));
        }
        let mut probs = vec![F::zero(); n * c];
        let mut total = F::zero();
        for ((row, p), &t) in lv.data().chunks(c).zip(probs.chunks_mut(c)).zip(targets) {
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (pi, &x) in p.iter_mut().zip(row) {
                *pi = (x - mx).exp();
                z += *pi;
            }
            p.iter_mut().for_each(|pi| *pi /= z);
            total += z.ln() + mx - row[t];
        }
        let loss = total / F::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            &[logits.0],
        ))
    }

    // ------------------------------------------------------------- backward

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let n = self.nodes.borrow()[loss.0].value.numel();
        if n != 1 {
            return Err(TensorError::Contract(format!("backward needs a scalar loss, got {} elements", n)));
        }
        self.backward_seeded(&[(loss, vec![F::one()])])
    }

    /// Reverse sweep from arbitrary upstream gradients on several nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<F>)]) -> Result<Gradients<F>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<F>>> = (0..nodes.len()).map(|_| None).collect();
        let mut top = 0;
        for (v, g) in seeds {
            if g.len() != nodes[v.0].value.numel() {
                return Err(TensorError::Contract(format!(
                    "seed of {} elements for node of {}",
                    g.len(),
                    nodes[v.0].value.numel()
                )));
            }
            match &mut grads[v.0] {
                Some(acc) => add_into(acc, g),
                slot => *slot = Some(g.clone()),
            }
            top = top.max(v.0 + 1);
        }
        let fault = self.fault.get();
        for id in (0..top).rev() {
            let Some(mut g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad && !matches!(node.op, Op::Leaf) {
                let flipped = fault == Some(node.op.kind());
                if flipped {
                    g.iter_mut().for_each(|x| *x = -*x);
                }
                backprop(&nodes, id, &g, &mut grads);
                if flipped {
                    g.iter_mut().for_each(|x| *x = -*x);
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn send<F: Scalar>(nodes: &[Node<F>], grads: &mut [Option<Vec<F>>], input: usize, contrib: Vec<F>) {
    if !nodes[input].requires_grad {
        return;
    }
    match &mut grads[input] {
        Some(acc) => add_into(acc, &contrib),
        slot => *slot = Some(contrib),
    }
}

/// Sums a broadcast gradient back onto an input's shape.
fn unbroadcast<F: Scalar>(g: &[F], out: &[usize], input: &[usize], scale: Option<(&[F], &[usize])>) -> Vec<F> {
    let mut acc = vec![F::zero(); numel(input)];
    let si = broadcast_strides(input, out);
    match scale {
        None if input == out => return g.to_vec(),
        None => {
            let zeros = vec![0; out.len()];
            for_each_broadcast(out, &si, &zeros, |o, i, _| acc[i] += g[o]);
        }
        Some((other, other_shape)) => {
            let so = broadcast_strides(other_shape, out);
            for_each_broadcast(out, &si, &so, |o, i, j| acc[i] += g[o] * other[j]);
        }
    }
    acc
}

fn backprop<F: Scalar>(nodes: &[Node<F>], id: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
    let out = &nodes[id].value;
    let need = |i: usize| nodes[i].requires_grad;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        &Op::MatMul { a, b, ta, tb } => {
            let (av, bv) = (val(a), val(b));
            let a_rc = (av.shape()[av.rank() - 2], av.shape()[av.rank() - 1]);
            let b_rc = (bv.shape()[bv.rank() - 2], bv.shape()[bv.rank() - 1]);
            let b_batched = bv.rank() > 2;
            let (n, k) = if ta { (a_rc.1, a_rc.0) } else { a_rc };
            let m = if tb { b_rc.0 } else { b_rc.1 };
            let batch = av.numel() / (a_rc.0 * a_rc.1).max(1);
            let (a_sz, b_sz) = (a_rc.0 * a_rc.1, b_rc.0 * b_rc.1);
            let (rsa, csa) = view_strides(a_rc, ta);
            let (rsb, csb) = view_strides(b_rc, tb);
            // op(A) gradient = G · op(B)ᵀ, written through A's own layout.
            if need(a) {
                let mut da = vec![F::zero(); av.numel()];
                let (rsc, csc) = if ta { (1, a_rc.1 as isize) } else { (a_rc.1 as isize, 1) };
                for i in 0..batch {
                    let bo = if b_batched { i * b_sz } else { 0 };
                    F::gemm(
                        n,
                        m,
                        k,
                        &g[i * n * m..(i + 1) * n * m],
                        m as isize,
                        1,
                        &bv.data()[bo..bo + b_sz],
                        csb,
                        rsb,
                        F::one(),
                        &mut da[i * a_sz..(i + 1) * a_sz],
                        rsc,
                        csc,
                    );
                }
                send(nodes, grads, a, da);
            }
            // op(B) gradient = op(A)ᵀ · G
            if need(b) {
                let mut db = vec![F::zero(); bv.numel()];
                let (rsc, csc) = if tb { (1, b_rc.1 as isize) } else { (b_rc.1 as isize, 1) };
                if !b_batched && !ta {
                    F::gemm(k, batch * n, m, av.data(), csa, rsa, g, m as isize, 1, F::one(), &mut db, rsc, csc);
                } else {
                    for i in 0..batch {
                        let bo = if b_batched { i * b_sz } else { 0 };
                        F::gemm(
                            k,
                            n,
                            m,
                            &av.data()[i * a_sz..(i + 1) * a_sz],
                            csa,
                            rsa,
                            &g[i * n * m..(i + 1) * n * m],
                            m as isize,
                            1,
                            F::one(),
                            &mut db[bo..bo + b_sz],
                            rsc,
                            csc,
                        );
                    }
                }
                send(nodes, grads, b, db);
            }
        }
        &Op::Linear { x, w, b } => {
            let (xv, wv) = (val(x), val(w));
            let (out_dim, in_dim) = (wv.shape()[0], wv.shape()[1]);
            let rows = xv.numel() / in_dim.max(1);
            if need(x) {
                let mut dx = vec![F::zero(); xv.numel()];
                F::gemm(
                    rows,
                    out_dim,
                    in_dim,
                    g,
                    out_dim as isize,
                    1,
                    wv.data(),
                    in_dim as isize,
                    1,
                    F::zero(),
                    &mut dx,
                    in_dim as isize,
                    1,
                );
                send(nodes, grads, x, dx);
            }
            if need(w) {
                let mut dw = vec![F::zero(); wv.numel()];
                F::gemm(
                    out_dim,
                    rows,
                    in_dim,
                    g,
                    1,
                    out_dim as isize,
                    xv.data(),
                    in_dim as isize,
                    1,
                    F::zero(),
                    &mut dw,
                    in_dim as isize,
                    1,
                );
                send(nodes, grads, w, dw);
            }
            if let Some(b) = b.filter(|&b| need(b)) {
                let mut db = vec![F::zero(); out_dim];
                for row in g.chunks(out_dim.max(1)) {
                    add_into(&mut db, row);
                }
                send(nodes, grads, b, db);
            }
        }
        &Op::Add { a, b } | &Op::Sub { a, b } => {
            let neg = matches!(nodes[id].op, Op::Sub { .. });
            if need(a) {
                let da = unbroadcast(g, out.shape(), val(a).shape(), None);
                send(nodes, grads, a, da);
            }
            if need(b) {
                let mut db = unbroadcast(g, out.shape(), val(b).shape(), None);
                if neg {
                    db.iter_mut().for_each(|x| *x = -*x);
                }
                send(nodes, grads, b, db);
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if need(a) {
                let da = unbroadcast(g, out.shape(), av.shape(), Some((bv.data(), bv.shape())));
                send(nodes, grads, a, da);
            }
            if need(b) {
                let db = unbroadcast(g, out.shape(), bv.shape(), Some((av.data(), av.shape())));
                send(nodes, grads, b, db);
            }
        }
        &Op::Scale { a, c } => {
            send(nodes, grads, a, g.iter().map(|&x| x * c).collect());
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &i in inputs {
                let len = val(i).shape()[*axis];
                if need(i) {
                    let mut di = Vec::with_capacity(val(i).numel());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        di.extend_from_slice(&g[base..base + len * inner]);
                    }
                    send(nodes, grads, i, di);
                }
                offset += len;
            }
        }
        &Op::Slice { a, axis, start } => {
            let av = val(a);
            let (outer, n, inner) = split_axis(av.shape(), axis);
            let len = out.shape()[axis];
            let mut da = vec![F::zero(); av.numel()];
            for o in 0..outer {
                let base = o * n * inner + start * inner;
                da[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            send(nodes, grads, a, da);
        }
        Op::Permute { a, perm } => {
            let av = val(*a);
            let mut da = vec![F::zero(); av.numel()];
            for_each_permuted(av.shape(), perm, |o, i| da[i] = g[o]);
            send(nodes, grads, *a, da);
        }
        &Op::Reshape { a } => send(nodes, grads, a, g.to_vec()),
        &Op::Expand { a } => {
            let n = val(a).numel();
            let mut da = vec![F::zero(); n];
            for chunk in g.chunks(n.max(1)) {
                add_into(&mut da, chunk);
            }
            send(nodes, grads, a, da);
        }
        &Op::Sum { a, axis } | &Op::Mean { a, axis } => {
            let av = val(a);
            let (outer, n, inner) = split_axis(av.shape(), axis);
            let scale = if matches!(nodes[id].op, Op::Mean { .. }) {
                F::one() / F::from_usize(n).unwrap()
            } else {
                F::one()
            };
            let mut da = vec![F::zero(); av.numel()];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        da[(o * n + j) * inner + i] = g[o * inner + i] * scale;
                    }
                }
            }
            send(nodes, grads, a, da);
        }
        &Op::SumAll { a } => send(nodes, grads, a, vec![g[0]; val(a).numel()]),
        &Op::Softmax { a, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), axis);
            let y = out.data();
            let mut da = vec![F::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let dot: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                    for j in 0..n {
                        da[at(j)] = y[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            send(nodes, grads, a, da);
        }
        &Op::MaskedSoftmax { a } => {
            let nk = *out.shape().last().unwrap();
            let y = out.data();
            let mut da = vec![F::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks(nk).zip(g.chunks(nk)).zip(da.chunks_mut(nk)) {
                let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                for ((d, &p), &q) in dr.iter_mut().zip(yr).zip(gr) {
                    *d = p * (q - dot);
                }
            }
            send(nodes, grads, a, da);
        }
        &Op::Log { a } => {
            let da = g.iter().zip(val(a).data()).map(|(&gg, &x)| gg / x).collect();
            send(nodes, grads, a, da);
        }
        &Op::Exp { a } => {
            let da = g.iter().zip(out.data()).map(|(&gg, &y)| gg * y).collect();
            send(nodes, grads, a, da);
        }
        &Op::Gelu { a } => {
            let (c, k) = (F::from_f64_lossy(GELU_C), F::from_f64_lossy(GELU_A));
            let half = F::from_f64_lossy(0.5);
            let three = F::from_f64_lossy(3.0);
            let da = g
                .iter()
                .zip(val(a).data())
                .map(|(&gg, &x)| {
                    let t = (c * (x + k * x * x * x)).tanh();
                    let dt = (F::one() - t * t) * c * (F::one() + three * k * x * x);
                    gg * (half * (F::one() + t) + half * x * dt)
                })
                .collect();
            send(nodes, grads, a, da);
        }
        Op::LayerNorm { a, rstd } => {
            let n = *out.shape().last().unwrap();
            let nf = F::from_usize(n).unwrap();
            let mut da = vec![F::zero(); out.numel()];
            for (((yr, gr), dr), &r) in out.data().chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)).zip(rstd) {
                let mg = gr.iter().copied().sum::<F>() / nf;
                let mgy = gr.iter().zip(yr).map(|(&q, &y)| q * y).sum::<F>() / nf;
                for ((d, &q), &y) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = r * (q - mg - y * mgy);
                }
            }
            send(nodes, grads, *a, da);
        }
        Op::L2Normalize { a, axis, norms, eps } => {
            let (outer, n, inner) = split_axis(out.shape(), *axis);
            let y = out.data();
            let mut da = vec![F::zero(); y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * n + j) * inner + i;
                    let nrm = norms[o * inner + i];
                    if nrm > *eps {
                        let dot: F = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            da[at(j)] = (g[at(j)] - y[at(j)] * dot) / nrm;
                        }
                    } else {
                        for j in 0..n {
                            da[at(j)] = g[at(j)] / *eps;
                        }
                    }
                }
            }
            send(nodes, grads, *a, da);
        }
        Op::EmbeddingLookup { table, ids } => {
            let tv = val(*table);
            let d = tv.shape()[1];
            let mut dt = vec![F::zero(); tv.numel()];
            for (row, &id) in g.chunks(d.max(1)).zip(ids) {
                add_into(&mut dt[id * d..(id + 1) * d], row);
            }
            send(nodes, grads, *table, dt);
        }
        Op::EmbeddingBag { table, bags } => {
            let tv = val(*table);
            let d = tv.shape()[1];
            let mut dt = vec![F::zero(); tv.numel()];
            for (row, bag) in g.chunks(d.max(1)).zip(bags.iter()) {
                for &(id, w) in bag {
                    for (t, &q) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *t += w * q;
                    }
                }
            }
            send(nodes, grads, *table, dt);
        }
        &Op::Mse { a, b } => {
            let (av, bv) = (val(a), val(b));
            let k = g[0] * F::from_f64_lossy(2.0) / F::from_usize(av.numel()).unwrap();
            let diff: Vec<F> = av.data().iter().zip(bv.data()).map(|(&x, &y)| (x - y) * k).collect();
            if need(b) {
                send(nodes, grads, b, diff.iter().map(|&x| -x).collect());
            }
            if need(a) {
                send(nodes, grads, a, diff);
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            let c = val(*logits).shape()[1];
            let k = g[0] / F::from_usize(targets.len()).unwrap();
            let mut dl: Vec<F> = probs.iter().map(|&p| p * k).collect();
            for (row, &t) in dl.chunks_mut(c).zip(targets) {
                row[t] -= k;
            }
            send(nodes, grads, *logits, dl);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v)
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let i = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let y = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn matmul_transposed_views() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let aat = tape.matmul_t(a, a, false, true).unwrap();
        assert_eq!(tape.value(aat).data(), &[14., 32., 32., 77.]);
        let ata = tape.matmul_t(a, a, true, false).unwrap();
        assert_eq!(tape.shape(ata), vec![3, 3]);
        assert_eq!(tape.value(ata).get(&[2, 2]), 45.0);
    }

    #[test]
    fn softmax_symmetric() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_empty_axis_is_domain_error() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 0], &[]));
        assert!(matches!(tape.softmax(x, 1), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn log_rejects_empty() {
        let tape = Tape::new();
        let x = tape.constant(t(&[0], &[]));
        assert!(matches!(tape.log(x), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn mse_scalar() {
        let tape = Tape::new();
        let a = tape.var(t(&[1], &[0.5]));
        let b = tape.constant(t(&[1], &[1.0]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.25);
    }

    #[test]
    fn sum_grad_is_ones() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[1., 2., 3.]));
        let l = tape.sum_all(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1., 1., 1.]);
    }

    #[test]
    fn hand_chain_rule() {
        // loss = mse(w·x, y), w=1, x=2, y=0 -> d/dw = 2(wx - y)x = 8
        let tape = Tape::new();
        let w = tape.var(t(&[1], &[1.0]));
        let x = tape.constant(t(&[1], &[2.0]));
        let y = tape.constant(t(&[1], &[0.0]));
        let wx = tape.mul(w, x).unwrap();
        let l = tape.mse(wx, y).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(w).unwrap(), &[8.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, -2.0]));
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(t(&[2], &[1.0, 2.0]));
        let c = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        assert!(tape.requires_grad(y));
        let l = tape.sum_all(y);
        let g = tape.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 2], &[3]), None);
    }

    #[test]
    fn dimension_error_names_op() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 3], &[0.; 6]));
        let b = tape.constant(t(&[2, 3], &[0.; 6]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
        assert!(err.to_string().contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_softmax_rows() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 5.0, 1.0, 1.0]));
        let mask = [true, false, true, true];
        let (y, empty) = tape.masked_softmax(x, &mask, false).unwrap();
        assert_eq!(empty, 0);
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.5, 0.5]);
        let none = [false, false, true, true];
        assert!(tape.masked_softmax(x, &none, false).is_err());
        let (z, empty) = tape.masked_softmax(x, &none, true).unwrap();
        assert_eq!(empty, 1);
        assert_eq!(&tape.value(z).data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_target_range() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 3], &[0.0, 0.0, 0.0]));
        assert!(tape.cross_entropy_with_logits(x, &[3]).is_err());
        let l = tape.cross_entropy_with_logits(x, &[1]).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-12);
    }
}
