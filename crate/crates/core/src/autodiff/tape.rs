//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Inputs always
//! precede outputs, so one reverse sweep over the node list visits every
//! operation exactly once. A tape belongs to a single thread; independent
//! tapes can run concurrently.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::{numel_of, strides_of, Tensor};
use crate::error::{Error, Result};

/// Elementwise nonlinearities with closed-form derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Ln,
    Sqrt,
    Square,
    Powf(f64),
    Silu,
    Tanh,
    Sigmoid,
    /// CIELAB companding `f(t)`: cube root above `(6/29)^3`, linear below.
    LabF,
    /// Inverse of [`Unary::LabF`].
    LabFInv,
    /// sRGB electro-optical transfer function.
    SrgbToLinear,
    /// Inverse of [`Unary::SrgbToLinear`].
    LinearToSrgb,
}

const LAB_DELTA: f64 = 6.0 / 29.0;

/// Linear-light value at the sRGB branch point `0.04045`. Using this exact
/// value as the inverse threshold keeps both directions on matching branches.
pub(crate) const SRGB_LINEAR_KNEE: f64 = 0.04045 / 12.92;

impl Unary {
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Powf(p) => x.powf(p),
            Unary::Silu => x / (1.0 + (-x).exp()),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::LabF => {
                if x > LAB_DELTA.powi(3) {
                    x.cbrt()
                } else {
                    x / (3.0 * LAB_DELTA * LAB_DELTA) + 4.0 / 29.0
                }
            }
            Unary::LabFInv => {
                if x > LAB_DELTA {
                    x * x * x
                } else {
                    3.0 * LAB_DELTA * LAB_DELTA * (x - 4.0 / 29.0)
                }
            }
            Unary::SrgbToLinear => {
                if x <= 0.04045 {
                    x / 12.92
                } else {
                    ((x + 0.055) / 1.055).powf(2.4)
                }
            }
            Unary::LinearToSrgb => {
                if x <= SRGB_LINEAR_KNEE {
                    x * 12.92
                } else {
                    1.055 * x.powf(1.0 / 2.4) - 0.055
                }
            }
        }
    }

    /// Derivative at input `x` with output `y = eval(x)`.
    pub fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Powf(p) => p * x.powf(p - 1.0),
            Unary::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s + x * s * (1.0 - s)
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::LabF => {
                if x > LAB_DELTA.powi(3) {
                    1.0 / (3.0 * y * y)
                } else {
                    1.0 / (3.0 * LAB_DELTA * LAB_DELTA)
                }
            }
            Unary::LabFInv => {
                if x > LAB_DELTA {
                    3.0 * x * x
                } else {
                    3.0 * LAB_DELTA * LAB_DELTA
                }
            }
            Unary::SrgbToLinear => {
                if x <= 0.04045 {
                    1.0 / 12.92
                } else {
                    2.4 / 1.055 * ((x + 0.055) / 1.055).powf(1.4)
                }
            }
            Unary::LinearToSrgb => {
                if x <= SRGB_LINEAR_KNEE {
                    12.92
                } else {
                    1.055 / 2.4 * x.powf(1.0 / 2.4 - 1.0)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Bounds {
    Scalar(f64, f64),
    Tensor(Rc<Tensor>, Rc<Tensor>),
}

impl Bounds {
    #[inline]
    fn at(&self, i: usize) -> (f64, f64) {
        match self {
            Bounds::Scalar(lo, hi) => (*lo, *hi),
            Bounds::Tensor(lo, hi) => (lo.data()[i], hi.data()[i]),
        }
    }
}

enum Op {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize },
    Unary { kind: Unary, x: usize },
    Affine { x: usize, scale: f64 },
    Clip { x: usize, bounds: Bounds },
    LinearAlong { x: usize, axis: usize, mat: Rc<Tensor> },
    MatMul { a: usize, b: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    Sum { x: usize },
    SumAxis { x: usize, axis: usize },
    SumSq { x: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Concat { xs: Vec<usize>, axis: usize },
    Narrow { x: usize, axis: usize, start: usize },
    BroadcastTo { x: usize },
    Softmax { x: usize },
    AvgPool { x: usize, k: usize },
    Upsample { x: usize, k: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad_leaf: bool,
}

struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Operation record for one forward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{}, {:?})", self.id, self.shape())
    }
}

/// Gradients of every `requires_grad` leaf, keyed by the leaf's identity.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(&v.id)
    }

    pub fn wrt(&self, v: Var<'_>) -> Result<&Tensor> {
        self.grads.get(&v.id).ok_or_else(|| Error::invalid(format!("no gradient recorded for leaf #{}", v.id)))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { inner: RefCell::new(Inner { nodes: Vec::with_capacity(256), consumed: false }) }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all nodes so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        let inner = self.inner.get_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push_node(Node { value, op: Op::Leaf, needs_grad: requires_grad, requires_grad_leaf: requires_grad })
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var { tape: self, id: inner.nodes.len() - 1 }
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        // Inputs that carry no gradient make the whole node a constant.
        let op = if needs_grad { op } else { Op::Leaf };
        self.push_node(Node { value, op, needs_grad, requires_grad_leaf: false })
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].needs_grad)
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var<'_>) -> Result<GradMap> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::ForeignVar);
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(Error::TapeConsumed);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if numel_of(&loss_shape) != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        inner.consumed = true;
        let nodes = &inner.nodes;

        let mut out = GradMap::default();
        for (id, node) in nodes.iter().enumerate() {
            if node.requires_grad_leaf {
                out.grads.insert(id, Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        if !nodes[loss.id].needs_grad {
            return Ok(out);
        }

        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.id + 1);
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if node.requires_grad_leaf {
                let shape = node.value.shape().to_vec();
                out.grads.insert(id, Tensor::from_parts(shape, g));
                continue;
            }
            backprop(nodes, id, g, &mut grads);
        }
        Ok(out)
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        for v in xs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::ForeignVar);
            }
        }
        let ids: Vec<usize> = xs.iter().map(|v| v.id).collect();
        let value = {
            let inner = self.inner.borrow();
            let base = inner.nodes[first.id].value.shape().to_vec();
            if axis >= base.len() {
                return Err(Error::OutOfRange { what: "concat axis", detail: format!("{axis} for shape {base:?}") });
            }
            let mut total = 0;
            for &i in &ids {
                let s = inner.nodes[i].value.shape();
                let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
                if !compatible {
                    return Err(Error::shape("concat", &base, s));
                }
                total += s[axis];
            }
            let outer: usize = base[..axis].iter().product();
            let inner_sz: usize = base[axis + 1..].iter().product();
            let mut shape = base.clone();
            shape[axis] = total;
            let mut data = Vec::with_capacity(numel_of(&shape));
            for o in 0..outer {
                for &i in &ids {
                    let t = &inner.nodes[i].value;
                    let chunk = t.shape()[axis] * inner_sz;
                    data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::from_parts(shape, data)
        };
        let needs = self.needs(&ids);
        Ok(self.push(value, Op::Concat { xs: ids, axis }, needs))
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for (i, o) in out.iter_mut().enumerate() {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        *o = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `in_shape` viewed inside the broadcast `out_shape`; broadcast
/// dimensions get stride 0.
fn broadcast_strides(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let base = strides_of(in_shape);
    (0..n)
        .map(|i| {
            if i + in_shape.len() < n {
                0
            } else {
                let j = i + in_shape.len() - n;
                if in_shape[j] == 1 && out_shape[i] != 1 {
                    0
                } else {
                    base[j]
                }
            }
        })
        .collect()
}

/// Visit every element of `out_shape` with the matching offsets into two
/// broadcast operands.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = out_shape.len();
    let total = numel_of(out_shape);
    if n == 0 {
        f(0, 0, 0);
        return;
    }
    let last = out_shape[n - 1];
    let (la, lb) = (sa[n - 1], sb[n - 1]);
    let mut idx = vec![0usize; n];
    let mut k = 0;
    while k < total {
        let mut oa = 0;
        let mut ob = 0;
        for d in 0..n - 1 {
            oa += idx[d] * sa[d];
            ob += idx[d] * sb[d];
        }
        for j in 0..last {
            f(k + j, oa + j * la, ob + j * lb);
        }
        k += last;
        for d in (0..n - 1).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn conv_out(extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = extent + 2 * pad;
    (padded >= k).then(|| (padded - k) / stride + 1)
}

/// Output positions `o` in `[lo, hi)` whose tap `o*stride + k - pad` lands inside `[0, extent)`.
#[inline]
fn valid_range(out: usize, extent: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride + k >= pad  and  o*stride + k - pad < extent
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi_excl = if extent + pad > k { ((extent + pad - k - 1) / stride + 1).min(out) } else { 0 };
    (lo.min(hi_excl), hi_excl)
}

/// Geometry of one 2-D convolution.
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize, ho: usize, wo: usize) -> Self {
        Self { n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k: ws[2], stride, pad, ho, wo }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Visit every (column-matrix index, input index) pair that lies inside
    /// the unpadded input.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let np = self.positions();
        let plane = self.ho * self.wo;
        for ci in 0..self.cin {
            for ky in 0..self.k {
                let (oy0, oy1) = valid_range(self.ho, self.h, ky, self.stride, self.pad);
                for kx in 0..self.k {
                    let (ox0, ox1) = valid_range(self.wo, self.w, kx, self.stride, self.pad);
                    let row = ((ci * self.k + ky) * self.k + kx) * np;
                    for b in 0..self.n {
                        let ibase = (b * self.cin + ci) * self.h * self.w;
                        let cbase = row + b * plane;
                        for oy in oy0..oy1 {
                            let iy = oy * self.stride + ky - self.pad;
                            let irow = ibase + iy * self.w;
                            let crow = cbase + oy * self.wo;
                            for ox in ox0..ox1 {
                                f(crow + ox, irow + ox * self.stride + kx - self.pad);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfold input patches into a `[Cin*K*K, N*Ho*Wo]` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.patch_len() * self.positions()];
        self.for_each_tap(|c, i| cols[c] = x[i]);
        cols
    }
}

fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (np, plane) = (g.positions(), g.ho * g.wo);
    let cols = g.im2col(x);
    let mut flat = vec![0.0; g.cout * np];
    gemm_acc(w, &cols, &mut flat, g.cout, g.patch_len(), np);
    // [Cout, N, P] -> [N, Cout, P]
    let mut out = vec![0.0; g.n * g.cout * plane];
    for co in 0..g.cout {
        let b0 = bias.map_or(0.0, |b| b[co]);
        for b in 0..g.n {
            let src = &flat[co * np + b * plane..co * np + (b + 1) * plane];
            let dst = &mut out[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b0;
            }
        }
    }
    out
}

fn conv2d_backward(grad: &[f64], x: &[f64], w: &[f64], g: &ConvGeom, gx: Option<&mut [f64]>, gw: Option<&mut [f64]>) {
    let (np, plane, kk) = (g.positions(), g.ho * g.wo, g.patch_len());
    // [N, Cout, P] -> [Cout, N, P]
    let mut gt = vec![0.0; g.cout * np];
    for b in 0..g.n {
        for co in 0..g.cout {
            gt[co * np + b * plane..co * np + (b + 1) * plane]
                .copy_from_slice(&grad[(b * g.cout + co) * plane..(b * g.cout + co + 1) * plane]);
        }
    }
    if let Some(gw) = gw {
        let cols = g.im2col(x);
        gemm_bt_acc(&gt, &cols, gw, g.cout, np, kk);
    }
    if let Some(gx) = gx {
        let mut gcols = vec![0.0; kk * np];
        gemm_at_acc(w, &gt, &mut gcols, g.cout, kk, np);
        g.for_each_tap(|c, i| gx[i] += gcols[c]);
    }
}

/// `c[m,n] += a[m,k] * b[k,n]` on row-major slices.
fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`.
fn gemm_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`.
fn gemm_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Shapes for a matmul: `(batch, m, k, n, shared_rhs)`.
fn matmul_dims(a: &[usize], b: &[usize]) -> Option<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return None;
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    if b.len() == 2 {
        if b[0] != k {
            return None;
        }
        let batch: usize = a[..a.len() - 2].iter().product();
        return Some((batch, m, k, b[1], true));
    }
    if a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] || b[b.len() - 2] != k {
        return None;
    }
    let batch = a[..a.len() - 2].iter().product();
    Some((batch, m, k, b[b.len() - 1], false))
}

fn permute_offsets(in_shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let total = numel_of(&out_shape);
    let n = out_shape.len();
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let off: usize = (0..n).map(|d| idx[d] * in_strides[perm[d]]).sum();
        offsets.push(off);
        for d in (0..n).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offsets
}

fn backprop(nodes: &[Node], id: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    let needs = |i: usize| nodes[i].needs_grad;
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let out_shape = node.value.shape();
            let (na, nb) = (needs(*a), needs(*b));
            if va.shape() == vb.shape() {
                let (ad, bd) = (va.data(), vb.data());
                if na {
                    let ga: Vec<f64> = match kind {
                        BinKind::Add | BinKind::Sub => g.clone(),
                        BinKind::Mul => g.iter().zip(bd).map(|(g, b)| g * b).collect(),
                        BinKind::Div => g.iter().zip(bd).map(|(g, b)| g / b).collect(),
                    };
                    acc(grads, *a, ga);
                }
                if nb {
                    let gb: Vec<f64> = match kind {
                        BinKind::Add => g,
                        BinKind::Sub => g.iter().map(|v| -v).collect(),
                        BinKind::Mul => g.iter().zip(ad).map(|(g, a)| g * a).collect(),
                        BinKind::Div => g.iter().zip(ad).zip(bd).map(|((g, a), b)| -g * a / (b * b)).collect(),
                    };
                    acc(grads, *b, gb);
                }
                return;
            }
            let sa = broadcast_strides(va.shape(), out_shape);
            let sb = broadcast_strides(vb.shape(), out_shape);
            let (ad, bd) = (va.data(), vb.data());
            let mut ga = na.then(|| vec![0.0; va.numel()]);
            let mut gb = nb.then(|| vec![0.0; vb.numel()]);
            for_each_broadcast(out_shape, &sa, &sb, |k, ia, ib| {
                let gv = g[k];
                let (x, y) = (ad[ia], bd[ib]);
                let (da, db) = match kind {
                    BinKind::Add => (gv, gv),
                    BinKind::Sub => (gv, -gv),
                    BinKind::Mul => (gv * y, gv * x),
                    BinKind::Div => (gv / y, -gv * x / (y * y)),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            if let Some(ga) = ga {
                acc(grads, *a, ga);
            }
            if let Some(gb) = gb {
                acc(grads, *b, gb);
            }
        }
        Op::Unary { kind, x } => {
            let xd = nodes[*x].value.data();
            let yd = node.value.data();
            let gx = g.iter().zip(xd.iter().zip(yd)).map(|(g, (&x, &y))| g * kind.deriv(x, y)).collect();
            acc(grads, *x, gx);
        }
        Op::Affine { x, scale } => {
            let gx = g.iter().map(|v| v * scale).collect();
            acc(grads, *x, gx);
        }
        Op::Clip { x, bounds } => {
            let xd = nodes[*x].value.data();
            let gx = g
                .iter()
                .enumerate()
                .map(|(i, gv)| {
                    let (lo, hi) = bounds.at(i);
                    if xd[i] >= lo && xd[i] <= hi {
                        *gv
                    } else {
                        0.0
                    }
                })
                .collect();
            acc(grads, *x, gx);
        }
        Op::LinearAlong { x, axis, mat } => {
            let xs = nodes[*x].value.shape();
            let (outer, din, inner) = split_axis(xs, *axis);
            let dout = mat.shape()[0];
            let m = mat.data();
            let mut gx = vec![0.0; numel_of(xs)];
            for o in 0..outer {
                for r in 0..dout {
                    let gbase = (o * dout + r) * inner;
                    let grow = &g[gbase..gbase + inner];
                    for c in 0..din {
                        let mv = m[r * din + c];
                        if mv == 0.0 {
                            continue;
                        }
                        let xbase = (o * din + c) * inner;
                        for (d, gv) in gx[xbase..xbase + inner].iter_mut().zip(grow) {
                            *d += mv * gv;
                        }
                    }
                }
            }
            acc(grads, *x, gx);
        }
        Op::MatMul { a, b } => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            let (batch, m, k, n, shared) = matmul_dims(va.shape(), vb.shape()).expect("checked at record time");
            if needs(*a) {
                let mut ga = vec![0.0; va.numel()];
                for bi in 0..batch {
                    let bo = if shared { 0 } else { bi * k * n };
                    gemm_bt_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &vb.data()[bo..bo + k * n],
                        &mut ga[bi * m * k..(bi + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                acc(grads, *a, ga);
            }
            if needs(*b) {
                let mut gb = vec![0.0; vb.numel()];
                for bi in 0..batch {
                    let bo = if shared { 0 } else { bi * k * n };
                    gemm_at_acc(
                        &va.data()[bi * m * k..(bi + 1) * m * k],
                        &g[bi * m * n..(bi + 1) * m * n],
                        &mut gb[bo..bo + k * n],
                        m,
                        k,
                        n,
                    );
                }
                acc(grads, *b, gb);
            }
        }
        Op::Conv2d { x, w, b, stride, pad } => {
            let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
            let os = node.value.shape();
            let mut gx = needs(*x).then(|| vec![0.0; vx.numel()]);
            let mut gw = needs(*w).then(|| vec![0.0; vw.numel()]);
            let geom = ConvGeom::new(vx.shape(), vw.shape(), *stride, *pad, os[2], os[3]);
            conv2d_backward(&g, vx.data(), vw.data(), &geom, gx.as_deref_mut(), gw.as_deref_mut());
            if let Some(gx) = gx {
                acc(grads, *x, gx);
            }
            if let Some(gw) = gw {
                acc(grads, *w, gw);
            }
            if let Some(b) = b.filter(|&b| needs(b)) {
                let (n, c, hw) = (os[0], os[1], os[2] * os[3]);
                let mut gb = vec![0.0; c];
                for bi in 0..n {
                    for (ci, gbv) in gb.iter_mut().enumerate() {
                        let base = (bi * c + ci) * hw;
                        *gbv += g[base..base + hw].iter().sum::<f64>();
                    }
                }
                acc(grads, b, gb);
            }
        }
        Op::Sum { x } => {
            let n = nodes[*x].value.numel();
            acc(grads, *x, vec![g[0]; n]);
        }
        Op::SumAxis { x, axis } => {
            let xs = nodes[*x].value.shape();
            let (outer, d, inner) = split_axis(xs, *axis);
            let mut gx = vec![0.0; numel_of(xs)];
            for o in 0..outer {
                for a in 0..d {
                    let base = (o * d + a) * inner;
                    gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            acc(grads, *x, gx);
        }
        Op::SumSq { x } => {
            let gx = nodes[*x].value.data().iter().map(|v| 2.0 * v * g[0]).collect();
            acc(grads, *x, gx);
        }
        Op::Reshape { x } => acc(grads, *x, g),
        Op::Permute { x, perm } => {
            let xs = nodes[*x].value.shape();
            let offsets = permute_offsets(xs, perm);
            let mut gx = vec![0.0; numel_of(xs)];
            for (k, off) in offsets.into_iter().enumerate() {
                gx[off] = g[k];
            }
            acc(grads, *x, gx);
        }
        Op::Concat { xs, axis } => {
            let out_shape = node.value.shape();
            let (outer, _, inner) = split_axis(out_shape, *axis);
            let total = out_shape[*axis];
            let mut start = 0;
            for &i in xs {
                let d = nodes[i].value.shape()[*axis];
                if needs(i) {
                    let mut gi = Vec::with_capacity(outer * d * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gi.extend_from_slice(&g[base..base + d * inner]);
                    }
                    acc(grads, i, gi);
                }
                start += d;
            }
        }
        Op::Narrow { x, axis, start } => {
            let xs = nodes[*x].value.shape();
            let (outer, d, inner) = split_axis(xs, *axis);
            let len = node.value.shape()[*axis];
            let mut gx = vec![0.0; numel_of(xs)];
            for o in 0..outer {
                let dst = (o * d + start) * inner;
                gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            acc(grads, *x, gx);
        }
        Op::BroadcastTo { x } => {
            let xs = nodes[*x].value.shape();
            let out_shape = node.value.shape();
            let sa = broadcast_strides(xs, out_shape);
            let zeros = vec![0; out_shape.len()];
            let mut gx = vec![0.0; numel_of(xs)];
            for_each_broadcast(out_shape, &sa, &zeros, |k, ia, _| gx[ia] += g[k]);
            acc(grads, *x, gx);
        }
        Op::Softmax { x } => {
            let y = node.value.data();
            let d = *node.value.shape().last().unwrap();
            let mut gx = vec![0.0; y.len()];
            for ((gr, yr), out) in g.chunks(d).zip(y.chunks(d)).zip(gx.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            acc(grads, *x, gx);
        }
        Op::AvgPool { x, k } => {
            let xs = nodes[*x].value.shape();
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (ho, wo) = (h / k, w / k);
            let scale = 1.0 / (k * k) as f64;
            let mut gx = vec![0.0; numel_of(xs)];
            for p in 0..planes {
                for y in 0..h {
                    for xx in 0..w {
                        gx[(p * h + y) * w + xx] = g[(p * ho + y / k) * wo + xx / k] * scale;
                    }
                }
            }
            acc(grads, *x, gx);
        }
        Op::Upsample { x, k } => {
            let xs = nodes[*x].value.shape();
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (ho, wo) = (h * k, w * k);
            let mut gx = vec![0.0; numel_of(xs)];
            for p in 0..planes {
                for y in 0..ho {
                    for xx in 0..wo {
                        gx[(p * h + y / k) * w + xx / k] += g[(p * ho + y) * wo + xx];
                    }
                }
            }
            acc(grads, *x, gx);
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    pub fn numel(&self) -> usize {
        self.with_value(|t| t.numel())
    }

    /// Value of a single-element variable.
    pub fn item(&self) -> f64 {
        self.with_value(|t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].needs_grad
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn unary_record(&self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.requires_grad();
        self.tape.push(value, op, needs)
    }

    fn binary(&self, other: &Var<'t>, kind: BinKind, name: &'static str) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let (va, vb) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            let f = |x: f64, y: f64| match kind {
                BinKind::Add => x + y,
                BinKind::Sub => x - y,
                BinKind::Mul => x * y,
                BinKind::Div => x / y,
            };
            if va.shape() == vb.shape() {
                let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(va.shape().to_vec(), data)
            } else {
                let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| Error::shape(name, va.shape(), vb.shape()))?;
                let sa = broadcast_strides(va.shape(), &out_shape);
                let sb = broadcast_strides(vb.shape(), &out_shape);
                let (ad, bd) = (va.data(), vb.data());
                let mut data = vec![0.0; numel_of(&out_shape)];
                for_each_broadcast(&out_shape, &sa, &sb, |k, ia, ib| data[k] = f(ad[ia], bd[ib]));
                Tensor::from_parts(out_shape, data)
            }
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::Binary { kind, a: self.id, b: other.id }, needs))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Add, "add")
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Sub, "sub")
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Mul, "mul")
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinKind::Div, "div")
    }

    /// `scale * self + offset`.
    pub fn affine(&self, scale: f64, offset: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| scale * v + offset));
        self.unary_record(value, Op::Affine { x: self.id, scale })
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.affine(1.0, c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.affine(-1.0, 0.0)
    }

    pub fn unary(&self, kind: Unary) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| kind.eval(v)));
        self.unary_record(value, Op::Unary { kind, x: self.id })
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Ln)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn powf(&self, p: f64) -> Var<'t> {
        self.unary(Unary::Powf(p))
    }

    pub fn silu(&self) -> Var<'t> {
        self.unary(Unary::Silu)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    /// Clamp into `[lo, hi]`. The subgradient is 1 on the closed interval and
    /// 0 strictly outside it.
    pub fn clip(&self, lo: f64, hi: f64) -> Var<'t> {
        let value = self.with_value(|t| t.map(|v| v.clamp(lo, hi)));
        self.unary_record(value, Op::Clip { x: self.id, bounds: Bounds::Scalar(lo, hi) })
    }

    /// Clamp each element between the matching elements of constant bounds.
    pub fn clip_between(&self, lo: &Tensor, hi: &Tensor) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            if t.shape() != lo.shape() || t.shape() != hi.shape() {
                return Err(Error::shape("clip_between", t.shape(), lo.shape()));
            }
            let data = t.data().iter().zip(lo.data().iter().zip(hi.data())).map(|(&v, (&l, &h))| v.max(l).min(h)).collect();
            Ok(Tensor::from_parts(t.shape().to_vec(), data))
        })?;
        Ok(self.unary_record(value, Op::Clip { x: self.id, bounds: Bounds::Tensor(Rc::new(lo.clone()), Rc::new(hi.clone())) }))
    }

    /// Apply a constant matrix `mat` (shape `[out, in]`) along `axis`.
    pub fn linear_along(&self, axis: usize, mat: Rc<Tensor>) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let xs = t.shape();
            if axis >= xs.len() || mat.ndim() != 2 || mat.shape()[1] != xs[axis] {
                return Err(Error::shape("linear_along", xs, mat.shape()));
            }
            let (outer, din, inner) = split_axis(xs, axis);
            let dout = mat.shape()[0];
            let m = mat.data();
            let x = t.data();
            let mut out = vec![0.0; outer * dout * inner];
            for o in 0..outer {
                for r in 0..dout {
                    let obase = (o * dout + r) * inner;
                    for c in 0..din {
                        let mv = m[r * din + c];
                        if mv == 0.0 {
                            continue;
                        }
                        let xbase = (o * din + c) * inner;
                        let (dst, src) = (&mut out[obase..obase + inner], &x[xbase..xbase + inner]);
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += mv * s;
                        }
                    }
                }
            }
            let mut shape = xs.to_vec();
            shape[axis] = dout;
            Ok(Tensor::from_parts(shape, out))
        })?;
        Ok(self.unary_record(value, Op::LinearAlong { x: self.id, axis, mat }))
    }

    /// Matrix product over the last two axes. The right operand is either a
    /// 2-D matrix shared across the batch or carries the same batch axes.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let (va, vb) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            let (batch, m, k, n, shared) =
                matmul_dims(va.shape(), vb.shape()).ok_or_else(|| Error::shape("matmul", va.shape(), vb.shape()))?;
            let mut out = vec![0.0; batch * m * n];
            if shared {
                gemm_acc(va.data(), vb.data(), &mut out, batch * m, k, n);
            } else {
                for bi in 0..batch {
                    gemm_acc(
                        &va.data()[bi * m * k..(bi + 1) * m * k],
                        &vb.data()[bi * k * n..(bi + 1) * k * n],
                        &mut out[bi * m * n..(bi + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
            let mut shape = va.shape().to_vec();
            let last = shape.len() - 1;
            shape[last] = n;
            Tensor::from_parts(shape, out)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul { a: self.id, b: other.id }, needs))
    }

    /// 2-D cross-correlation: input `[N, Cin, H, W]`, weight `[Cout, Cin, K, K]`,
    /// optional bias `[Cout]`, zero padding.
    pub fn conv2d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>, stride: usize, pad: usize) -> Result<Var<'t>> {
        self.same_tape(weight)?;
        if let Some(b) = bias {
            self.same_tape(b)?;
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let value = {
            let inner = self.tape.inner.borrow();
            let (vx, vw) = (&inner.nodes[self.id].value, &inner.nodes[weight.id].value);
            let (xs, ws) = (vx.shape(), vw.shape());
            if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
                return Err(Error::shape("conv2d", xs, ws));
            }
            let bias_data = match bias {
                Some(b) => {
                    let vb = &inner.nodes[b.id].value;
                    if vb.shape() != [ws[0]] {
                        return Err(Error::shape("conv2d bias", vb.shape(), &ws[..1]));
                    }
                    Some(vb.data())
                }
                None => None,
            };
            let (ho, wo) = match (conv_out(xs[2], ws[2], stride, pad), conv_out(xs[3], ws[3], stride, pad)) {
                (Some(h), Some(w)) => (h, w),
                _ => return Err(Error::shape("conv2d", xs, ws)),
            };
            let out = conv2d_forward(vx.data(), vw.data(), bias_data, &ConvGeom::new(xs, ws, stride, pad, ho, wo));
            Tensor::from_parts(vec![xs[0], ws[0], ho, wo], out)
        };
        let mut ids = vec![self.id, weight.id];
        if let Some(b) = bias {
            ids.push(b.id);
        }
        let needs = self.tape.needs(&ids);
        Ok(self.tape.push(value, Op::Conv2d { x: self.id, w: weight.id, b: bias.map(|b| b.id), stride, pad }, needs))
    }

    pub fn sum(&self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.sum()));
        self.unary_record(value, Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis; the axis is kept with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let xs = t.shape();
            if axis >= xs.len() {
                return Err(Error::OutOfRange { what: "sum_axis", detail: format!("axis {axis} for shape {xs:?}") });
            }
            let (outer, d, inner) = split_axis(xs, axis);
            let x = t.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for a in 0..d {
                    let base = (o * d + a) * inner;
                    for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(&x[base..base + inner]) {
                        *dst += s;
                    }
                }
            }
            let mut shape = xs.to_vec();
            shape[axis] = 1;
            Ok(Tensor::from_parts(shape, out))
        })?;
        Ok(self.unary_record(value, Op::SumAxis { x: self.id, axis }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let d = self.shape().get(axis).copied().unwrap_or(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / d))
    }

    /// Squared Euclidean norm of all elements.
    pub fn sum_sq(&self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.sum_sq()));
        self.unary_record(value, Op::SumSq { x: self.id })
    }

    /// Mean of squared elementwise differences, i.e. the squared distance
    /// normalized by element count.
    pub fn mse(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(Error::shape("mse", &a, &b));
        }
        let n = numel_of(&a) as f64;
        Ok(self.sub(other)?.sum_sq().scale(1.0 / n))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let value = self.with_value(|t| t.clone().reshape(shape))?;
        Ok(self.unary_record(value, Op::Reshape { x: self.id }))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let xs = t.shape();
            let mut seen = vec![false; xs.len()];
            if perm.len() != xs.len() || perm.iter().any(|&p| p >= xs.len() || std::mem::replace(&mut seen[p], true)) {
                return Err(Error::invalid(format!("bad permutation {perm:?} for shape {xs:?}")));
            }
            let offsets = permute_offsets(xs, perm);
            let data = offsets.into_iter().map(|o| t.data()[o]).collect();
            Ok(Tensor::from_parts(perm.iter().map(|&p| xs[p]).collect(), data))
        })?;
        Ok(self.unary_record(value, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let xs = t.shape();
            if axis >= xs.len() || len == 0 || start + len > xs[axis] {
                return Err(Error::OutOfRange {
                    what: "narrow",
                    detail: format!("axis {axis} range [{start}, {}) of {xs:?}", start + len),
                });
            }
            let (outer, d, inner) = split_axis(xs, axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * d + start) * inner;
                out.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = xs.to_vec();
            shape[axis] = len;
            Ok(Tensor::from_parts(shape, out))
        })?;
        Ok(self.unary_record(value, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let xs = t.shape();
            match broadcast_shape(xs, shape) {
                Some(s) if s == shape => {}
                _ => return Err(Error::shape("broadcast_to", xs, shape)),
            }
            let sa = broadcast_strides(xs, shape);
            let zeros = vec![0; shape.len()];
            let mut out = vec![0.0; numel_of(shape)];
            for_each_broadcast(shape, &sa, &zeros, |k, ia, _| out[k] = t.data()[ia]);
            Ok(Tensor::from_parts(shape.to_vec(), out))
        })?;
        Ok(self.unary_record(value, Op::BroadcastTo { x: self.id }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'t> {
        let value = self.with_value(|t| {
            let d = *t.shape().last().unwrap();
            let mut out = t.data().to_vec();
            for row in out.chunks_mut(d) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                for v in row.iter_mut() {
                    *v /= z;
                }
            }
            Tensor::from_parts(t.shape().to_vec(), out)
        });
        self.unary_record(value, Op::Softmax { x: self.id })
    }

    /// Non-overlapping `k x k` average pooling on `[N, C, H, W]`.
    pub fn avg_pool2d(&self, k: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let xs = t.shape();
            if xs.len() != 4 || k == 0 || xs[2] % k != 0 || xs[3] % k != 0 {
                return Err(Error::invalid(format!("avg_pool2d({k}) on shape {xs:?}")));
            }
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (ho, wo) = (h / k, w / k);
            let scale = 1.0 / (k * k) as f64;
            let mut out = vec![0.0; planes * ho * wo];
            for p in 0..planes {
                for y in 0..h {
                    for x in 0..w {
                        out[(p * ho + y / k) * wo + x / k] += t.data()[(p * h + y) * w + x] * scale;
                    }
                }
            }
            Ok(Tensor::from_parts(vec![xs[0], xs[1], ho, wo], out))
        })?;
        Ok(self.unary_record(value, Op::AvgPool { x: self.id, k }))
    }

    /// Nearest-neighbour upsampling by an integer factor on `[N, C, H, W]`.
    pub fn upsample_nearest(&self, k: usize) -> Result<Var<'t>> {
        let value = self.with_value(|t| -> Result<Tensor> {
            let xs = t.shape();
            if xs.len() != 4 || k == 0 {
                return Err(Error::invalid(format!("upsample_nearest({k}) on shape {xs:?}")));
            }
            let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
            let (ho, wo) = (h * k, w * k);
            let mut out = vec![0.0; planes * ho * wo];
            for p in 0..planes {
                for y in 0..ho {
                    for x in 0..wo {
                        out[(p * ho + y) * wo + x] = t.data()[(p * h + y / k) * w + x / k];
                    }
                }
            }
            Ok(Tensor::from_parts(vec![xs[0], xs[1], ho, wo], out))
        })?;
        Ok(self.unary_record(value, Op::Upsample { x: self.id, k }))
    }
}

/// Sinusoidal embedding of a (non-differentiated) timestep.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(vec![dim], |i| {
        let j = i % half.max(1);
        let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        if i < half {
            (t * freq).sin()
        } else {
            (t * freq).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.var(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = x.mul(&x).unwrap().sum();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn clip_subgradient_convention() {
        let tape = Tape::new();
        let x = tape.var(t(&[4], &[0.5, 1.5, 0.0, 1.0]));
        let loss = x.clip(0.0, 1.0).sum();
        let grads = tape.backward(loss).unwrap();
        // interior -> 1, outside -> 0, boundaries count as interior
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn sum_gives_all_ones() {
        let tape = Tape::new();
        let d = tape.var(Tensor::from_fn(vec![4, 4], |i| i as f64 * 0.3));
        let grads = tape.backward(d.sum()).unwrap();
        assert_eq!(grads.wrt(d).unwrap(), &Tensor::ones(vec![4, 4]));
    }

    #[test]
    fn zero_times_anything_gives_zero_gradient() {
        let tape = Tape::new();
        let d = tape.var(Tensor::from_fn(vec![4, 4], |i| i as f64 * 0.3 - 1.0));
        let loss = d.silu().square().sum().scale(0.0);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(d).unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_non_scalar_and_double_backward() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(vec![2]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let l = x.sum();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::ones(vec![3]));
        let c = tape.constant(Tensor::full(vec![3], 2.0));
        let grads = tape.backward(x.mul(&c).unwrap().sum()).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.var(Tensor::ones(vec![2, 3]));
        let b = tape.var(Tensor::ones(vec![4]));
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn broadcasting_add_reduces_gradient() {
        let tape = Tape::new();
        let a = tape.var(Tensor::ones(vec![2, 3, 4]));
        let b = tape.var(Tensor::ones(vec![3, 1]));
        let y = a.add(&b).unwrap();
        assert_eq!(y.shape(), vec![2, 3, 4]);
        let grads = tape.backward(y.sum()).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[8.0, 8.0, 8.0]);
    }

    #[test]
    fn matmul_values() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[5.0, 6.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[17.0, 39.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![1, 1, 4, 4], |i| i as f64));
        let mut w = Tensor::zeros(vec![1, 1, 3, 3]);
        w.set(&[0, 0, 1, 1], 1.0);
        let w = tape.constant(w);
        let y = x.conv2d(&w, None, 1, 1).unwrap();
        assert_eq!(y.value(), x.value());
        let y2 = x.conv2d(&w, None, 2, 1).unwrap();
        assert_eq!(y2.value().data(), &[0.0, 2.0, 8.0, 10.0]);
    }

    #[test]
    fn permute_round_trip() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![2, 3, 4], |i| i as f64));
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.value(), x.value());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(vec![3, 5], |i| (i as f64).sin() * 4.0));
        let y = x.softmax().value();
        for row in y.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
