use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use super::ops::Conv2dGeometry;
use super::{gemm, numel, Array, MatRef, Real};
use crate::error::{Error, Result};

pub(crate) type NodeId = usize;

/// Recorded operation together with whatever its backward rule needs.
pub(crate) enum Op<F> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    MulConst(NodeId, Vec<F>),
    AddRow {
        x: NodeId,
        bias: NodeId,
    },
    ScaleRows {
        x: NodeId,
        s: NodeId,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        batch: usize,
        a_batched: bool,
        b_batched: bool,
    },
    Transpose {
        a: NodeId,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    SwapAxes01 {
        a: NodeId,
        d0: usize,
        d1: usize,
        inner: usize,
    },
    Reshape(NodeId),
    Slice {
        a: NodeId,
        cols: usize,
        start: usize,
        width: usize,
    },
    Concat {
        parts: Vec<(NodeId, usize)>,
        total: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    DepthwiseConv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
    },
    GroupedConv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        k: usize,
        groups: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: Conv2dGeometry,
        cols: Vec<F>,
    },
    Sum(NodeId),
    Mean(NodeId),
    /// Scalar whose gradient with respect to `input` was computed in the
    /// forward pass (used by the CTC loss).
    Precomputed {
        input: NodeId,
        grad: Vec<F>,
    },
}

pub(crate) struct Node<F> {
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
    pub grad: Option<Vec<F>>,
}

/// Append-only record of a forward computation.
///
/// A tape belongs to one thread at a time; independent passes (for example
/// one per utterance in a batch) each use their own tape.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    backward_done: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) id: NodeId,
}

impl<F: Real> fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            backward_done: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Array<F>, requires_grad: bool) -> Var<'_, F> {
        let shape = value.shape().to_vec();
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                shape,
                value: value.into_data(),
                op: Op::Leaf,
                requires_grad,
                grad: None,
            });
            nodes.len() - 1
        };
        Var { tape: self, id }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Array<F>) -> Var<'_, F> {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Array<F>) -> Var<'_, F> {
        self.leaf(value, false)
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<F>,
        op: Op<F>,
        parents: &[NodeId],
    ) -> Var<'_, F> {
        debug_assert_eq!(numel(&shape), value.len());
        let id = {
            let mut nodes = self.nodes.borrow_mut();
            let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
            nodes.push(Node {
                shape,
                value,
                op,
                requires_grad,
                grad: None,
            });
            nodes.len() - 1
        };
        Var { tape: self, id }
    }

    pub(crate) fn nodes(&self) -> Ref<'_, Vec<Node<F>>> {
        self.nodes.borrow()
    }

    /// Clears all accumulated gradients so that `backward` may run again.
    pub fn reset_grads(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
        self.backward_done.set(false);
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are accumulated in reverse tape order, so repeated runs are
    /// bitwise identical.
    pub fn backward(&self, loss: Var<'_, F>) -> Result<()> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to a different tape".into()));
        }
        if self.backward_done.get() {
            return Err(Error::State(
                "backward already ran on this tape; call reset_grads first".into(),
            ));
        }
        let loss_shape = loss.shape();
        if numel(&loss_shape) != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }

        let computed = {
            let nodes = self.nodes.borrow();
            let n = loss.id + 1;
            let mut pending: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
            let mut done: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
            if nodes[loss.id].requires_grad {
                pending[loss.id] = Some(vec![F::one()]);
            }
            for id in (0..n).rev() {
                let Some(g) = pending[id].take() else {
                    continue;
                };
                propagate(&nodes, id, &g, &mut pending);
                done[id] = Some(g);
            }
            done
        };

        let mut nodes = self.nodes.borrow_mut();
        for (node, grad) in nodes.iter_mut().zip(computed) {
            if node.requires_grad {
                node.grad = grad;
            }
        }
        self.backward_done.set(true);
        Ok(())
    }
}

/// Zero-initialized (on first touch) accumulator for `id`, or `None` when
/// that node does not need a gradient.
fn slot<'g, F: Real>(
    nodes: &[Node<F>],
    pending: &'g mut [Option<Vec<F>>],
    id: NodeId,
) -> Option<&'g mut Vec<F>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(pending[id].get_or_insert_with(|| vec![F::zero(); len]))
}

fn acc<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn propagate<F: Real>(nodes: &[Node<F>], id: NodeId, g: &[F], pending: &mut [Option<Vec<F>>]) {
    let node = &nodes[id];
    let val = |i: NodeId| nodes[i].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                acc(ga, g);
            }
            if let Some(gb) = slot(nodes, pending, *b) {
                acc(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                acc(ga, g);
            }
            if let Some(gb) = slot(nodes, pending, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= *s;
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *d += *s * *y;
                }
            }
            if let Some(gb) = slot(nodes, pending, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *d += *s * *x;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += *s * *c;
                }
            }
        }
        Op::MulConst(a, mask) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                for ((d, s), m) in ga.iter_mut().zip(g).zip(mask) {
                    *d += *s * *m;
                }
            }
        }
        Op::AddRow { x, bias } => {
            if let Some(gx) = slot(nodes, pending, *x) {
                acc(gx, g);
            }
            if let Some(gb) = slot(nodes, pending, *bias) {
                let c = gb.len();
                for row in g.chunks_exact(c) {
                    acc(gb, row);
                }
            }
        }
        Op::ScaleRows { x, s } => {
            let xv = val(*x);
            let sv = val(*s);
            let c = xv.len() / sv.len();
            if let Some(gx) = slot(nodes, pending, *x) {
                for (r, (drow, grow)) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).enumerate() {
                    for (d, s) in drow.iter_mut().zip(grow) {
                        *d += *s * sv[r];
                    }
                }
            }
            if let Some(gs) = slot(nodes, pending, *s) {
                for (r, (xrow, grow)) in xv.chunks_exact(c).zip(g.chunks_exact(c)).enumerate() {
                    let mut dot = F::zero();
                    for (xi, gi) in xrow.iter().zip(grow) {
                        dot += *xi * *gi;
                    }
                    gs[r] += dot;
                }
            }
        }
        Op::MatMul {
            a,
            b,
            m,
            k,
            n,
            batch,
            a_batched,
            b_batched,
        } => {
            let (m, k, n) = (*m, *k, *n);
            let av = val(*a);
            let bv = val(*b);
            let a_at = |i: usize| {
                if *a_batched {
                    &av[i * m * k..(i + 1) * m * k]
                } else {
                    av
                }
            };
            let b_at = |i: usize| {
                if *b_batched {
                    &bv[i * k * n..(i + 1) * k * n]
                } else {
                    bv
                }
            };
            if let Some(ga) = slot(nodes, pending, *a) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let dst = if *a_batched {
                        &mut ga[i * m * k..(i + 1) * m * k]
                    } else {
                        &mut ga[..]
                    };
                    gemm(
                        MatRef::new(gi, m, n),
                        MatRef::new(b_at(i), k, n).t(),
                        dst,
                        true,
                    );
                }
            }
            if let Some(gb) = slot(nodes, pending, *b) {
                for i in 0..*batch {
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let dst = if *b_batched {
                        &mut gb[i * k * n..(i + 1) * k * n]
                    } else {
                        &mut gb[..]
                    };
                    gemm(
                        MatRef::new(a_at(i), m, k).t(),
                        MatRef::new(gi, m, n),
                        dst,
                        true,
                    );
                }
            }
        }
        Op::Transpose {
            a,
            batch,
            rows,
            cols,
        } => {
            if let Some(ga) = slot(nodes, pending, *a) {
                let (r, c) = (*rows, *cols);
                for bi in 0..*batch {
                    let off = bi * r * c;
                    for i in 0..r {
                        for j in 0..c {
                            ga[off + i * c + j] += g[off + j * r + i];
                        }
                    }
                }
            }
        }
        Op::SwapAxes01 { a, d0, d1, inner } => {
            if let Some(ga) = slot(nodes, pending, *a) {
                let inner = *inner;
                for i in 0..*d0 {
                    for j in 0..*d1 {
                        let src = (j * d0 + i) * inner;
                        let dst = (i * d1 + j) * inner;
                        acc(&mut ga[dst..dst + inner], &g[src..src + inner]);
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                acc(ga, g);
            }
        }
        Op::Slice {
            a,
            cols,
            start,
            width,
        } => {
            if let Some(ga) = slot(nodes, pending, *a) {
                for (drow, grow) in ga.chunks_exact_mut(*cols).zip(g.chunks_exact(*width)) {
                    acc(&mut drow[*start..*start + *width], grow);
                }
            }
        }
        Op::Concat { parts, total } => {
            let mut start = 0;
            for &(p, width) in parts {
                if let Some(gp) = slot(nodes, pending, p) {
                    for (drow, grow) in gp.chunks_exact_mut(width).zip(g.chunks_exact(*total)) {
                        acc(drow, &grow[start..start + width]);
                    }
                }
                start += width;
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let c = gv.len();
            if let Some(gg) = slot(nodes, pending, *gamma) {
                for (grow, hrow) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ((d, gi), h) in gg.iter_mut().zip(grow).zip(hrow) {
                        *d += *gi * *h;
                    }
                }
            }
            if let Some(gb) = slot(nodes, pending, *beta) {
                for grow in g.chunks_exact(c) {
                    acc(gb, grow);
                }
            }
            if let Some(gx) = slot(nodes, pending, *x) {
                let inv_c = F::one() / F::from_usize(c).unwrap();
                let mut dxhat = vec![F::zero(); c];
                for (r, ((drow, grow), hrow)) in gx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xhat.chunks_exact(c))
                    .enumerate()
                {
                    let mut mean_d = F::zero();
                    let mut mean_dh = F::zero();
                    for i in 0..c {
                        dxhat[i] = grow[i] * gv[i];
                        mean_d += dxhat[i];
                        mean_dh += dxhat[i] * hrow[i];
                    }
                    mean_d *= inv_c;
                    mean_dh *= inv_c;
                    for i in 0..c {
                        drow[i] += rstd[r] * (dxhat[i] - mean_d - hrow[i] * mean_dh);
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
                let inv_sqrt_2pi = F::from_f64_lossy(
                    0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2,
                );
                let half = F::from_f64_lossy(0.5);
                for ((d, s), x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    let cdf = half * (F::one() + (*x * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * *x * *x).exp();
                    *d += *s * (cdf + *x * pdf);
                }
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                for ((d, s), x) in ga.iter_mut().zip(g).zip(val(*a)) {
                    if *x > F::zero() {
                        *d += *s;
                    }
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *d += *s * *y * (F::one() - *y);
                }
            }
        }
        Op::Softmax(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                let c = *node.shape.last().unwrap();
                for ((drow, grow), yrow) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(node.value.chunks_exact(c))
                {
                    let dot: F = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
                    for i in 0..c {
                        drow[i] += yrow[i] * (grow[i] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                let c = *node.shape.last().unwrap();
                for ((drow, grow), yrow) in ga
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(node.value.chunks_exact(c))
                {
                    let total: F = grow.iter().copied().sum();
                    for i in 0..c {
                        drow[i] += grow[i] - yrow[i].exp() * total;
                    }
                }
            }
        }
        Op::DepthwiseConv { x, w, b, k } => {
            let k = *k;
            let xv = val(*x);
            let wv = val(*w);
            let c = wv.len() / k;
            let t_len = xv.len() / c;
            let pad = (k - 1) / 2;
            if let Some(gb) = slot(nodes, pending, *b) {
                for grow in g.chunks_exact(c) {
                    acc(gb, grow);
                }
            }
            if let Some(gw) = slot(nodes, pending, *w) {
                for t in 0..t_len {
                    let grow = &g[t * c..(t + 1) * c];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        let xrow = &xv[src * c..(src + 1) * c];
                        for ch in 0..c {
                            gw[ch * k + j] += grow[ch] * xrow[ch];
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, pending, *x) {
                for t in 0..t_len {
                    let grow = &g[t * c..(t + 1) * c];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        let drow = &mut gx[src * c..(src + 1) * c];
                        for ch in 0..c {
                            drow[ch] += grow[ch] * wv[ch * k + j];
                        }
                    }
                }
            }
        }
        Op::GroupedConv { x, w, b, k, groups } => {
            let (k, groups) = (*k, *groups);
            let xv = val(*x);
            let wv = val(*w);
            let c_in = *nodes[*x].shape.last().unwrap();
            let per = c_in / groups;
            let t_len = xv.len() / c_in;
            let pad = (k - 1) / 2;
            if let Some(gb) = slot(nodes, pending, *b) {
                for grow in g.chunks_exact(groups) {
                    acc(gb, grow);
                }
            }
            if let Some(gw) = slot(nodes, pending, *w) {
                for t in 0..t_len {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for gi in 0..groups {
                            let go = g[t * groups + gi];
                            for m in 0..per {
                                gw[(gi * per + m) * k + j] += go * xv[src * c_in + gi * per + m];
                            }
                        }
                    }
                }
            }
            if let Some(gx) = slot(nodes, pending, *x) {
                for t in 0..t_len {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                            continue;
                        };
                        for gi in 0..groups {
                            let go = g[t * groups + gi];
                            for m in 0..per {
                                gx[src * c_in + gi * per + m] += go * wv[(gi * per + m) * k + j];
                            }
                        }
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            b,
            geom,
            cols,
        } => {
            let patch = geom.patch_len();
            let out_pos = geom.out_h * geom.out_w;
            let c_out = geom.c_out;
            if let Some(gb) = slot(nodes, pending, *b) {
                for grow in g.chunks_exact(c_out) {
                    acc(gb, grow);
                }
            }
            if let Some(gw) = slot(nodes, pending, *w) {
                gemm(
                    MatRef::new(cols, out_pos, patch).t(),
                    MatRef::new(g, out_pos, c_out),
                    gw,
                    true,
                );
            }
            if nodes[*x].requires_grad {
                let mut dcols = vec![F::zero(); out_pos * patch];
                gemm(
                    MatRef::new(g, out_pos, c_out),
                    MatRef::new(val(*w), patch, c_out).t(),
                    &mut dcols,
                    false,
                );
                if let Some(gx) = slot(nodes, pending, *x) {
                    geom.col2im(&dcols, gx);
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean(a) => {
            if let Some(ga) = slot(nodes, pending, *a) {
                let s = g[0] / F::from_usize(ga.len()).unwrap();
                for d in ga.iter_mut() {
                    *d += s;
                }
            }
        }
        Op::Precomputed { input, grad } => {
            if let Some(gi) = slot(nodes, pending, *input) {
                for (d, s) in gi.iter_mut().zip(grad) {
                    *d += g[0] * *s;
                }
            }
        }
    }
}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Array<F> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Array {
            shape: n.shape.clone(),
            data: n.value.clone(),
        }
    }

    /// Borrowed view of the recorded value. Must be dropped before the next
    /// operation is recorded on the same tape.
    pub fn data(&self) -> Ref<'t, [F]> {
        Ref::map(self.tape.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> F {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` when the node
    /// does not require a gradient or was unreachable from the loss.
    pub fn grad(&self) -> Option<Array<F>> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad.as_ref().map(|g| Array {
            shape: n.shape.clone(),
            data: g.clone(),
        })
    }
}
