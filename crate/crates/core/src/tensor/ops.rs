use super::tape::{NodeId, Op};
use super::{gemm, numel, Array, MatRef, Real, Var};
use crate::error::{Error, Result};

/// Geometry of an unpadded 2-D convolution over a channels-last
/// `[height, width, c_in]` input with a square kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Option<Self> {
        if in_h < kernel || in_w < kernel || stride == 0 {
            return None;
        }
        Some(Conv2dGeometry {
            in_h,
            in_w,
            c_in,
            c_out,
            kernel,
            stride,
            out_h: (in_h - kernel) / stride + 1,
            out_w: (in_w - kernel) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    /// Patch matrix `[out_h·out_w, kernel·kernel·c_in]`, rows ordered by
    /// output position and columns by (ky, kx, channel).
    fn im2col<F: Real>(&self, x: &[F]) -> Vec<F> {
        let patch = self.patch_len();
        let row_len = self.kernel * self.c_in;
        let mut cols = vec![F::zero(); self.out_h * self.out_w * patch];
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let dst = &mut cols[(oy * self.out_w + ox) * patch..][..patch];
                for ky in 0..self.kernel {
                    let src = ((oy * self.stride + ky) * self.in_w + ox * self.stride) * self.c_in;
                    dst[ky * row_len..(ky + 1) * row_len].copy_from_slice(&x[src..src + row_len]);
                }
            }
        }
        cols
    }

    pub fn col2im<F: Real>(&self, cols: &[F], dx: &mut [F]) {
        let patch = self.patch_len();
        let row_len = self.kernel * self.c_in;
        for oy in 0..self.out_h {
            for ox in 0..self.out_w {
                let srcp = &cols[(oy * self.out_w + ox) * patch..][..patch];
                for ky in 0..self.kernel {
                    let dst = ((oy * self.stride + ky) * self.in_w + ox * self.stride) * self.c_in;
                    for (d, s) in dx[dst..dst + row_len]
                        .iter_mut()
                        .zip(&srcp[ky * row_len..(ky + 1) * row_len])
                    {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn same_tape<F: Real>(a: &Var<'_, F>, b: &Var<'_, F>) {
    assert!(
        std::ptr::eq(a.tape, b.tape),
        "operands recorded on different tapes"
    );
}

impl<'t, F: Real> Var<'t, F> {
    fn unary(&self, shape: Vec<usize>, value: Vec<F>, op: Op<F>) -> Var<'t, F> {
        self.tape.push(shape, value, op, &[self.id])
    }

    fn zip_same(
        &self,
        other: &Var<'t, F>,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Vec<usize>, Vec<F>)> {
        same_tape(self, other);
        let nodes = self.tape.nodes();
        let (a, b) = (&nodes[self.id], &nodes[other.id]);
        if a.shape != b.shape {
            return Err(Error::dim(name, &a.shape, &b.shape));
        }
        let out = a
            .value
            .iter()
            .zip(&b.value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        Ok((a.shape.clone(), out))
    }

    pub fn add(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, v) = self.zip_same(other, "add", |x, y| x + y)?;
        Ok(self
            .tape
            .push(shape, v, Op::Add(self.id, other.id), &[self.id, other.id]))
    }

    pub fn sub(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, v) = self.zip_same(other, "sub", |x, y| x - y)?;
        Ok(self
            .tape
            .push(shape, v, Op::Sub(self.id, other.id), &[self.id, other.id]))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        let (shape, v) = self.zip_same(other, "mul", |x, y| x * y)?;
        Ok(self
            .tape
            .push(shape, v, Op::Mul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn scale(&self, c: F) -> Var<'t, F> {
        let (shape, v) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|x| *x * c).collect())
        };
        self.unary(shape, v, Op::Scale(self.id, c))
    }

    /// Product with a constant array of identical shape (no gradient flows
    /// into the constant).
    pub fn mul_const(&self, mask: Vec<F>) -> Result<Var<'t, F>> {
        let (shape, v) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.value.len() != mask.len() {
                return Err(Error::dim("mul_const", &a.shape, &[mask.len()]));
            }
            (
                a.shape.clone(),
                a.value.iter().zip(&mask).map(|(x, m)| *x * *m).collect(),
            )
        };
        Ok(self.unary(shape, v, Op::MulConst(self.id, mask)))
    }

    /// Adds a `[C]` vector to every row of a `[.., C]` tensor.
    pub fn add_row(&self, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_tape(self, bias);
        let (shape, v) = {
            let nodes = self.tape.nodes();
            let (x, b) = (&nodes[self.id], &nodes[bias.id]);
            let c = *x.shape.last().unwrap();
            if b.shape != [c] {
                return Err(Error::dim("add_row", &x.shape, &b.shape));
            }
            let mut out = x.value.clone();
            for row in out.chunks_exact_mut(c) {
                for (o, bb) in row.iter_mut().zip(&b.value) {
                    *o += *bb;
                }
            }
            (x.shape.clone(), out)
        };
        Ok(self.tape.push(
            shape,
            v,
            Op::AddRow {
                x: self.id,
                bias: bias.id,
            },
            &[self.id, bias.id],
        ))
    }

    /// Multiplies row `r` of a `[R, C]` tensor by `s[r]`, where `s` is `[R, 1]`.
    pub fn scale_rows(&self, s: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_tape(self, s);
        let (shape, v) = {
            let nodes = self.tape.nodes();
            let (x, sv) = (&nodes[self.id], &nodes[s.id]);
            if x.shape.len() != 2 || sv.shape != [x.shape[0], 1] {
                return Err(Error::dim("scale_rows", &x.shape, &sv.shape));
            }
            let c = x.shape[1];
            let mut out = x.value.clone();
            for (row, f) in out.chunks_exact_mut(c).zip(&sv.value) {
                for o in row.iter_mut() {
                    *o *= *f;
                }
            }
            (x.shape.clone(), out)
        };
        Ok(self.tape.push(
            shape,
            v,
            Op::ScaleRows {
                x: self.id,
                s: s.id,
            },
            &[self.id, s.id],
        ))
    }

    /// Matrix product over the last two axes. Leading (batch) axes must be
    /// equal on both sides, or absent on one side, in which case that
    /// operand is shared across the batch.
    pub fn matmul(&self, other: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_tape(self, other);
        let (shape, v, op) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (sa, sb) = (&a.shape, &b.shape);
            if sa.len() < 2 || sb.len() < 2 {
                return Err(Error::dim("matmul", sa, sb));
            }
            let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
            let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
            let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
            if k != kb || (!ba.is_empty() && !bb.is_empty() && ba != bb) {
                return Err(Error::dim("matmul", sa, sb));
            }
            let batch_shape = if ba.is_empty() { bb } else { ba };
            let batch = numel(batch_shape);
            let (a_batched, b_batched) = (!ba.is_empty(), !bb.is_empty());
            let mut out = vec![F::zero(); batch * m * n];
            for i in 0..batch {
                let av = if a_batched {
                    &a.value[i * m * k..(i + 1) * m * k]
                } else {
                    &a.value[..]
                };
                let bv = if b_batched {
                    &b.value[i * k * n..(i + 1) * k * n]
                } else {
                    &b.value[..]
                };
                gemm(
                    MatRef::new(av, m, k),
                    MatRef::new(bv, k, n),
                    &mut out[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            let mut shape = batch_shape.to_vec();
            shape.extend([m, n]);
            (
                shape,
                out,
                Op::MatMul {
                    a: self.id,
                    b: other.id,
                    m,
                    k,
                    n,
                    batch,
                    a_batched,
                    b_batched,
                },
            )
        };
        Ok(self.tape.push(shape, v, op, &[self.id, other.id]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t, F>> {
        let (shape, v, op) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() < 2 {
                return Err(Error::dim("transpose", &a.shape, &[]));
            }
            let nd = a.shape.len();
            let (r, c) = (a.shape[nd - 2], a.shape[nd - 1]);
            let batch = numel(&a.shape[..nd - 2]);
            let mut out = vec![F::zero(); a.value.len()];
            for bi in 0..batch {
                let off = bi * r * c;
                for i in 0..r {
                    for j in 0..c {
                        out[off + j * r + i] = a.value[off + i * c + j];
                    }
                }
            }
            let mut shape = a.shape.clone();
            shape.swap(nd - 2, nd - 1);
            (
                shape,
                out,
                Op::Transpose {
                    a: self.id,
                    batch,
                    rows: r,
                    cols: c,
                },
            )
        };
        Ok(self.unary(shape, v, op))
    }

    /// `[A, B, C] -> [B, A, C]`.
    pub fn swap_axes01(&self) -> Result<Var<'t, F>> {
        let (shape, v, op) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 3 {
                return Err(Error::dim("swap_axes01", &a.shape, &[]));
            }
            let (d0, d1, inner) = (a.shape[0], a.shape[1], a.shape[2]);
            let mut out = vec![F::zero(); a.value.len()];
            for i in 0..d0 {
                for j in 0..d1 {
                    let src = (i * d1 + j) * inner;
                    let dst = (j * d0 + i) * inner;
                    out[dst..dst + inner].copy_from_slice(&a.value[src..src + inner]);
                }
            }
            (
                vec![d1, d0, inner],
                out,
                Op::SwapAxes01 {
                    a: self.id,
                    d0,
                    d1,
                    inner,
                },
            )
        };
        Ok(self.unary(shape, v, op))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, F>> {
        let v = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if numel(shape) != a.value.len() || shape.contains(&0) {
                return Err(Error::dim("reshape", &a.shape, shape));
            }
            a.value.clone()
        };
        Ok(self.unary(shape.to_vec(), v, Op::Reshape(self.id)))
    }

    /// Channels `[start, start + width)` of the last axis.
    pub fn slice_channels(&self, start: usize, width: usize) -> Result<Var<'t, F>> {
        let (shape, v, op) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let cols = *a.shape.last().unwrap();
            if width == 0 || start + width > cols {
                return Err(Error::Index {
                    op: "slice_channels",
                    index: start + width,
                    range: format!("1..={cols}"),
                });
            }
            let mut out = Vec::with_capacity(a.value.len() / cols * width);
            for row in a.value.chunks_exact(cols) {
                out.extend_from_slice(&row[start..start + width]);
            }
            let mut shape = a.shape.clone();
            *shape.last_mut().unwrap() = width;
            (
                shape,
                out,
                Op::Slice {
                    a: self.id,
                    cols,
                    start,
                    width,
                },
            )
        };
        Ok(self.unary(shape, v, op))
    }

    /// Splits the last axis at `boundary` into `[.., :boundary]` and
    /// `[.., boundary:]`.
    pub fn split_channels(&self, boundary: usize) -> Result<(Var<'t, F>, Var<'t, F>)> {
        let cols = *self.shape().last().unwrap();
        if boundary == 0 || boundary >= cols {
            return Err(Error::Index {
                op: "split_channels",
                index: boundary,
                range: format!("1..{cols}"),
            });
        }
        Ok((
            self.slice_channels(0, boundary)?,
            self.slice_channels(boundary, cols - boundary)?,
        ))
    }

    /// Concatenates along the last axis, in list order.
    pub fn concat_channels(parts: &[Var<'t, F>]) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_channels needs at least one part".into()))?;
        let tape = first.tape;
        let (shape, v, op) = {
            let nodes = tape.nodes();
            let lead = &nodes[first.id].shape[..nodes[first.id].shape.len() - 1];
            let rows = numel(lead);
            let mut widths = Vec::with_capacity(parts.len());
            for p in parts {
                same_tape(first, p);
                let s = &nodes[p.id].shape;
                if &s[..s.len() - 1] != lead {
                    return Err(Error::dim("concat_channels", &nodes[first.id].shape, s));
                }
                widths.push(*s.last().unwrap());
            }
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.id].value[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            let parts_meta: Vec<(NodeId, usize)> = parts.iter().map(|p| p.id).zip(widths).collect();
            (
                shape,
                out,
                Op::Concat {
                    parts: parts_meta,
                    total,
                },
            )
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        Ok(tape.push(shape, v, op, &ids))
    }

    /// Normalizes each row of the last axis to zero mean and unit variance,
    /// then applies `gamma`/`beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, F>, beta: &Var<'t, F>, eps: F) -> Result<Var<'t, F>> {
        same_tape(self, gamma);
        same_tape(self, beta);
        let (shape, v, xhat, rstd) = {
            let nodes = self.tape.nodes();
            let (x, gm, bt) = (&nodes[self.id], &nodes[gamma.id], &nodes[beta.id]);
            let c = *x.shape.last().unwrap();
            if gm.shape != [c] || bt.shape != [c] {
                return Err(Error::dim("layer_norm", &x.shape, &gm.shape));
            }
            let inv_c = F::one() / F::from_usize(c).unwrap();
            let rows = x.value.len() / c;
            let mut out = vec![F::zero(); x.value.len()];
            let mut xhat = vec![F::zero(); x.value.len()];
            let mut rstd = vec![F::zero(); rows];
            for r in 0..rows {
                let row = &x.value[r * c..(r + 1) * c];
                let mean = row.iter().copied().sum::<F>() * inv_c;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_c;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for i in 0..c {
                    let h = (row[i] - mean) * rs;
                    xhat[r * c + i] = h;
                    out[r * c + i] = h * gm.value[i] + bt.value[i];
                }
            }
            (x.shape.clone(), out, xhat, rstd)
        };
        Ok(self.tape.push(
            shape,
            v,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
            &[self.id, gamma.id, beta.id],
        ))
    }

    fn map(&self, f: impl Fn(F) -> F, op: Op<F>) -> Var<'t, F> {
        let (shape, v) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            (a.shape.clone(), a.value.iter().map(|x| f(*x)).collect())
        };
        self.unary(shape, v, op)
    }

    /// Exact GELU, `x·Φ(x)` with Φ from the error function.
    pub fn gelu(&self) -> Var<'t, F> {
        let half = F::from_f64_lossy(0.5);
        let inv_sqrt2 = F::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2);
        self.map(
            move |x| half * x * (F::one() + (x * inv_sqrt2).erf()),
            Op::Gelu(self.id),
        )
    }

    pub fn relu(&self) -> Var<'t, F> {
        self.map(
            |x| if x > F::zero() { x } else { F::zero() },
            Op::Relu(self.id),
        )
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        self.map(
            |x| {
                if x >= F::zero() {
                    F::one() / (F::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (F::one() + e)
                }
            },
            Op::Sigmoid(self.id),
        )
    }

    /// `x·σ(x)`.
    pub fn swish(&self) -> Result<Var<'t, F>> {
        self.mul(&self.sigmoid())
    }

    fn rowwise(&self, f: impl Fn(&[F], &mut [F])) -> (Vec<usize>, Vec<F>) {
        let nodes = self.tape.nodes();
        let a = &nodes[self.id];
        let c = *a.shape.last().unwrap();
        let mut out = vec![F::zero(); a.value.len()];
        for (src, dst) in a.value.chunks_exact(c).zip(out.chunks_exact_mut(c)) {
            f(src, dst);
        }
        (a.shape.clone(), out)
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&self) -> Var<'t, F> {
        let (shape, v) = self.rowwise(|src, dst| {
            let mx = src.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = (*s - mx).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d = *d / total;
            }
        });
        self.unary(shape, v, Op::Softmax(self.id))
    }

    pub fn log_softmax(&self) -> Var<'t, F> {
        let (shape, v) = self.rowwise(|src, dst| {
            let mx = src.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + src.iter().map(|s| (*s - mx).exp()).sum::<F>().ln();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s - lse;
            }
        });
        self.unary(shape, v, Op::LogSoftmax(self.id))
    }

    /// Per-channel 1-D convolution over time with symmetric zero padding.
    /// `self` is `[T, C]`, `weight` is `[C, k]` with odd `k`, `bias` is `[C]`.
    pub fn depthwise_conv1d(&self, weight: &Var<'t, F>, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_tape(self, weight);
        same_tape(self, bias);
        let (shape, v, k) = {
            let nodes = self.tape.nodes();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            if x.shape.len() != 2 || w.shape.len() != 2 || w.shape[0] != x.shape[1] {
                return Err(Error::dim("depthwise_conv1d", &x.shape, &w.shape));
            }
            if b.shape != [x.shape[1]] {
                return Err(Error::dim("depthwise_conv1d", &x.shape, &b.shape));
            }
            let (t_len, c, k) = (x.shape[0], x.shape[1], w.shape[1]);
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size must be odd, got {k}")));
            }
            let pad = (k - 1) / 2;
            // tap-major copy so the inner loop runs over contiguous channels
            let mut taps = vec![F::zero(); k * c];
            for ch in 0..c {
                for j in 0..k {
                    taps[j * c + ch] = w.value[ch * k + j];
                }
            }
            let mut out = vec![F::zero(); t_len * c];
            for t in 0..t_len {
                let orow = &mut out[t * c..(t + 1) * c];
                orow.copy_from_slice(&b.value);
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                        continue;
                    };
                    let xrow = &x.value[src * c..(src + 1) * c];
                    let trow = &taps[j * c..(j + 1) * c];
                    for ch in 0..c {
                        orow[ch] += trow[ch] * xrow[ch];
                    }
                }
            }
            (vec![t_len, c], out, k)
        };
        Ok(self.tape.push(
            shape,
            v,
            Op::DepthwiseConv {
                x: self.id,
                w: weight.id,
                b: bias.id,
                k,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Grouped 1-D convolution with one output channel per group. `self` is
    /// `[T, C_in]`, `weight` is `[G, C_in/G, k]`, `bias` is `[G]`; group `g`
    /// reads the contiguous input channels `[g·C_in/G, (g+1)·C_in/G)`.
    pub fn grouped_conv1d(&self, weight: &Var<'t, F>, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
        same_tape(self, weight);
        same_tape(self, bias);
        let (shape, v, k, groups) = {
            let nodes = self.tape.nodes();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            if x.shape.len() != 2 || w.shape.len() != 3 {
                return Err(Error::dim("grouped_conv1d", &x.shape, &w.shape));
            }
            let (t_len, c_in) = (x.shape[0], x.shape[1]);
            let (groups, per, k) = (w.shape[0], w.shape[1], w.shape[2]);
            if groups * per != c_in {
                return Err(Error::Config(format!(
                    "grouped conv with {groups} groups of {per} channels cannot consume {c_in} input channels"
                )));
            }
            if b.shape != [groups] {
                return Err(Error::dim("grouped_conv1d", &w.shape, &b.shape));
            }
            if k % 2 == 0 {
                return Err(Error::Config(format!("kernel size must be odd, got {k}")));
            }
            let pad = (k - 1) / 2;
            let mut out = vec![F::zero(); t_len * groups];
            for t in 0..t_len {
                let orow = &mut out[t * groups..(t + 1) * groups];
                orow.copy_from_slice(&b.value);
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(pad).filter(|&s| s < t_len) else {
                        continue;
                    };
                    let xrow = &x.value[src * c_in..(src + 1) * c_in];
                    for (gi, o) in orow.iter_mut().enumerate() {
                        let mut accum = F::zero();
                        for m in 0..per {
                            accum += w.value[(gi * per + m) * k + j] * xrow[gi * per + m];
                        }
                        *o += accum;
                    }
                }
            }
            (vec![t_len, groups], out, k, groups)
        };
        Ok(self.tape.push(
            shape,
            v,
            Op::GroupedConv {
                x: self.id,
                w: weight.id,
                b: bias.id,
                k,
                groups,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    /// Unpadded strided 2-D convolution on a channels-last `[H, W, C_in]`
    /// input. `weight` is `[kernel·kernel·C_in, C_out]` with rows ordered by
    /// (ky, kx, c_in); output is `[H_out, W_out, C_out]`.
    pub fn conv2d(
        &self,
        weight: &Var<'t, F>,
        bias: &Var<'t, F>,
        kernel: usize,
        stride: usize,
    ) -> Result<Var<'t, F>> {
        same_tape(self, weight);
        same_tape(self, bias);
        let (shape, v, geom, cols) = {
            let nodes = self.tape.nodes();
            let (x, w, b) = (&nodes[self.id], &nodes[weight.id], &nodes[bias.id]);
            if x.shape.len() != 3 || w.shape.len() != 2 {
                return Err(Error::dim("conv2d", &x.shape, &w.shape));
            }
            let geom = Conv2dGeometry::new(
                x.shape[0], x.shape[1], x.shape[2], w.shape[1], kernel, stride,
            )
            .ok_or_else(|| {
                Error::Input(format!(
                    "conv2d input {:?} smaller than kernel {kernel}",
                    x.shape
                ))
            })?;
            if w.shape[0] != geom.patch_len() || b.shape != [geom.c_out] {
                return Err(Error::dim("conv2d", &x.shape, &w.shape));
            }
            let cols = geom.im2col(&x.value);
            let out_pos = geom.out_h * geom.out_w;
            let mut out = vec![F::zero(); out_pos * geom.c_out];
            gemm(
                MatRef::new(&cols, out_pos, geom.patch_len()),
                MatRef::new(&w.value, geom.patch_len(), geom.c_out),
                &mut out,
                false,
            );
            for row in out.chunks_exact_mut(geom.c_out) {
                for (o, bb) in row.iter_mut().zip(&b.value) {
                    *o += *bb;
                }
            }
            (vec![geom.out_h, geom.out_w, geom.c_out], out, geom, cols)
        };
        Ok(self.tape.push(
            shape,
            v,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.id,
                geom,
                cols,
            },
            &[self.id, weight.id, bias.id],
        ))
    }

    pub fn sum(&self) -> Var<'t, F> {
        let s = self.data().iter().copied().sum::<F>();
        self.unary(vec![1], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, F> {
        let (s, n) = {
            let d = self.data();
            (d.iter().copied().sum::<F>(), d.len())
        };
        self.unary(
            vec![1],
            vec![s / F::from_usize(n).unwrap()],
            Op::Mean(self.id),
        )
    }

    /// Records a scalar `value` whose gradient with respect to `self` is
    /// `grad` (already computed by the caller).
    pub(crate) fn precomputed_scalar(&self, value: F, grad: Vec<F>) -> Var<'t, F> {
        debug_assert_eq!(grad.len(), self.numel());
        self.unary(
            vec![1],
            vec![value],
            Op::Precomputed {
                input: self.id,
                grad,
            },
        )
    }
}

impl<'t, F: Real> Var<'t, F> {
    /// Shorthand for a constant with the same shape as `self`.
    pub fn constant_like(&self, data: Vec<F>) -> Result<Var<'t, F>> {
        let shape = self.shape();
        Ok(self.tape.constant(Array::new(&shape, data)?))
    }
}
