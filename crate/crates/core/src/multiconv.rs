//! Multi-kernel convolutional spatial gating.
//!
//! The gated unit splits its `d_inter`-wide input into two halves of width
//! `d' = d_inter / 2`. The right half is layer-normalized and run through one
//! convolution per kernel size; the kernel outputs are merged by a
//! [`FusionKind`] and multiplied element-wise into the untouched left half.
//!
//! * `Sum` and `Weighted` use depthwise convolutions over all `d'` channels.
//!   `Weighted` mixes them per frame with a softmax over a `d' -> P`
//!   projection of the normalized half.
//! * `Concat` and `Depth` give each kernel `d'/P` output channels. Each
//!   kernel is a grouped convolution with `d'/P` groups of `P` contiguous
//!   input channels, so it still reads all `d'` inputs. `Depth` adds a
//!   trailing depthwise convolution (kernel size `max(K)`) over the
//!   concatenation.
//!
//! With a single kernel and `Sum` fusion the unit is exactly the
//! single-kernel gating unit ([`csgu_forward`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    depthwise_conv1d, grouped_conv1d, layer_norm, DepthwiseConvParams, Graph, GroupedConvParams,
    LayerNormParams, LinearParams, ParamBuilder,
};
use crate::tensor::{Array, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Sum,
    Weighted,
    Concat,
    Depth,
}

impl FusionKind {
    pub const ALL: [FusionKind; 4] = [
        FusionKind::Sum,
        FusionKind::Weighted,
        FusionKind::Concat,
        FusionKind::Depth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Sum => "sum",
            FusionKind::Weighted => "weighted",
            FusionKind::Concat => "concat",
            FusionKind::Depth => "depth",
        }
    }

    pub fn splits_channels(self) -> bool {
        matches!(self, FusionKind::Concat | FusionKind::Depth)
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionKind::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion {s:?}")))
    }
}

impl std::fmt::Display for FusionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Checks a kernel set: nonempty, odd, strictly increasing.
pub fn validate_kernels(kernels: &[usize]) -> Result<()> {
    if kernels.is_empty() {
        return Err(Error::Config("kernel set is empty".into()));
    }
    if let Some(k) = kernels.iter().find(|k| **k % 2 == 0) {
        return Err(Error::Config(format!("kernel sizes must be odd, got {k}")));
    }
    if kernels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "kernel sizes must be strictly increasing, got {kernels:?}"
        )));
    }
    Ok(())
}

/// Per-kernel convolutions, by fusion family.
#[derive(Clone, Debug, PartialEq)]
pub enum KernelConvs {
    Depthwise(Vec<DepthwiseConvParams>),
    Grouped(Vec<GroupedConvParams>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct McsguParams {
    pub d_prime: usize,
    pub kernels: Vec<usize>,
    pub fusion: FusionKind,
    pub gate_norm: LayerNormParams,
    pub convs: KernelConvs,
    pub weighted_ffn: Option<LinearParams>,
    pub final_depthwise: Option<DepthwiseConvParams>,
}

impl McsguParams {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        d_inter: usize,
        kernels: &[usize],
        fusion: FusionKind,
    ) -> Result<Self> {
        validate_kernels(kernels)?;
        if d_inter == 0 || d_inter % 2 != 0 {
            return Err(Error::Config(format!(
                "d_inter must be even, got {d_inter}"
            )));
        }
        let d_prime = d_inter / 2;
        let p = kernels.len();
        if fusion.splits_channels() && d_prime % p != 0 {
            return Err(Error::Config(format!(
                "{fusion} fusion needs {p} kernels to divide d' = {d_prime}"
            )));
        }
        let gate_norm = LayerNormParams::new(b, &format!("{name}.gate_norm"), d_prime);
        let convs = if fusion.splits_channels() {
            KernelConvs::Grouped(
                kernels
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        GroupedConvParams::new(
                            b,
                            &format!("{name}.convs.{i}"),
                            d_prime,
                            d_prime / p,
                            k,
                        )
                    })
                    .collect::<Result<_>>()?,
            )
        } else {
            KernelConvs::Depthwise(
                kernels
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| {
                        DepthwiseConvParams::new(b, &format!("{name}.convs.{i}"), d_prime, k)
                    })
                    .collect::<Result<_>>()?,
            )
        };
        let weighted_ffn = (fusion == FusionKind::Weighted)
            .then(|| LinearParams::new(b, &format!("{name}.weighted_ffn"), d_prime, p));
        let final_depthwise = if fusion == FusionKind::Depth {
            Some(DepthwiseConvParams::new(
                b,
                &format!("{name}.final_depthwise"),
                d_prime,
                final_kernel_size(kernels),
            )?)
        } else {
            None
        };
        Ok(McsguParams {
            d_prime,
            kernels: kernels.to_vec(),
            fusion,
            gate_norm,
            convs,
            weighted_ffn,
            final_depthwise,
        })
    }

    pub fn num_kernels(&self) -> usize {
        self.kernels.len()
    }
}

/// Kernel size of the trailing depthwise convolution in `Depth` fusion.
pub fn final_kernel_size(kernels: &[usize]) -> usize {
    kernels.iter().copied().max().unwrap_or(1)
}

/// Closed-form count of the fusion-specific parameters of one gated unit
/// (per-kernel convolutions, weighting projection, trailing convolution;
/// the gate norm is excluded).
pub fn fusion_param_formula(d_prime: usize, kernels: &[usize], fusion: FusionKind) -> usize {
    let p = kernels.len();
    let ksum: usize = kernels.iter().sum();
    let sum = kernels.iter().map(|k| d_prime * k + d_prime).sum::<usize>();
    let concat = d_prime * ksum + d_prime;
    match fusion {
        FusionKind::Sum => sum,
        FusionKind::Weighted => sum + d_prime * p + p,
        FusionKind::Concat => concat,
        FusionKind::Depth => concat + d_prime * final_kernel_size(kernels) + d_prime,
    }
}

pub fn fusion_sum<'t, F: Real>(vs: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let (first, rest) = vs
        .split_first()
        .ok_or_else(|| Error::Contract("fusion needs at least one kernel output".into()))?;
    rest.iter().try_fold(*first, |acc, v| acc.add(v))
}

/// Per-frame softmax mixture of the kernel outputs. Returns the fused
/// tensor and the `[T, P]` mixing weights.
pub fn fusion_weighted<'t, F: Real>(
    g: &Graph<'t, F>,
    vs: &[Var<'t, F>],
    z_r: &Var<'t, F>,
    ffn: &LinearParams,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    if vs.is_empty() {
        return Err(Error::Contract(
            "fusion needs at least one kernel output".into(),
        ));
    }
    if ffn.c_out != vs.len() {
        return Err(Error::Config(format!(
            "weighting projection has {} outputs for {} kernels",
            ffn.c_out,
            vs.len()
        )));
    }
    let alpha = ffn.forward(g, z_r)?.softmax();
    let mut fused: Option<Var<'t, F>> = None;
    for (i, v) in vs.iter().enumerate() {
        let term = v.scale_rows(&alpha.slice_channels(i, 1)?)?;
        fused = Some(match fused {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok((fused.expect("nonempty"), alpha))
}

pub fn fusion_concat<'t, F: Real>(vs: &[Var<'t, F>]) -> Result<Var<'t, F>> {
    let first = vs
        .first()
        .ok_or_else(|| Error::Contract("fusion needs at least one kernel output".into()))?;
    let s0 = first.shape();
    for v in vs {
        if v.shape() != s0 {
            return Err(Error::dim("fusion_concat", &s0, &v.shape()));
        }
    }
    Var::concat_channels(vs)
}

pub fn fusion_depth<'t, F: Real>(
    g: &Graph<'t, F>,
    vs: &[Var<'t, F>],
    last: &DepthwiseConvParams,
) -> Result<Var<'t, F>> {
    depthwise_conv1d(g, &fusion_concat(vs)?, last)
}

fn split_gate<'t, F: Real>(a_hat: &Var<'t, F>, d_prime: usize) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let shape = a_hat.shape();
    if shape.len() != 2 || shape[1] != 2 * d_prime {
        return Err(Error::dim("gated unit input", &shape, &[0, 2 * d_prime]));
    }
    a_hat.split_channels(d_prime)
}

/// Gated multi-kernel unit. `a_hat` is `[T, 2d']`; the result is `[T, d']`.
/// With `capture_alpha` (weighted fusion only) the per-frame kernel weights
/// are returned as a `[T, P]` array.
pub fn mcsgu_forward<'t, F: Real>(
    g: &Graph<'t, F>,
    a_hat: &Var<'t, F>,
    p: &McsguParams,
    capture_alpha: bool,
) -> Result<(Var<'t, F>, Option<Array<f64>>)> {
    if capture_alpha && p.fusion != FusionKind::Weighted {
        return Err(Error::Contract(format!(
            "kernel weights exist only for weighted fusion, not {}",
            p.fusion
        )));
    }
    let (z_l, z_r) = split_gate(a_hat, p.d_prime)?;
    let z_r = layer_norm(g, &z_r, &p.gate_norm)?;
    let vs: Vec<Var<'t, F>> = match &p.convs {
        KernelConvs::Depthwise(cs) => cs
            .iter()
            .map(|c| depthwise_conv1d(g, &z_r, c))
            .collect::<Result<_>>()?,
        KernelConvs::Grouped(cs) => cs
            .iter()
            .map(|c| grouped_conv1d(g, &z_r, c))
            .collect::<Result<_>>()?,
    };
    let mut alpha_out = None;
    let fused = match p.fusion {
        FusionKind::Sum => fusion_sum(&vs)?,
        FusionKind::Weighted => {
            let ffn = p
                .weighted_ffn
                .as_ref()
                .expect("weighted fusion has a projection");
            let (fused, alpha) = fusion_weighted(g, &vs, &z_r, ffn)?;
            if capture_alpha {
                let a = alpha.value();
                alpha_out = Some(Array::new(a.shape(), a.to_f64())?);
            }
            fused
        }
        FusionKind::Concat => fusion_concat(&vs)?,
        FusionKind::Depth => {
            let last = p
                .final_depthwise
                .as_ref()
                .expect("depth fusion has a final conv");
            fusion_depth(g, &vs, last)?
        }
    };
    Ok((z_l.mul(&fused)?, alpha_out))
}

/// Single-kernel gating unit: `Z_l ⊙ Conv_k(LayerNorm(Z_r))`.
pub fn csgu_forward<'t, F: Real>(
    g: &Graph<'t, F>,
    a_hat: &Var<'t, F>,
    kernel: &DepthwiseConvParams,
    norm: &LayerNormParams,
) -> Result<Var<'t, F>> {
    let (z_l, z_r) = split_gate(a_hat, kernel.channels)?;
    let z_r = layer_norm(g, &z_r, norm)?;
    z_l.mul(&depthwise_conv1d(g, &z_r, kernel)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsguParams {
    pub gate_norm: LayerNormParams,
    pub conv: DepthwiseConvParams,
}

impl CsguParams {
    pub fn new(b: &mut ParamBuilder, name: &str, d_inter: usize, kernel: usize) -> Result<Self> {
        if d_inter == 0 || d_inter % 2 != 0 {
            return Err(Error::Config(format!(
                "d_inter must be even, got {d_inter}"
            )));
        }
        let d_prime = d_inter / 2;
        Ok(CsguParams {
            gate_norm: LayerNormParams::new(b, &format!("{name}.gate_norm"), d_prime),
            conv: DepthwiseConvParams::new(b, &format!("{name}.conv"), d_prime, kernel)?,
        })
    }
}

/// Gating unit used inside a [`GatedConvBlockParams`].
#[derive(Clone, Debug, PartialEq)]
pub enum GateUnit {
    MultiKernel(McsguParams),
    SingleKernel(CsguParams),
}

/// `pre_norm → up_proj (d → d_inter) → GELU → gate → down_proj (d' → d) →
/// dropout`. The residual connection belongs to the encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct GatedConvBlockParams {
    pub pre_norm: LayerNormParams,
    pub up_proj: LinearParams,
    pub gate: GateUnit,
    pub down_proj: LinearParams,
    pub dropout: f64,
}

/// The gated multi-kernel convolution block.
pub type MultiConvBlockParams = GatedConvBlockParams;

impl GatedConvBlockParams {
    pub fn multi_kernel(
        b: &mut ParamBuilder,
        name: &str,
        d_model: usize,
        d_inter: usize,
        kernels: &[usize],
        fusion: FusionKind,
        dropout: f64,
    ) -> Result<Self> {
        let pre_norm = LayerNormParams::new(b, &format!("{name}.pre_norm"), d_model);
        let up_proj = LinearParams::new(b, &format!("{name}.up_proj"), d_model, d_inter);
        let gate = GateUnit::MultiKernel(McsguParams::new(
            b,
            &format!("{name}.mcsgu"),
            d_inter,
            kernels,
            fusion,
        )?);
        let down_proj = LinearParams::new(b, &format!("{name}.down_proj"), d_inter / 2, d_model);
        Ok(GatedConvBlockParams {
            pre_norm,
            up_proj,
            gate,
            down_proj,
            dropout,
        })
    }

    /// Same layout order as `multi_kernel` with one kernel and sum fusion,
    /// so both initialize identically from the same seed.
    pub fn single_kernel(
        b: &mut ParamBuilder,
        name: &str,
        d_model: usize,
        d_inter: usize,
        kernel: usize,
        dropout: f64,
    ) -> Result<Self> {
        let pre_norm = LayerNormParams::new(b, &format!("{name}.pre_norm"), d_model);
        let up_proj = LinearParams::new(b, &format!("{name}.up_proj"), d_model, d_inter);
        let gate = GateUnit::SingleKernel(CsguParams::new(
            b,
            &format!("{name}.csgu"),
            d_inter,
            kernel,
        )?);
        let down_proj = LinearParams::new(b, &format!("{name}.down_proj"), d_inter / 2, d_model);
        Ok(GatedConvBlockParams {
            pre_norm,
            up_proj,
            gate,
            down_proj,
            dropout,
        })
    }
}

pub fn multiconv_block_forward<'t, F: Real>(
    g: &mut Graph<'t, F>,
    x: &Var<'t, F>,
    p: &GatedConvBlockParams,
    capture_alpha: bool,
) -> Result<(Var<'t, F>, Option<Array<f64>>)> {
    let h = layer_norm(g, x, &p.pre_norm)?;
    let a_hat = p.up_proj.forward(g, &h)?.gelu();
    let (c_hat, alpha) = match &p.gate {
        GateUnit::MultiKernel(m) => mcsgu_forward(
            g,
            &a_hat,
            m,
            capture_alpha && m.fusion == FusionKind::Weighted,
        )?,
        GateUnit::SingleKernel(s) => (csgu_forward(g, &a_hat, &s.conv, &s.gate_norm)?, None),
    };
    let out = p.down_proj.forward(g, &c_hat)?;
    Ok((g.dropout(&out, p.dropout)?, alpha))
}

/// Baseline convolution module: `LayerNorm → pointwise (d → 2d) → GLU →
/// depthwise → LayerNorm → Swish → pointwise (d → d) → dropout`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConformerConvParams {
    pub pre_norm: LayerNormParams,
    pub pointwise_in: LinearParams,
    pub depthwise: DepthwiseConvParams,
    pub mid_norm: LayerNormParams,
    pub pointwise_out: LinearParams,
    pub dropout: f64,
}

impl ConformerConvParams {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        d_model: usize,
        kernel: usize,
        dropout: f64,
    ) -> Result<Self> {
        Ok(ConformerConvParams {
            pre_norm: LayerNormParams::new(b, &format!("{name}.pre_norm"), d_model),
            pointwise_in: LinearParams::new(
                b,
                &format!("{name}.pointwise_in"),
                d_model,
                2 * d_model,
            ),
            depthwise: DepthwiseConvParams::new(b, &format!("{name}.depthwise"), d_model, kernel)?,
            mid_norm: LayerNormParams::new(b, &format!("{name}.mid_norm"), d_model),
            pointwise_out: LinearParams::new(b, &format!("{name}.pointwise_out"), d_model, d_model),
            dropout,
        })
    }
}

pub fn conformer_conv_forward<'t, F: Real>(
    g: &mut Graph<'t, F>,
    x: &Var<'t, F>,
    p: &ConformerConvParams,
) -> Result<Var<'t, F>> {
    let d = p.pre_norm.dim;
    let h = layer_norm(g, x, &p.pre_norm)?;
    let (value, gate) = p.pointwise_in.forward(g, &h)?.split_channels(d)?;
    let glu = value.mul(&gate.sigmoid())?;
    let conv = depthwise_conv1d(g, &glu, &p.depthwise)?;
    let act = layer_norm(g, &conv, &p.mid_norm)?.swish()?;
    let out = p.pointwise_out.forward(g, &act)?;
    g.dropout(&out, p.dropout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;

    fn rand_input(t: usize, c: usize, salt: f64) -> Array<f64> {
        Array::new(
            &[t, c],
            (0..t * c)
                .map(|i| ((i as f64 + salt) * 0.7311).sin())
                .collect(),
        )
        .unwrap()
    }

    fn unit(
        d_inter: usize,
        kernels: &[usize],
        fusion: FusionKind,
        seed: u64,
    ) -> (McsguParams, ParamStore<f64>) {
        let mut b = ParamBuilder::new();
        let p = McsguParams::new(&mut b, "m", d_inter, kernels, fusion).unwrap();
        (p, b.init(seed))
    }

    #[test]
    fn fusion_kind_parses() {
        assert_eq!("depth".parse::<FusionKind>().unwrap(), FusionKind::Depth);
        assert!("avg".parse::<FusionKind>().is_err());
    }

    #[test]
    fn kernel_validation() {
        assert!(validate_kernels(&[7, 15, 23, 31]).is_ok());
        assert!(validate_kernels(&[8, 16]).is_err());
        assert!(validate_kernels(&[7, 7]).is_err());
        assert!(validate_kernels(&[]).is_err());
        let mut b = ParamBuilder::new();
        assert!(McsguParams::new(&mut b, "m", 12, &[3, 5, 7, 9], FusionKind::Concat).is_err());
        assert!(McsguParams::new(&mut b, "m", 12, &[3, 5, 7, 9], FusionKind::Sum).is_ok());
    }

    #[test]
    fn gate_identity_and_absorption() {
        let (p, store) = unit(8, &[3, 5], FusionKind::Sum, 2);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let mut ones_left = rand_input(5, 8, 0.0);
        let mut zeros_left = ones_left.clone();
        for t in 0..5 {
            for c in 0..4 {
                ones_left.data_mut()[t * 8 + c] = 1.0;
                zeros_left.data_mut()[t * 8 + c] = 0.0;
            }
        }
        let a = g.input(ones_left);
        let (out, _) = mcsgu_forward(&g, &a, &p, false).unwrap();
        let (_, z_r) = a.split_channels(4).unwrap();
        let z_r = layer_norm(&g, &z_r, &p.gate_norm).unwrap();
        let KernelConvs::Depthwise(cs) = &p.convs else {
            unreachable!()
        };
        let vs: Vec<_> = cs
            .iter()
            .map(|c| depthwise_conv1d(&g, &z_r, c).unwrap())
            .collect();
        let fused = fusion_sum(&vs).unwrap();
        assert_eq!(out.value(), fused.value());

        let (out0, _) = mcsgu_forward(&g, &g.input(zeros_left), &p, false).unwrap();
        assert!(out0.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gate_is_linear_in_left_half() {
        let (p, store) = unit(12, &[3, 7, 11], FusionKind::Depth, 6);
        let base = rand_input(6, 12, 1.0);
        let mut scaled = base.clone();
        for t in 0..6 {
            for c in 0..6 {
                scaled.data_mut()[t * 12 + c] *= 2.5;
            }
        }
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let (a, _) = mcsgu_forward(&g, &g.input(base), &p, false).unwrap();
        let (b, _) = mcsgu_forward(&g, &g.input(scaled), &p, false).unwrap();
        for (x, y) in a.value().data().iter().zip(b.value().data()) {
            assert!((x * 2.5 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_kernel_sum_reduces_to_csgu() {
        for k in [1, 3, 7] {
            let (p, store) = unit(10, &[k], FusionKind::Sum, 3);
            let KernelConvs::Depthwise(cs) = &p.convs else {
                unreachable!()
            };
            let tape = Tape::new();
            let g = Graph::new(&tape, &store, false, 0);
            let a = g.input(rand_input(9, 10, 2.0));
            let (m, _) = mcsgu_forward(&g, &a, &p, false).unwrap();
            let c = csgu_forward(&g, &a, &cs[0], &p.gate_norm).unwrap();
            assert_eq!(m.value(), c.value());
        }
    }

    #[test]
    fn fusion_sum_cases() {
        let tape = Tape::<f64>::new();
        let c = |v: f64| tape.constant(Array::full(&[2, 3], v));
        assert!(matches!(fusion_sum::<f64>(&[]), Err(Error::Contract(_))));
        assert_eq!(
            fusion_sum(&[c(1.5)]).unwrap().value(),
            Array::full(&[2, 3], 1.5)
        );
        let x = tape.constant(rand_input(2, 3, 0.0));
        let neg = x.scale(-1.0);
        assert!(fusion_sum(&[x, neg])
            .unwrap()
            .value()
            .data()
            .iter()
            .all(|v| *v == 0.0));
        assert_eq!(
            fusion_sum(&[c(1.0), c(2.0), c(3.0)]).unwrap().value(),
            Array::full(&[2, 3], 6.0)
        );
    }

    #[test]
    fn weighted_fusion_zero_projection_is_uniform() {
        let (p, mut store) = unit(8, &[3, 5, 7], FusionKind::Weighted, 4);
        let ffn = p.weighted_ffn.clone().unwrap();
        store.set(ffn.weight, Array::zeros(&[4, 3])).unwrap();
        store.set(ffn.bias, Array::zeros(&[3])).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let vs: Vec<_> = (0..3)
            .map(|i| g.input(rand_input(5, 4, i as f64 * 10.0)))
            .collect();
        let z_r = g.input(rand_input(5, 4, 99.0));
        let (fused, alpha) = fusion_weighted(&g, &vs, &z_r, &ffn).unwrap();
        assert!(alpha
            .value()
            .data()
            .iter()
            .all(|a| (a - 1.0 / 3.0).abs() < 1e-15));
        let sum = fusion_sum(&vs).unwrap().scale(1.0 / 3.0);
        assert!(fused.value().max_abs_diff(&sum.value()) < 1e-12);
    }

    #[test]
    fn weighted_fusion_saturates() {
        let (p, mut store) = unit(8, &[3, 5], FusionKind::Weighted, 4);
        let ffn = p.weighted_ffn.clone().unwrap();
        store.set(ffn.weight, Array::zeros(&[4, 2])).unwrap();
        store
            .set(ffn.bias, Array::from_f64(&[2], &[1000.0, -1000.0]).unwrap())
            .unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let vs: Vec<_> = (0..2)
            .map(|i| g.input(rand_input(5, 4, i as f64)))
            .collect();
        let (fused, alpha) =
            fusion_weighted(&g, &vs, &g.input(rand_input(5, 4, 3.0)), &ffn).unwrap();
        assert!(fused.value().max_abs_diff(&vs[0].value()) < 1e-9);
        for row in alpha.value().data().chunks(2) {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weighted_fusion_rejects_width_mismatch() {
        let mut b = ParamBuilder::new();
        let ffn = LinearParams::new(&mut b, "f", 4, 3);
        let store = b.init::<f64>(0);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let vs: Vec<_> = (0..2)
            .map(|i| g.input(rand_input(3, 4, i as f64)))
            .collect();
        let z = g.input(rand_input(3, 4, 5.0));
        assert!(matches!(
            fusion_weighted(&g, &vs, &z, &ffn),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn capture_alpha_requires_weighted() {
        let (p, store) = unit(8, &[3, 5], FusionKind::Sum, 1);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let a = g.input(rand_input(4, 8, 0.0));
        assert!(matches!(
            mcsgu_forward(&g, &a, &p, true),
            Err(Error::Contract(_))
        ));
        let odd = g.input(rand_input(4, 7, 0.0));
        assert!(matches!(
            mcsgu_forward(&g, &odd, &p, false),
            Err(Error::Dimension { .. })
        ));

        let (pw, sw) = unit(8, &[3, 5], FusionKind::Weighted, 1);
        let tape = Tape::new();
        let g = Graph::new(&tape, &sw, false, 0);
        let (_, alpha) = mcsgu_forward(&g, &g.input(rand_input(4, 8, 0.0)), &pw, true).unwrap();
        assert_eq!(alpha.unwrap().shape(), &[4, 2]);
    }

    #[test]
    fn concat_fusion_cases() {
        let tape = Tape::<f64>::new();
        let v1 = tape.constant(Array::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let v2 = tape.constant(Array::from_f64(&[1, 2], &[3.0, 4.0]).unwrap());
        assert_eq!(
            fusion_concat(&[v1, v2]).unwrap().value().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
        assert_eq!(fusion_concat(&[v1]).unwrap().value(), v1.value());
        let v3 = tape.constant(Array::zeros(&[1, 3]));
        assert!(matches!(
            fusion_concat(&[v1, v3]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn depth_fusion_with_delta_kernel_is_concat() {
        let (p, mut store) = unit(8, &[3, 5], FusionKind::Depth, 4);
        let last = p.final_depthwise.clone().unwrap();
        let k = last.kernel_size;
        let mut w = vec![0.0; 4 * k];
        for c in 0..4 {
            w[c * k + k / 2] = 1.0;
        }
        store
            .set(last.weight, Array::new(&[4, k], w).unwrap())
            .unwrap();
        store.set(last.bias, Array::zeros(&[4])).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let vs: Vec<_> = (0..2)
            .map(|i| g.input(rand_input(6, 2, i as f64)))
            .collect();
        assert_eq!(
            fusion_depth(&g, &vs, &last).unwrap().value(),
            fusion_concat(&vs).unwrap().value()
        );
    }

    #[test]
    fn depth_fusion_single_frame_is_pointwise() {
        let (p, store) = unit(8, &[3, 5], FusionKind::Depth, 8);
        let last = p.final_depthwise.clone().unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let vs: Vec<_> = (0..2)
            .map(|i| g.input(rand_input(1, 2, i as f64 + 0.5)))
            .collect();
        let out = fusion_depth(&g, &vs, &last).unwrap().value();
        let cat = fusion_concat(&vs).unwrap().value();
        let (w, b) = (store.get(last.weight), store.get(last.bias));
        let k = last.kernel_size;
        for c in 0..4 {
            let expected = w.data()[c * k + k / 2] * cat.data()[c] + b.data()[c];
            assert!((out.data()[c] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn concat_channel_provenance() {
        for &(fusion, kernels) in &[
            (FusionKind::Concat, &[3usize, 5][..]),
            (FusionKind::Concat, &[1, 3, 5, 7][..]),
        ] {
            let p_count = kernels.len();
            let (p, store) = unit(16, kernels, fusion, 12);
            let KernelConvs::Grouped(cs) = &p.convs else {
                unreachable!()
            };
            for zeroed in 0..p_count {
                let mut st = store.clone();
                st.set(
                    cs[zeroed].weight,
                    Array::zeros(st.get(cs[zeroed].weight).shape()),
                )
                .unwrap();
                st.set(
                    cs[zeroed].bias,
                    Array::zeros(st.get(cs[zeroed].bias).shape()),
                )
                .unwrap();
                let tape = Tape::new();
                let g = Graph::new(&tape, &st, false, 0);
                let z = g.input(rand_input(5, 8, 7.0));
                let vs: Vec<_> = cs
                    .iter()
                    .map(|c| grouped_conv1d(&g, &z, c).unwrap())
                    .collect();
                let fused = fusion_concat(&vs).unwrap().value();
                let width = 8 / p_count;
                for t in 0..5 {
                    for c in 0..8 {
                        let in_block = c / width == zeroed;
                        assert_eq!(
                            fused.at(t, c) == 0.0,
                            in_block,
                            "t={t} c={c} zeroed={zeroed}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn param_formula_matches_layout() {
        for fusion in FusionKind::ALL {
            for kernels in [&[3usize, 7][..], &[7, 15, 23, 31][..], &[5][..]] {
                let mut b = ParamBuilder::new();
                let p = McsguParams::new(&mut b, "m", 48, kernels, fusion).unwrap();
                let measured = b.num_scalars() - 2 * p.d_prime;
                assert_eq!(
                    measured,
                    fusion_param_formula(24, kernels, fusion),
                    "{fusion} {kernels:?}"
                );
            }
        }
    }

    #[test]
    fn conformer_conv_zero_weights_give_zero() {
        let mut b = ParamBuilder::new();
        let p = ConformerConvParams::new(&mut b, "c", 6, 5, 0.0).unwrap();
        let mut store = b.init::<f64>(1);
        for a in store.arrays_mut() {
            let shape = a.shape().to_vec();
            *a = Array::zeros(&shape);
        }
        let tape = Tape::new();
        let mut g = Graph::new(&tape, &store, false, 0);
        let x = g.input(rand_input(4, 6, 0.0));
        let y = conformer_conv_forward(&mut g, &x, &p).unwrap();
        assert_eq!(y.shape(), vec![4, 6]);
        assert!(y.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn block_shape_and_open_gate_linearity() {
        let mut b = ParamBuilder::new();
        let p =
            GatedConvBlockParams::multi_kernel(&mut b, "blk", 4, 24, &[3, 5], FusionKind::Sum, 0.0)
                .unwrap();
        let store = b.init::<f64>(3);
        let tape = Tape::new();
        let mut g = Graph::new(&tape, &store, false, 0);
        let x = g.input(rand_input(5, 4, 0.0));
        let (y, alpha) = multiconv_block_forward(&mut g, &x, &p, true).unwrap();
        assert_eq!(y.shape(), vec![5, 4]);
        assert!(alpha.is_none());
    }
}
