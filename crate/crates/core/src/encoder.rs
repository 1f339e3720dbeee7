//! Full encoder: convolutional subsampling, sinusoidal positions and a stack
//! of macaron-style layers (half FFN, self-attention, convolution block,
//! half FFN, final norm).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{mha_forward, AttentionMap, MhaParams};
use crate::error::{Error, Result};
use crate::multiconv::{
    conformer_conv_forward, multiconv_block_forward, validate_kernels, ConformerConvParams,
    FusionKind, GatedConvBlockParams,
};
use crate::nn::{
    layer_norm, sinusoidal_positions, subsample, subsampled_len, Graph, LayerNormParams,
    LinearParams, ParamBuilder, ParamSpec, SubsamplerParams,
};
use crate::tensor::{Array, Real, Var};

pub const FEATURE_DIM: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvBlockKind {
    MultiConv,
    Csgu,
    Conformer,
}

impl ConvBlockKind {
    pub const ALL: [ConvBlockKind; 3] = [
        ConvBlockKind::MultiConv,
        ConvBlockKind::Csgu,
        ConvBlockKind::Conformer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ConvBlockKind::MultiConv => "multiconv",
            ConvBlockKind::Csgu => "csgu",
            ConvBlockKind::Conformer => "conformer",
        }
    }
}

impl std::str::FromStr for ConvBlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConvBlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown conv block {s:?}")))
    }
}

impl std::fmt::Display for ConvBlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_feat_dim() -> usize {
    FEATURE_DIM
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_inter: usize,
    pub d_ffn: usize,
    pub kernels: Vec<usize>,
    pub fusion: FusionKind,
    pub conv_block: ConvBlockKind,
    pub dropout: f64,
    pub seed: u64,
    #[serde(default = "default_feat_dim")]
    pub feat_dim: usize,
}

impl EncoderConfig {
    /// Defaults: `d_inter = 6d`, `d_ffn = 4d`, `K = {7,15,23,31}`, weighted
    /// multi-kernel blocks, dropout 0.1.
    pub fn new(num_layers: usize, d_model: usize, heads: usize) -> Self {
        EncoderConfig {
            num_layers,
            d_model,
            heads,
            d_inter: 6 * d_model,
            d_ffn: 4 * d_model,
            kernels: vec![7, 15, 23, 31],
            fusion: FusionKind::Weighted,
            conv_block: ConvBlockKind::MultiConv,
            dropout: 0.1,
            seed: 0,
            feat_dim: FEATURE_DIM,
        }
    }

    pub fn d_prime(&self) -> usize {
        self.d_inter / 2
    }

    /// Kernel size used by the single-kernel baselines.
    pub fn baseline_kernel(&self) -> usize {
        self.kernels.iter().copied().max().unwrap_or(31)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 || self.d_model == 0 || self.d_ffn == 0 {
            return fail("layer count and widths must be positive".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            ));
        }
        if self.d_inter == 0 || self.d_inter % 2 != 0 {
            return fail(format!("d_inter must be even, got {}", self.d_inter));
        }
        validate_kernels(&self.kernels)?;
        if self.conv_block == ConvBlockKind::MultiConv
            && self.fusion.splits_channels()
            && self.d_prime() % self.kernels.len() != 0
        {
            return fail(format!(
                "{} fusion needs |K| = {} to divide d_inter/2 = {}",
                self.fusion,
                self.kernels.len(),
                self.d_prime()
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Position-wise `d → d_ffn → d` with GELU, preceded by its own norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedForwardParams {
    pub norm: LayerNormParams,
    pub hidden: LinearParams,
    pub output: LinearParams,
}

impl FeedForwardParams {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, d_ffn: usize) -> Self {
        FeedForwardParams {
            norm: LayerNormParams::new(b, &format!("{name}.norm"), d),
            hidden: LinearParams::new(b, &format!("{name}.hidden"), d, d_ffn),
            output: LinearParams::new(b, &format!("{name}.output"), d_ffn, d),
        }
    }

    pub fn forward<'t, F: Real>(
        &self,
        g: &mut Graph<'t, F>,
        x: &Var<'t, F>,
        dropout: f64,
    ) -> Result<Var<'t, F>> {
        let h = layer_norm(g, x, &self.norm)?;
        let h = self.hidden.forward(g, &h)?.gelu();
        let out = self.output.forward(g, &h)?;
        g.dropout(&out, dropout)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConvBlockParams {
    Gated(GatedConvBlockParams),
    Conformer(ConformerConvParams),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayerParams {
    pub ffn1: FeedForwardParams,
    pub mha_norm: LayerNormParams,
    pub mha: MhaParams,
    pub conv: ConvBlockParams,
    pub ffn2: FeedForwardParams,
    pub final_norm: LayerNormParams,
    pub dropout: f64,
}

impl EncoderLayerParams {
    pub fn new(b: &mut ParamBuilder, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let d = cfg.d_model;
        let ffn1 = FeedForwardParams::new(b, &format!("{name}.ffn1"), d, cfg.d_ffn);
        let mha_norm = LayerNormParams::new(b, &format!("{name}.mha.norm"), d);
        let mha = MhaParams::new(b, &format!("{name}.mha"), d, cfg.heads)?;
        let conv_name = format!("{name}.conv");
        let conv = match cfg.conv_block {
            ConvBlockKind::MultiConv => ConvBlockParams::Gated(GatedConvBlockParams::multi_kernel(
                b,
                &conv_name,
                d,
                cfg.d_inter,
                &cfg.kernels,
                cfg.fusion,
                cfg.dropout,
            )?),
            ConvBlockKind::Csgu => ConvBlockParams::Gated(GatedConvBlockParams::single_kernel(
                b,
                &conv_name,
                d,
                cfg.d_inter,
                cfg.baseline_kernel(),
                cfg.dropout,
            )?),
            ConvBlockKind::Conformer => ConvBlockParams::Conformer(ConformerConvParams::new(
                b,
                &conv_name,
                d,
                cfg.baseline_kernel(),
                cfg.dropout,
            )?),
        };
        let ffn2 = FeedForwardParams::new(b, &format!("{name}.ffn2"), d, cfg.d_ffn);
        let final_norm = LayerNormParams::new(b, &format!("{name}.final_norm"), d);
        Ok(EncoderLayerParams {
            ffn1,
            mha_norm,
            mha,
            conv,
            ffn2,
            final_norm,
            dropout: cfg.dropout,
        })
    }
}

/// Values captured during a forward pass for analysis.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Captures {
    pub attention: Vec<AttentionMap>,
    /// `(layer, [T, P] kernel weights)` for weighted-fusion layers.
    pub kernel_weights: Vec<(usize, Array<f64>)>,
}

impl Captures {
    fn extend(&mut self, other: Captures) {
        self.attention.extend(other.attention);
        self.kernel_weights.extend(other.kernel_weights);
    }
}

pub fn encoder_layer_forward<'t, F: Real>(
    g: &mut Graph<'t, F>,
    x: &Var<'t, F>,
    p: &EncoderLayerParams,
    layer: usize,
    capture: bool,
) -> Result<(Var<'t, F>, Captures)> {
    let half = F::from_f64_lossy(0.5);
    let mut caps = Captures::default();

    let x = x.add(&p.ffn1.forward(g, x, p.dropout)?.scale(half))?;

    let h = layer_norm(g, &x, &p.mha_norm)?;
    let (att, maps) = mha_forward(g, &h, &p.mha, capture)?;
    if let Some(maps) = maps {
        caps.attention = maps
            .into_iter()
            .map(|m| AttentionMap { layer, ..m })
            .collect();
    }
    let x = x.add(&g.dropout(&att, p.dropout)?)?;

    let conv = match &p.conv {
        ConvBlockParams::Gated(blk) => {
            let (out, alpha) = multiconv_block_forward(g, &x, blk, capture)?;
            if let Some(a) = alpha {
                caps.kernel_weights.push((layer, a));
            }
            out
        }
        ConvBlockParams::Conformer(c) => conformer_conv_forward(g, &x, c)?,
    };
    let x = x.add(&conv)?;

    let x = x.add(&p.ffn2.forward(g, &x, p.dropout)?.scale(half))?;
    Ok((layer_norm(g, &x, &p.final_norm)?, caps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub subsampler: SubsamplerParams,
    pub layers: Vec<EncoderLayerParams>,
}

impl EncoderParams {
    pub fn new(b: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let subsampler = SubsamplerParams::new(b, "subsampler", cfg.feat_dim, cfg.d_model)?;
        let layers = (0..cfg.num_layers)
            .map(|i| EncoderLayerParams::new(b, &format!("layers.{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(EncoderParams {
            config: cfg.clone(),
            subsampler,
            layers,
        })
    }
}

/// `[L, feat_dim]` features to contextual frames `[T, d]`.
pub fn encoder_forward<'t, F: Real>(
    g: &mut Graph<'t, F>,
    features: &Var<'t, F>,
    p: &EncoderParams,
    capture: bool,
) -> Result<(Var<'t, F>, Captures)> {
    let len = features.shape()[0];
    if subsampled_len(len).is_none() {
        return Err(Error::Input(format!(
            "utterance of {len} frames is too short (need at least 7)"
        )));
    }
    let h = subsample(g, features, &p.subsampler)?;
    let t_len = h.shape()[0];
    let pos = g.input(sinusoidal_positions(t_len, p.config.d_model));
    let mut x = h.add(&pos)?;
    let mut caps = Captures::default();
    for (i, layer) in p.layers.iter().enumerate() {
        let (y, c) = encoder_layer_forward(g, &x, layer, i, capture)?;
        caps.extend(c);
        x = y;
    }
    Ok((x, caps))
}

/// Scalar learnable counts broken down by block.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// Block name (e.g. `layers.3.conv`) to scalar count, sorted by name.
    pub blocks: BTreeMap<String, usize>,
    pub total: usize,
}

impl ParamCount {
    /// Sum over all blocks whose name contains `needle`.
    pub fn matching(&self, needle: &str) -> usize {
        self.blocks
            .iter()
            .filter(|(k, _)| k.contains(needle))
            .map(|(_, v)| *v)
            .sum()
    }
}

fn block_key(name: &str) -> String {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["layers", idx, block, ..] => format!("layers.{idx}.{block}"),
        [first, ..] => (*first).to_string(),
        [] => String::new(),
    }
}

/// Exact scalar count of a parameter layout, grouped by block.
pub fn param_count(specs: &[ParamSpec]) -> ParamCount {
    let mut out = ParamCount::default();
    for s in specs {
        *out.blocks.entry(block_key(&s.name)).or_default() += s.numel();
        out.total += s.numel();
    }
    out
}

/// Count of the fusion-specific tensors (per-kernel convolutions, weighting
/// projection, trailing depthwise) in layer `layer`.
pub fn fusion_params_in_layer(specs: &[ParamSpec], layer: usize) -> usize {
    let prefix = format!("layers.{layer}.conv.mcsgu.");
    specs
        .iter()
        .filter(|s| s.name.starts_with(&prefix) && !s.name[prefix.len()..].starts_with("gate_norm"))
        .map(ParamSpec::numel)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Init, ParamStore};
    use crate::tensor::Tape;

    fn toy(conv: ConvBlockKind, fusion: FusionKind) -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            d_model: 8,
            heads: 2,
            d_inter: 24,
            d_ffn: 16,
            kernels: vec![3, 5],
            fusion,
            conv_block: conv,
            dropout: 0.1,
            seed: 5,
            feat_dim: FEATURE_DIM,
        }
    }

    fn features(l: usize) -> Array<f64> {
        Array::new(
            &[l, 80],
            (0..l * 80)
                .map(|i| ((i * 31 % 97) as f64 / 97.0) - 0.5)
                .collect(),
        )
        .unwrap()
    }

    fn build(cfg: &EncoderConfig) -> (EncoderParams, ParamStore<f64>) {
        let mut b = ParamBuilder::new();
        let p = EncoderParams::new(&mut b, cfg).unwrap();
        (p, b.init(cfg.seed))
    }

    fn run(
        p: &EncoderParams,
        store: &ParamStore<f64>,
        x: Array<f64>,
        capture: bool,
    ) -> (Array<f64>, Captures) {
        let tape = Tape::new();
        let mut g = Graph::new(&tape, store, false, 0);
        let x = g.input(x);
        let (h, c) = encoder_forward(&mut g, &x, p, capture).unwrap();
        (h.value(), c)
    }

    #[test]
    fn output_shape_and_captures() {
        let cfg = toy(ConvBlockKind::MultiConv, FusionKind::Weighted);
        let (p, store) = build(&cfg);
        let (h, caps) = run(&p, &store, features(16), true);
        assert_eq!(h.shape(), &[3, 8]);
        assert_eq!(caps.attention.len(), 4);
        for m in &caps.attention {
            assert_eq!(m.weights.shape(), &[3, 3]);
            for row in m.weights.data().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(caps.kernel_weights.len(), 2);
        assert_eq!(caps.kernel_weights[1].0, 1);
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = toy(ConvBlockKind::MultiConv, FusionKind::Depth);
        let (p, store) = build(&cfg);
        assert_eq!(
            run(&p, &store, features(40), false).0,
            run(&p, &store, features(40), false).0
        );
    }

    #[test]
    fn rejects_short_input() {
        let cfg = toy(ConvBlockKind::Conformer, FusionKind::Sum);
        let (p, store) = build(&cfg);
        let tape = Tape::new();
        let mut g = Graph::new(&tape, &store, false, 0);
        let x = g.input(features(6));
        assert!(matches!(
            encoder_forward(&mut g, &x, &p, false),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn single_kernel_sum_matches_csgu_encoder() {
        let mut multi = toy(ConvBlockKind::MultiConv, FusionKind::Sum);
        multi.kernels = vec![5];
        let mut csgu = multi.clone();
        csgu.conv_block = ConvBlockKind::Csgu;
        let (pm, sm) = build(&multi);
        let (pc, sc) = build(&csgu);
        let a = run(&pm, &sm, features(30), false).0;
        let b = run(&pc, &sc, features(30), false).0;
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn zeroed_residual_branches_leave_final_norm() {
        for conv in ConvBlockKind::ALL {
            let cfg = toy(conv, FusionKind::Concat);
            let mut b = ParamBuilder::new();
            let layer = EncoderLayerParams::new(&mut b, "layer", &cfg).unwrap();
            let mut store = b.init::<f64>(2);
            let out_names = [
                ".ffn1.output.",
                ".mha.output.",
                ".down_proj.",
                ".pointwise_out.",
                ".ffn2.output.",
            ];
            let ids: Vec<_> = store
                .iter()
                .filter(|(_, n, _)| out_names.iter().any(|o| n.contains(o)))
                .map(|(id, _, _)| id)
                .collect();
            for id in ids {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Array::zeros(&shape)).unwrap();
            }
            let tape = Tape::new();
            let mut g = Graph::new(&tape, &store, false, 0);
            let x = g.input(Array::new(&[5, 8], features(5).data()[..40].to_vec()).unwrap());
            let (y, _) = encoder_layer_forward(&mut g, &x, &layer, 0, false).unwrap();
            let expected = layer_norm(&g, &x, &layer.final_norm).unwrap();
            assert!(y.value().max_abs_diff(&expected.value()) < 1e-12, "{conv}");
        }
    }

    #[test]
    fn param_count_basics() {
        let mut b = ParamBuilder::new();
        LinearParams::new(&mut b, "lin", 4, 3);
        assert_eq!(param_count(b.specs()).total, 15);
        let mut b = ParamBuilder::new();
        crate::nn::DepthwiseConvParams::new(&mut b, "dw", 6, 3).unwrap();
        assert_eq!(param_count(b.specs()).total, 24);
        let mut b = ParamBuilder::new();
        b.add("layers.0.conv.mcsgu.x", &[2, 2], Init::Zeros);
        b.add("layers.0.ffn1.hidden.weight", &[3], Init::Zeros);
        b.add("subsampler.conv1.weight", &[5], Init::Zeros);
        let pc = param_count(b.specs());
        assert_eq!(pc.blocks["layers.0.conv"], 4);
        assert_eq!(pc.blocks["subsampler"], 5);
        assert_eq!(pc.total, 12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy(ConvBlockKind::MultiConv, FusionKind::Concat);
        assert!(cfg.validate().is_ok());
        cfg.kernels = vec![3, 5, 7, 9, 11];
        assert!(cfg.validate().is_err());
        cfg.conv_block = ConvBlockKind::Conformer;
        assert!(cfg.validate().is_ok());
        cfg.heads = 3;
        assert!(cfg.validate().is_err());
    }
}
