//! Building blocks shared by every encoder variant.

mod params;

pub use params::{Bound, Init, ParamBuilder, ParamId, ParamSpec, ParamStore};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Array, Real, Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-12;

/// One forward pass: a tape, the parameters bound to it, the train/eval
/// flag and the dropout stream.
pub struct Graph<'t, F: Real> {
    pub tape: &'t Tape<F>,
    pub params: Bound<'t, F>,
    pub training: bool,
    rng: ChaCha8Rng,
}

impl<'t, F: Real> Graph<'t, F> {
    pub fn new(tape: &'t Tape<F>, store: &ParamStore<F>, training: bool, seed: u64) -> Self {
        Graph {
            tape,
            params: store.bind(tape),
            training,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&self, id: ParamId) -> Var<'t, F> {
        self.params[id]
    }

    pub fn input(&self, x: Array<F>) -> Var<'t, F> {
        self.tape.constant(x)
    }

    pub fn dropout(&mut self, x: &Var<'t, F>, rate: f64) -> Result<Var<'t, F>> {
        let training = self.training;
        dropout(x, rate, training, &mut self.rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl LinearParams {
    pub fn new(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize) -> Self {
        let init = Init::fan_in(c_in);
        LinearParams {
            weight: b.add(format!("{name}.weight"), &[c_in, c_out], init),
            bias: b.add(format!("{name}.bias"), &[c_out], init),
            c_in,
            c_out,
        }
    }

    pub fn forward<'t, F: Real>(&self, g: &Graph<'t, F>, x: &Var<'t, F>) -> Result<Var<'t, F>> {
        x.matmul(&g.p(self.weight))?.add_row(&g.p(self.bias))
    }

    pub fn num_params(&self) -> usize {
        self.c_in * self.c_out + self.c_out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(b: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        LayerNormParams {
            gamma: b.add(format!("{name}.gamma"), &[dim], Init::Ones),
            beta: b.add(format!("{name}.beta"), &[dim], Init::Zeros),
            dim,
            eps: LAYER_NORM_EPS,
        }
    }
}

pub fn layer_norm<'t, F: Real>(
    g: &Graph<'t, F>,
    x: &Var<'t, F>,
    p: &LayerNormParams,
) -> Result<Var<'t, F>> {
    let c = *x.shape().last().unwrap();
    if c != p.dim {
        return Err(Error::dim("layer_norm", &x.shape(), &[p.dim]));
    }
    x.layer_norm(&g.p(p.gamma), &g.p(p.beta), F::from_f64_lossy(p.eps))
}

/// Per-channel temporal convolution, "same" zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub channels: usize,
    pub kernel_size: usize,
}

impl DepthwiseConvParams {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        channels: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        check_odd(kernel_size)?;
        let init = Init::fan_in(kernel_size);
        Ok(DepthwiseConvParams {
            weight: b.add(format!("{name}.weight"), &[channels, kernel_size], init),
            bias: b.add(format!("{name}.bias"), &[channels], init),
            channels,
            kernel_size,
        })
    }

    pub fn num_params(&self) -> usize {
        self.channels * self.kernel_size + self.channels
    }
}

pub fn depthwise_conv1d<'t, F: Real>(
    g: &Graph<'t, F>,
    x: &Var<'t, F>,
    p: &DepthwiseConvParams,
) -> Result<Var<'t, F>> {
    x.depthwise_conv1d(&g.p(p.weight), &g.p(p.bias))
}

/// Convolution whose `groups` output channels each read a contiguous block
/// of `in_per_group` input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub groups: usize,
    pub in_per_group: usize,
    pub kernel_size: usize,
}

impl GroupedConvParams {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c_in: usize,
        groups: usize,
        kernel_size: usize,
    ) -> Result<Self> {
        check_odd(kernel_size)?;
        if groups == 0 || c_in % groups != 0 {
            return Err(Error::Config(format!(
                "{groups} groups do not divide {c_in} input channels"
            )));
        }
        let per = c_in / groups;
        let init = Init::fan_in(per * kernel_size);
        Ok(GroupedConvParams {
            weight: b.add(format!("{name}.weight"), &[groups, per, kernel_size], init),
            bias: b.add(format!("{name}.bias"), &[groups], init),
            groups,
            in_per_group: per,
            kernel_size,
        })
    }

    pub fn num_params(&self) -> usize {
        self.groups * self.in_per_group * self.kernel_size + self.groups
    }
}

pub fn grouped_conv1d<'t, F: Real>(
    g: &Graph<'t, F>,
    x: &Var<'t, F>,
    p: &GroupedConvParams,
) -> Result<Var<'t, F>> {
    x.grouped_conv1d(&g.p(p.weight), &g.p(p.bias))
}

fn check_odd(k: usize) -> Result<()> {
    if k % 2 == 0 {
        return Err(Error::Config(format!("kernel size must be odd, got {k}")));
    }
    Ok(())
}

/// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`. Identity
/// outside training.
pub fn dropout<'t, F: Real, R: Rng>(
    x: &Var<'t, F>,
    rate: f64,
    training: bool,
    rng: &mut R,
) -> Result<Var<'t, F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if !training || rate == 0.0 {
        return Ok(*x);
    }
    let scale = F::from_f64_lossy(1.0 / (1.0 - rate));
    let mask = (0..x.numel())
        .map(|_| {
            if rng.random::<f64>() < rate {
                F::zero()
            } else {
                scale
            }
        })
        .collect();
    x.mul_const(mask)
}

/// Absolute sinusoidal position table `[len, dim]`.
pub fn sinusoidal_positions<F: Real>(len: usize, dim: usize) -> Array<F> {
    let mut data = vec![F::zero(); len * dim];
    for t in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            data[t * dim + i] = F::from_f64_lossy(v);
        }
    }
    Array::new(&[len, dim], data).expect("positive extents")
}

/// Output length of the two-stage stride-2 front end, or `None` when the
/// input is too short.
pub fn subsampled_len(frames: usize) -> Option<usize> {
    if frames < 7 {
        return None;
    }
    Some(((frames - 1) / 2 - 1) / 2)
}

const SUBSAMPLE_KERNEL: usize = 3;
const SUBSAMPLE_STRIDE: usize = 2;

/// Two stride-2 3×3 convolutions over (time, feature) with ReLU, followed by
/// a linear map of the flattened (feature, channel) axis to `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsamplerParams {
    pub conv1_weight: ParamId,
    pub conv1_bias: ParamId,
    pub conv2_weight: ParamId,
    pub conv2_bias: ParamId,
    pub out: LinearParams,
    pub feat_dim: usize,
    pub d_model: usize,
}

impl SubsamplerParams {
    pub fn new(b: &mut ParamBuilder, name: &str, feat_dim: usize, d_model: usize) -> Result<Self> {
        let f2 = Self::reduced_features(feat_dim).ok_or_else(|| {
            Error::Config(format!(
                "feature dimension {feat_dim} too small to subsample"
            ))
        })?;
        let k2 = SUBSAMPLE_KERNEL * SUBSAMPLE_KERNEL;
        let init1 = Init::fan_in(k2);
        let init2 = Init::fan_in(k2 * d_model);
        Ok(SubsamplerParams {
            conv1_weight: b.add(format!("{name}.conv1.weight"), &[k2, d_model], init1),
            conv1_bias: b.add(format!("{name}.conv1.bias"), &[d_model], init1),
            conv2_weight: b.add(
                format!("{name}.conv2.weight"),
                &[k2 * d_model, d_model],
                init2,
            ),
            conv2_bias: b.add(format!("{name}.conv2.bias"), &[d_model], init2),
            out: LinearParams::new(b, &format!("{name}.out"), f2 * d_model, d_model),
            feat_dim,
            d_model,
        })
    }

    fn reduced_features(feat_dim: usize) -> Option<usize> {
        let f1 = (feat_dim.checked_sub(SUBSAMPLE_KERNEL)?) / SUBSAMPLE_STRIDE + 1;
        Some((f1.checked_sub(SUBSAMPLE_KERNEL)?) / SUBSAMPLE_STRIDE + 1)
    }
}

/// `[L, feat_dim]` features to `[T, d]` frames, `T = ⌊(⌊(L−1)/2⌋−1)/2⌋`.
pub fn subsample<'t, F: Real>(
    g: &Graph<'t, F>,
    x: &Var<'t, F>,
    p: &SubsamplerParams,
) -> Result<Var<'t, F>> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != p.feat_dim {
        return Err(Error::dim("subsample", &shape, &[0, p.feat_dim]));
    }
    let t_out = subsampled_len(shape[0]).ok_or_else(|| {
        Error::Input(format!(
            "{} frames is too short to subsample (need at least 7)",
            shape[0]
        ))
    })?;
    let img = x.reshape(&[shape[0], shape[1], 1])?;
    let h1 = img
        .conv2d(
            &g.p(p.conv1_weight),
            &g.p(p.conv1_bias),
            SUBSAMPLE_KERNEL,
            SUBSAMPLE_STRIDE,
        )?
        .relu();
    let h2 = h1
        .conv2d(
            &g.p(p.conv2_weight),
            &g.p(p.conv2_bias),
            SUBSAMPLE_KERNEL,
            SUBSAMPLE_STRIDE,
        )?
        .relu();
    let s = h2.shape();
    debug_assert_eq!(s[0], t_out);
    let flat = h2.reshape(&[s[0], s[1] * s[2]])?;
    p.out.forward(g, &flat)
}
