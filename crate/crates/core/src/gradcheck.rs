//! Central finite-difference gradient checks and the randomized suite that
//! covers every differentiable op and module.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{mha_forward, MhaParams};
use crate::ctc::{ctc_loss_on_tape, CtcTarget};
use crate::encoder::{
    encoder_forward, encoder_layer_forward, ConvBlockKind, EncoderConfig, EncoderLayerParams,
    EncoderParams, FeedForwardParams,
};
use crate::error::Result;
use crate::multiconv::{
    conformer_conv_forward, csgu_forward, mcsgu_forward, multiconv_block_forward,
    ConformerConvParams, FusionKind, GatedConvBlockParams, McsguParams,
};
use crate::nn::{
    grouped_conv1d, layer_norm, subsample, DepthwiseConvParams, Graph, GroupedConvParams,
    LayerNormParams, LinearParams, ParamBuilder, ParamStore, SubsamplerParams,
};
use crate::tensor::{Array, Tape, Var};

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;
/// Tighter bound every individual op and module is expected to meet.
pub const OP_REL_TOLERANCE: f64 = 1e-5;
/// Differences at or below this are treated as exact agreement. Sits just
/// above the roundoff of a central difference on an O(10) loss at `FD_STEP`.
pub const ABS_FLOOR: f64 = 1e-9;

/// Relative error with an absolute floor.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

/// Builds a scalar loss from the given inputs on `tape` and returns it with
/// the leaves whose gradients are checked (one per input, same order).
pub type Probe =
    dyn for<'t> Fn(&'t Tape<f64>, &[Array<f64>]) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>)>;

pub struct GradCase {
    pub name: String,
    pub inputs: Vec<Array<f64>>,
    probe: Box<Probe>,
}

impl GradCase {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Array<f64>>,
        probe: impl for<'t> Fn(&'t Tape<f64>, &[Array<f64>]) -> Result<(Var<'t, f64>, Vec<Var<'t, f64>>)>
            + 'static,
    ) -> Self {
        GradCase {
            name: name.into(),
            inputs,
            probe: Box::new(probe),
        }
    }

    fn eval(&self, inputs: &[Array<f64>]) -> Result<f64> {
        let tape = Tape::new();
        Ok((self.probe)(&tape, inputs)?.0.item())
    }

    pub fn check(&self) -> Result<GradCheckOutcome> {
        let tape = Tape::new();
        let (loss, leaves) = (self.probe)(&tape, &self.inputs)?;
        tape.backward(loss)?;
        let analytic: Vec<Vec<f64>> = leaves
            .iter()
            .map(|v| {
                v.grad()
                    .map_or_else(|| vec![0.0; v.numel()], Array::into_data)
            })
            .collect();

        let mut inputs = self.inputs.clone();
        let mut max_rel = 0.0f64;
        let mut checked = 0;
        for (i, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                let orig = inputs[i].data()[j];
                inputs[i].data_mut()[j] = orig + FD_STEP;
                let plus = self.eval(&inputs)?;
                inputs[i].data_mut()[j] = orig - FD_STEP;
                let minus = self.eval(&inputs)?;
                inputs[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / (2.0 * FD_STEP);
                max_rel = max_rel.max(relative_error(a, numeric));
                checked += 1;
            }
        }
        Ok(GradCheckOutcome {
            name: self.name.clone(),
            max_rel_error: max_rel,
            checked,
            passed: max_rel < REL_TOLERANCE,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    /// Number of scalar inputs perturbed.
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckOutcome>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.cases
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }
}

/// Fixed pseudo-random projection so non-scalar outputs get a generic
/// upstream gradient.
fn project<'t>(y: &Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = (0..y.numel())
        .map(|i| ((i as f64 + 1.0) * 0.618_034).sin() + 0.3)
        .collect();
    Ok(y.mul_const(w)?.sum())
}

fn leaves<'t>(tape: &'t Tape<f64>, inputs: &[Array<f64>]) -> Vec<Var<'t, f64>> {
    inputs.iter().map(|a| tape.leaf(a.clone(), true)).collect()
}

/// Single-op case: every input becomes a trainable leaf and the output is
/// projected to a scalar.
fn op_case(
    name: String,
    inputs: Vec<Array<f64>>,
    f: impl for<'t> Fn(&[Var<'t, f64>]) -> Result<Var<'t, f64>> + 'static,
) -> GradCase {
    GradCase::new(name, inputs, move |tape, inputs| {
        let vs = leaves(tape, inputs);
        let y = f(&vs)?;
        Ok((project(&y)?, vs))
    })
}

/// Module case: the input `x` and every parameter tensor are checked.
/// Dropout runs in training mode with a fixed mask stream.
fn module_case(
    name: String,
    b: &ParamBuilder,
    seed: u64,
    x: Array<f64>,
    f: impl for<'t> Fn(&mut Graph<'t, f64>, &Var<'t, f64>) -> Result<Var<'t, f64>> + 'static,
) -> GradCase {
    let store: ParamStore<f64> = b.init(seed);
    let specs = store.specs().to_vec();
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, _, a)| a.clone()));
    GradCase::new(name, inputs, move |tape, inputs| {
        let store = ParamStore::from_parts(specs.clone(), inputs[1..].to_vec())?;
        let mut g = Graph::new(tape, &store, true, 17);
        let x = tape.leaf(inputs[0].clone(), true);
        let y = f(&mut g, &x)?;
        let mut vs = vec![x];
        vs.extend_from_slice(g.params.vars());
        Ok((project(&y)?, vs))
    })
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn array(&mut self, shape: &[usize]) -> Array<f64> {
        let n = shape.iter().product();
        Array::new(
            shape,
            (0..n).map(|_| self.0.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    /// Values bounded away from zero, for ops with a kink there.
    fn away_from_zero(&mut self, shape: &[usize]) -> Array<f64> {
        let mut a = self.array(shape);
        for v in a.data_mut() {
            *v = v.signum() * (0.1 + 0.9 * v.abs());
        }
        a
    }

    fn scaled(&mut self, shape: &[usize], c: f64) -> Array<f64> {
        let mut a = self.array(shape);
        a.data_mut().iter_mut().for_each(|v| *v *= c);
        a
    }

    fn range(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }
}

fn push_op_cases(cases: &mut Vec<GradCase>, g: &mut Gen, rep: usize) {
    let (r, c) = (g.range(1, 4), g.range(2, 5));
    let s = [r, c];
    cases.push(op_case(
        format!("add/{rep}"),
        vec![g.array(&s), g.array(&s)],
        |v| v[0].add(&v[1]),
    ));
    cases.push(op_case(
        format!("sub/{rep}"),
        vec![g.array(&s), g.array(&s)],
        |v| v[0].sub(&v[1]),
    ));
    cases.push(op_case(
        format!("mul/{rep}"),
        vec![g.array(&s), g.array(&s)],
        |v| v[0].mul(&v[1]),
    ));
    cases.push(op_case(format!("scale/{rep}"), vec![g.array(&s)], |v| {
        Ok(v[0].scale(-1.7))
    }));
    let mask: Vec<f64> = g.array(&s).into_data();
    cases.push(op_case(
        format!("mul_const/{rep}"),
        vec![g.array(&s)],
        move |v| v[0].mul_const(mask.clone()),
    ));
    cases.push(op_case(
        format!("add_row/{rep}"),
        vec![g.array(&s), g.array(&[c])],
        |v| v[0].add_row(&v[1]),
    ));
    cases.push(op_case(
        format!("scale_rows/{rep}"),
        vec![g.array(&s), g.array(&[r, 1])],
        |v| v[0].scale_rows(&v[1]),
    ));

    let (m, k, n, bt) = (g.range(1, 4), g.range(1, 4), g.range(1, 4), g.range(2, 3));
    cases.push(op_case(
        format!("matmul/{rep}"),
        vec![g.array(&[m, k]), g.array(&[k, n])],
        |v| v[0].matmul(&v[1]),
    ));
    cases.push(op_case(
        format!("matmul_batched/{rep}"),
        vec![g.array(&[bt, m, k]), g.array(&[bt, k, n])],
        |v| v[0].matmul(&v[1]),
    ));
    cases.push(op_case(
        format!("matmul_shared_rhs/{rep}"),
        vec![g.array(&[bt, m, k]), g.array(&[k, n])],
        |v| v[0].matmul(&v[1]),
    ));
    cases.push(op_case(
        format!("matmul_shared_lhs/{rep}"),
        vec![g.array(&[m, k]), g.array(&[bt, k, n])],
        |v| v[0].matmul(&v[1]),
    ));
    cases.push(op_case(
        format!("transpose/{rep}"),
        vec![g.array(&[bt, m, n])],
        |v| v[0].transpose(),
    ));
    cases.push(op_case(
        format!("swap_axes01/{rep}"),
        vec![g.array(&[bt, m, n])],
        |v| v[0].swap_axes01(),
    ));
    cases.push(op_case(
        format!("reshape/{rep}"),
        vec![g.array(&[bt, m * n])],
        move |v| {
            v[0].reshape(&[m, bt * n])?
                .matmul(&v[0].reshape(&[bt * n, m])?)
        },
    ));
    let split = g.range(1, c - 1);
    cases.push(op_case(
        format!("split_concat/{rep}"),
        vec![g.array(&s)],
        move |v| {
            let (a, b) = v[0].split_channels(split)?;
            Var::concat_channels(&[b, a.scale(2.0), b])
        },
    ));
    cases.push(op_case(
        format!("slice/{rep}"),
        vec![g.array(&[bt, r, c])],
        move |v| v[0].slice_channels(c - split, split),
    ));

    let ln = [g.range(1, 4), g.range(2, 6)];
    cases.push(op_case(
        format!("layer_norm/{rep}"),
        vec![g.array(&ln), g.array(&[ln[1]]), g.array(&[ln[1]])],
        |v| v[0].layer_norm(&v[1], &v[2], 1e-12),
    ));
    cases.push(op_case(
        format!("gelu/{rep}"),
        vec![g.scaled(&s, 3.0)],
        |v| Ok(v[0].gelu()),
    ));
    cases.push(op_case(
        format!("relu/{rep}"),
        vec![g.away_from_zero(&s)],
        |v| Ok(v[0].relu()),
    ));
    cases.push(op_case(
        format!("sigmoid/{rep}"),
        vec![g.scaled(&s, 4.0)],
        |v| Ok(v[0].sigmoid()),
    ));
    cases.push(op_case(
        format!("swish/{rep}"),
        vec![g.scaled(&s, 3.0)],
        |v| v[0].swish(),
    ));
    cases.push(op_case(
        format!("softmax/{rep}"),
        vec![g.scaled(&[bt, r, c], 3.0)],
        |v| Ok(v[0].softmax()),
    ));
    cases.push(op_case(
        format!("log_softmax/{rep}"),
        vec![g.scaled(&s, 3.0)],
        |v| Ok(v[0].log_softmax()),
    ));

    let (t, ch, kk) = (g.range(1, 6), g.range(1, 4), [1, 3, 5][rep % 3]);
    cases.push(op_case(
        format!("depthwise_conv1d/k{kk}/{rep}"),
        vec![g.array(&[t, ch]), g.array(&[ch, kk]), g.array(&[ch])],
        |v| v[0].depthwise_conv1d(&v[1], &v[2]),
    ));
    let (groups, per) = (g.range(1, 3), g.range(1, 3));
    cases.push(op_case(
        format!("grouped_conv1d/k{kk}/{rep}"),
        vec![
            g.array(&[t, groups * per]),
            g.array(&[groups, per, kk]),
            g.array(&[groups]),
        ],
        |v| v[0].grouped_conv1d(&v[1], &v[2]),
    ));
    let (h, w, cin, cout, stride) = (
        g.range(3, 6),
        g.range(3, 6),
        g.range(1, 2),
        g.range(1, 3),
        1 + rep % 2,
    );
    cases.push(op_case(
        format!("conv2d/s{stride}/{rep}"),
        vec![
            g.array(&[h, w, cin]),
            g.array(&[9 * cin, cout]),
            g.array(&[cout]),
        ],
        move |v| v[0].conv2d(&v[1], &v[2], 3, stride),
    ));
    cases.push(op_case(format!("sum/{rep}"), vec![g.array(&s)], |v| {
        Ok(v[0].sum().scale(1.3))
    }));
    cases.push(op_case(format!("mean/{rep}"), vec![g.array(&s)], |v| {
        Ok(v[0].mean().scale(1.3))
    }));

    let vocab = g.range(2, 4);
    let tokens: Vec<usize> = (0..g.range(1, 3)).map(|_| g.range(1, vocab)).collect();
    let target = CtcTarget::new(tokens).unwrap();
    let frames = target.min_frames() + g.range(0, 3);
    cases.push(op_case(
        format!("ctc/{rep}"),
        vec![g.scaled(&[frames, vocab + 1], 2.0)],
        move |v| ctc_loss_on_tape(&v[0], &target),
    ));
}

fn push_module_cases(cases: &mut Vec<GradCase>, g: &mut Gen, rep: usize) {
    let seed = 100 + rep as u64;
    let t = g.range(2, 5);

    let mut b = ParamBuilder::new();
    let lin = LinearParams::new(&mut b, "lin", 4, 3);
    cases.push(module_case(
        format!("linear/{rep}"),
        &b,
        seed,
        g.array(&[t, 4]),
        move |g, x| lin.forward(g, x),
    ));

    let mut b = ParamBuilder::new();
    let ln = LayerNormParams::new(&mut b, "ln", 5);
    cases.push(module_case(
        format!("layer_norm_module/{rep}"),
        &b,
        seed,
        g.array(&[t, 5]),
        move |g, x| layer_norm(g, x, &ln),
    ));

    let mut b = ParamBuilder::new();
    let gc = GroupedConvParams::new(&mut b, "gc", 6, 3, 3).unwrap();
    cases.push(module_case(
        format!("grouped_conv_module/{rep}"),
        &b,
        seed,
        g.array(&[t, 6]),
        move |g, x| grouped_conv1d(g, x, &gc),
    ));

    let mut b = ParamBuilder::new();
    let ffn = FeedForwardParams::new(&mut b, "ffn", 4, 8);
    cases.push(module_case(
        format!("ffn_dropout/{rep}"),
        &b,
        seed,
        g.array(&[t, 4]),
        move |g, x| ffn.forward(g, x, 0.25),
    ));

    let mut b = ParamBuilder::new();
    let mha = MhaParams::new(&mut b, "mha", 8, 2).unwrap();
    cases.push(module_case(
        format!("mha/{rep}"),
        &b,
        seed,
        g.array(&[t, 8]),
        move |g, x| Ok(mha_forward(g, x, &mha, false)?.0),
    ));

    for fusion in FusionKind::ALL {
        let kernels = if rep % 2 == 0 {
            vec![3, 5]
        } else {
            vec![1, 3, 5, 7]
        };
        let mut b = ParamBuilder::new();
        let p = McsguParams::new(&mut b, "mcsgu", 16, &kernels, fusion).unwrap();
        cases.push(module_case(
            format!("mcsgu/{fusion}/P{}/{rep}", kernels.len()),
            &b,
            seed,
            g.array(&[t, 16]),
            move |g, x| Ok(mcsgu_forward(g, x, &p, false)?.0),
        ));
    }

    let mut b = ParamBuilder::new();
    let norm = LayerNormParams::new(&mut b, "csgu.gate_norm", 4);
    let conv = DepthwiseConvParams::new(&mut b, "csgu.conv", 4, 3).unwrap();
    cases.push(module_case(
        format!("csgu/{rep}"),
        &b,
        seed,
        g.array(&[t, 8]),
        move |g, x| csgu_forward(g, x, &conv, &norm),
    ));

    let fusion = FusionKind::ALL[rep % 4];
    let mut b = ParamBuilder::new();
    let blk =
        GatedConvBlockParams::multi_kernel(&mut b, "blk", 4, 8, &[3, 5], fusion, 0.1).unwrap();
    cases.push(module_case(
        format!("multiconv_block/{fusion}/{rep}"),
        &b,
        seed,
        g.array(&[t, 4]),
        move |g, x| Ok(multiconv_block_forward(g, x, &blk, false)?.0),
    ));

    let mut b = ParamBuilder::new();
    let conf = ConformerConvParams::new(&mut b, "conv", 4, 3, 0.1).unwrap();
    cases.push(module_case(
        format!("conformer_conv/{rep}"),
        &b,
        seed,
        g.array(&[t, 4]),
        move |g, x| conformer_conv_forward(g, x, &conf),
    ));

    let mut b = ParamBuilder::new();
    let sub = SubsamplerParams::new(&mut b, "sub", 11, 3).unwrap();
    let frames = g.range(7, 12);
    cases.push(module_case(
        format!("subsample/{rep}"),
        &b,
        seed,
        g.array(&[frames, 11]),
        move |g, x| subsample(g, x, &sub),
    ));
}

fn layer_config(conv_block: ConvBlockKind, fusion: FusionKind) -> EncoderConfig {
    let mut cfg = EncoderConfig::new(1, 8, 2);
    cfg.d_inter = 16;
    cfg.d_ffn = 16;
    cfg.kernels = vec![3, 5];
    cfg.fusion = fusion;
    cfg.conv_block = conv_block;
    cfg.feat_dim = 11;
    cfg
}

fn layer_variants() -> Vec<(ConvBlockKind, FusionKind)> {
    let mut v: Vec<_> = FusionKind::ALL
        .iter()
        .map(|&f| (ConvBlockKind::MultiConv, f))
        .collect();
    v.push((ConvBlockKind::Csgu, FusionKind::Sum));
    v.push((ConvBlockKind::Conformer, FusionKind::Sum));
    v
}

fn push_encoder_cases(cases: &mut Vec<GradCase>, g: &mut Gen, rep: usize) {
    for (conv, fusion) in layer_variants() {
        let cfg = layer_config(conv, fusion);
        let mut b = ParamBuilder::new();
        let layer = EncoderLayerParams::new(&mut b, "layer", &cfg).unwrap();
        cases.push(module_case(
            format!("encoder_layer/{conv}/{fusion}/{rep}"),
            &b,
            200 + rep as u64,
            g.array(&[3, 8]),
            move |g, x| Ok(encoder_layer_forward(g, x, &layer, 0, false)?.0),
        ));
    }
    let (conv, fusion) = layer_variants()[rep % 6];
    let mut cfg = layer_config(conv, fusion);
    cfg.num_layers = 2;
    let mut b = ParamBuilder::new();
    let enc = EncoderParams::new(&mut b, &cfg).unwrap();
    cases.push(module_case(
        format!("encoder/{conv}/{fusion}/{rep}"),
        &b,
        300 + rep as u64,
        g.array(&[15, 11]),
        move |g, x| Ok(encoder_forward(g, x, &enc, false)?.0),
    ));
}

/// Every case of the randomized suite. `reps` copies of each family are
/// drawn with fresh shapes and values.
pub fn suite(seed: u64, reps: usize) -> Vec<GradCase> {
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let mut cases = Vec::new();
    for rep in 0..reps {
        push_op_cases(&mut cases, &mut g, rep);
        push_module_cases(&mut cases, &mut g, rep);
        push_encoder_cases(&mut cases, &mut g, rep);
    }
    cases
}

pub fn run_suite(seed: u64, reps: usize) -> Result<GradCheckReport> {
    let start = Instant::now();
    let cases = suite(seed, reps)
        .iter()
        .map(GradCase::check)
        .collect::<Result<Vec<_>>>()?;
    Ok(GradCheckReport {
        cases,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-11, 5e-11), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // value of x² but a gradient that ignores x
        let case = GradCase::new(
            "bad",
            vec![Array::from_f64(&[1], &[3.0]).unwrap()],
            |tape, inputs| {
                let x = tape.leaf(inputs[0].clone(), true);
                let v = inputs[0].data()[0];
                Ok((x.precomputed_scalar(v * v, vec![1.0]), vec![x]))
            },
        );
        assert!(!case.check().unwrap().passed);
    }

    #[test]
    fn one_rep_passes() {
        let report = run_suite(3, 1).unwrap();
        for c in &report.cases {
            assert!(
                c.max_rel_error < OP_REL_TOLERANCE,
                "{} max rel {}",
                c.name,
                c.max_rel_error
            );
        }
    }
}
