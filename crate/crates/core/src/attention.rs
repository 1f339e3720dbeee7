//! Multi-head scaled dot-product self-attention.

use crate::error::{Error, Result};
use crate::nn::{Graph, LinearParams, ParamBuilder};
use crate::tensor::{Array, Real, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct MhaParams {
    pub heads: usize,
    pub d_model: usize,
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

impl MhaParams {
    pub fn new(b: &mut ParamBuilder, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model width {d_model}"
            )));
        }
        Ok(MhaParams {
            heads,
            d_model,
            query: LinearParams::new(b, &format!("{name}.query"), d_model, d_model),
            key: LinearParams::new(b, &format!("{name}.key"), d_model, d_model),
            value: LinearParams::new(b, &format!("{name}.value"), d_model, d_model),
            output: LinearParams::new(b, &format!("{name}.output"), d_model, d_model),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Row-stochastic `[T, T]` attention weights of one head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    pub head: usize,
    pub weights: Array<f64>,
}

impl AttentionMap {
    pub fn frames(&self) -> usize {
        self.weights.shape()[0]
    }
}

/// `[T, d] -> [h, T, d/h]`
fn split_heads<'t, F: Real>(x: &Var<'t, F>, heads: usize) -> Result<Var<'t, F>> {
    let s = x.shape();
    x.reshape(&[s[0], heads, s[1] / heads])?.swap_axes01()
}

/// Unmasked self-attention. With `capture` set, the per-head weight
/// matrices are returned (layer index 0; the encoder relabels them).
pub fn mha_forward<'t, F: Real>(
    g: &Graph<'t, F>,
    x: &Var<'t, F>,
    p: &MhaParams,
    capture: bool,
) -> Result<(Var<'t, F>, Option<Vec<AttentionMap>>)> {
    let shape = x.shape();
    if shape.len() != 2 || shape[1] != p.d_model {
        return Err(Error::dim("mha_forward", &shape, &[0, p.d_model]));
    }
    let t_len = shape[0];
    let q = split_heads(&p.query.forward(g, x)?, p.heads)?;
    let k = split_heads(&p.key.forward(g, x)?, p.heads)?;
    let v = split_heads(&p.value.forward(g, x)?, p.heads)?;

    let scale = F::from_f64_lossy(1.0 / (p.head_dim() as f64).sqrt());
    let scores = q.matmul(&k.transpose()?)?.scale(scale);
    let weights = scores.softmax();

    let maps = capture.then(|| {
        let w = weights.data();
        (0..p.heads)
            .map(|h| AttentionMap {
                layer: 0,
                head: h,
                weights: Array::new(
                    &[t_len, t_len],
                    w[h * t_len * t_len..(h + 1) * t_len * t_len]
                        .iter()
                        .map(|v| v.to_f64_lossy())
                        .collect(),
                )
                .expect("square map"),
            })
            .collect()
    });

    let context = weights
        .matmul(&v)?
        .swap_axes01()?
        .reshape(&[t_len, p.d_model])?;
    Ok((p.output.forward(g, &context)?, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;

    fn setup(d: usize, h: usize, seed: u64) -> (MhaParams, ParamStore<f64>) {
        let mut b = ParamBuilder::new();
        let p = MhaParams::new(&mut b, "mha", d, h).unwrap();
        (p, b.init(seed))
    }

    #[test]
    fn single_frame_has_unit_weight() {
        let (p, store) = setup(8, 2, 4);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let x = g.input(Array::new(&[1, 8], (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let (y, maps) = mha_forward(&g, &x, &p, true).unwrap();
        let maps = maps.unwrap();
        assert_eq!(maps.len(), 2);
        assert!(maps.iter().all(|m| m.weights.data() == [1.0]));
        let expected = p
            .output
            .forward(&g, &p.value.forward(&g, &x).unwrap())
            .unwrap();
        assert!(y.value().max_abs_diff(&expected.value()) < 1e-14);
    }

    #[test]
    fn identical_frames_attend_uniformly() {
        let (p, store) = setup(8, 4, 5);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let row: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let x = g.input(Array::new(&[5, 8], row.repeat(5)).unwrap());
        let (_, maps) = mha_forward(&g, &x, &p, true).unwrap();
        for m in maps.unwrap() {
            assert!(m.weights.data().iter().all(|w| (w - 0.2).abs() < 1e-12));
        }
    }

    #[test]
    fn hand_set_identity_projections() {
        let (p, mut store) = setup(2, 1, 0);
        for lin in [&p.query, &p.key, &p.value, &p.output] {
            store
                .set(
                    lin.weight,
                    Array::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap(),
                )
                .unwrap();
            store.set(lin.bias, Array::zeros(&[2])).unwrap();
        }
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let x = g.input(Array::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let (_, maps) = mha_forward(&g, &x, &p, true).unwrap();
        let w = &maps.unwrap()[0].weights;
        let hi = 1.0 / (1.0 + (-std::f64::consts::FRAC_1_SQRT_2).exp());
        assert!((w.at(0, 0) - hi).abs() < 1e-12 && (w.at(1, 1) - hi).abs() < 1e-12);
        assert!((w.at(0, 0) - 0.6698).abs() < 1e-4 && (w.at(0, 1) - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_heads_and_width() {
        let mut b = ParamBuilder::new();
        assert!(matches!(
            MhaParams::new(&mut b, "m", 6, 4),
            Err(Error::Config(_))
        ));
        let (p, store) = setup(8, 2, 1);
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false, 0);
        let x = g.input(Array::zeros(&[3, 4]));
        assert!(matches!(
            mha_forward(&g, &x, &p, false),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn permuting_frames_permutes_outputs() {
        let (p, store) = setup(8, 2, 8);
        let t = 4;
        let data: Vec<f64> = (0..t * 8)
            .map(|i| ((i * 7 % 13) as f64 * 0.3).cos())
            .collect();
        let perm = [2, 0, 3, 1];
        let mut permuted = vec![0.0; data.len()];
        for (dst, &src) in perm.iter().enumerate() {
            permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&data[src * 8..(src + 1) * 8]);
        }
        let run = |x: Vec<f64>| {
            let tape = Tape::new();
            let g = Graph::new(&tape, &store, false, 0);
            mha_forward(&g, &g.input(Array::new(&[t, 8], x).unwrap()), &p, false)
                .unwrap()
                .0
                .value()
        };
        let (a, b) = (run(data), run(permuted));
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b.at(dst, c) - a.at(src, c)).abs() < 1e-12);
            }
        }
    }
}
