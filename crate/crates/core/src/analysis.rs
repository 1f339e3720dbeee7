//! Attention diagonality, kernel-importance gates and parameter accounting.

use std::io::Write;

use serde::Serialize;

use crate::attention::AttentionMap;
use crate::encoder::{
    fusion_params_in_layer, param_count, ConvBlockKind, EncoderConfig, EncoderParams,
};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::multiconv::{fusion_param_formula, FusionKind};
use crate::nn::ParamBuilder;
use crate::tensor::{Array, Real};

/// `1 − Σ w[i,j]·|i−j| / (T·(T−1))`. A single frame counts as perfectly
/// diagonal.
pub fn diagonality(w: &Array<f64>) -> Result<f64> {
    let s = w.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("diagonality", s, &[s[0], s[0]]));
    }
    let t = s[0];
    if t == 1 {
        return Ok(1.0);
    }
    let mut offset = 0.0;
    for (i, row) in w.data().chunks_exact(t).enumerate() {
        for (j, v) in row.iter().enumerate() {
            offset += v * i.abs_diff(j) as f64;
        }
    }
    Ok(1.0 - offset / (t * (t - 1)) as f64)
}

pub fn map_diagonality(m: &AttentionMap) -> Result<f64> {
    diagonality(&m.weights)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagonalityReport {
    /// Per layer: mean over heads, then over utterances.
    pub layers: Vec<f64>,
    pub average: f64,
}

impl DiagonalityReport {
    /// Aggregates the attention maps of several utterances. Each inner slice
    /// holds every map captured while encoding one utterance.
    pub fn from_maps(num_layers: usize, utterances: &[Vec<AttentionMap>]) -> Result<Self> {
        if utterances.is_empty() {
            return Err(Error::Input(
                "diagonality needs at least one utterance".into(),
            ));
        }
        let mut totals = vec![0.0; num_layers];
        for maps in utterances {
            let mut sums = vec![0.0; num_layers];
            let mut heads = vec![0usize; num_layers];
            for m in maps {
                if m.layer >= num_layers {
                    return Err(Error::Index {
                        op: "diagonality report",
                        index: m.layer,
                        range: format!("0..{num_layers}"),
                    });
                }
                sums[m.layer] += map_diagonality(m)?;
                heads[m.layer] += 1;
            }
            for l in 0..num_layers {
                if heads[l] == 0 {
                    return Err(Error::Contract(format!(
                        "no attention maps captured for layer {l}"
                    )));
                }
                totals[l] += sums[l] / heads[l] as f64;
            }
        }
        let layers: Vec<f64> = totals.iter().map(|v| v / utterances.len() as f64).collect();
        let average = layers.iter().sum::<f64>() / num_layers.max(1) as f64;
        Ok(DiagonalityReport { layers, average })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "layer,value")?;
        for (i, v) in self.layers.iter().enumerate() {
            writeln!(w, "{i},{v}")?;
        }
        Ok(())
    }
}

pub fn diagonality_report<F: Real>(
    model: &Model<F>,
    dataset: &[Array<F>],
) -> Result<DiagonalityReport> {
    let maps = dataset
        .iter()
        .map(|x| model.infer(x, true).map(|(_, caps)| caps.attention))
        .collect::<Result<Vec<_>>>()?;
    DiagonalityReport::from_maps(model.config().encoder.num_layers, &maps)
}

/// Mean gate weight per layer and kernel, pooled over every analyzed frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelImportanceMatrix {
    pub kernels: Vec<usize>,
    /// `[num_layers][P]`
    pub values: Vec<Vec<f64>>,
}

impl KernelImportanceMatrix {
    /// `weights[u]` lists `(layer, [T, P])` gate matrices of utterance `u`.
    pub fn from_weights(
        kernels: &[usize],
        num_layers: usize,
        weights: &[Vec<(usize, Array<f64>)>],
    ) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Input(
                "kernel importance needs at least one utterance".into(),
            ));
        }
        let p = kernels.len();
        let mut sums = vec![vec![0.0; p]; num_layers];
        let mut frames = vec![0usize; num_layers];
        for (layer, alpha) in weights.iter().flatten() {
            if *layer >= num_layers || alpha.shape().get(1) != Some(&p) {
                return Err(Error::dim("kernel importance", alpha.shape(), &[0, p]));
            }
            for row in alpha.data().chunks_exact(p) {
                for (acc, v) in sums[*layer].iter_mut().zip(row) {
                    *acc += v;
                }
            }
            frames[*layer] += alpha.shape()[0];
        }
        let values = sums
            .into_iter()
            .zip(&frames)
            .enumerate()
            .map(|(l, (row, &n))| {
                if n == 0 {
                    return Err(Error::Contract(format!(
                        "no gate weights captured for layer {l}"
                    )));
                }
                Ok(row.into_iter().map(|v| v / n as f64).collect())
            })
            .collect::<Result<_>>()?;
        Ok(KernelImportanceMatrix {
            kernels: kernels.to_vec(),
            values,
        })
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = self.kernels.iter().map(|k| format!("k{k}")).collect();
        writeln!(w, "layer,{}", header.join(","))?;
        for (i, row) in self.values.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            writeln!(w, "{i},{}", cells.join(","))?;
        }
        Ok(())
    }
}

pub fn kernel_importance<F: Real>(
    model: &Model<F>,
    dataset: &[Array<F>],
) -> Result<KernelImportanceMatrix> {
    let enc = &model.config().encoder;
    if enc.conv_block != ConvBlockKind::MultiConv || enc.fusion != FusionKind::Weighted {
        return Err(Error::Contract(format!(
            "kernel importance needs weighted multi-kernel blocks, model uses {} / {}",
            enc.conv_block, enc.fusion
        )));
    }
    let weights = dataset
        .iter()
        .map(|x| model.infer(x, true).map(|(_, caps)| caps.kernel_weights))
        .collect::<Result<Vec<_>>>()?;
    KernelImportanceMatrix::from_weights(&enc.kernels, enc.num_layers, &weights)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReportRow {
    pub label: String,
    pub total: usize,
    /// Fusion-specific scalars summed over layers (0 for baselines).
    pub fusion: usize,
    /// `total` minus the first row's total.
    pub delta: i64,
    /// Closed-form delta, when the two configs differ only in fusion.
    pub expected_delta: Option<i64>,
}

fn fusion_total(cfg: &EncoderConfig) -> usize {
    match cfg.conv_block {
        ConvBlockKind::MultiConv => {
            cfg.num_layers * fusion_param_formula(cfg.d_prime(), &cfg.kernels, cfg.fusion)
        }
        _ => 0,
    }
}

fn same_except_fusion(a: &EncoderConfig, b: &EncoderConfig) -> bool {
    let mut b = b.clone();
    b.fusion = a.fusion;
    a.conv_block == ConvBlockKind::MultiConv && *a == b
}

/// Encoder totals per variant with deltas against the first entry. Every
/// multi-kernel layer is checked against the closed-form fusion count.
pub fn param_report(variants: &[(String, EncoderConfig)]) -> Result<Vec<ParamReportRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    let mut base: Option<(usize, &EncoderConfig)> = None;
    for (label, cfg) in variants {
        let mut b = ParamBuilder::new();
        EncoderParams::new(&mut b, cfg)?;
        let specs = b.specs();
        let total = param_count(specs).total;
        let mut fusion = 0;
        if cfg.conv_block == ConvBlockKind::MultiConv {
            let want = fusion_param_formula(cfg.d_prime(), &cfg.kernels, cfg.fusion);
            for layer in 0..cfg.num_layers {
                let got = fusion_params_in_layer(specs, layer);
                if got != want {
                    return Err(Error::Integrity {
                        block: format!("{label}: layers.{layer}.conv"),
                        detail: format!("{got} fusion parameters, closed form gives {want}"),
                    });
                }
                fusion += got;
            }
        }
        let (base_total, base_cfg) = *base.get_or_insert((total, cfg));
        let delta = total as i64 - base_total as i64;
        let expected_delta = same_except_fusion(base_cfg, cfg)
            .then(|| fusion_total(cfg) as i64 - fusion_total(base_cfg) as i64);
        if let Some(e) = expected_delta {
            if e != delta {
                return Err(Error::Integrity {
                    block: label.clone(),
                    detail: format!("total delta {delta} differs from closed form {e}"),
                });
            }
        }
        rows.push(ParamReportRow {
            label: label.clone(),
            total,
            fusion,
            delta,
            expected_delta,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(t: usize, data: Vec<f64>, layer: usize) -> AttentionMap {
        AttentionMap {
            layer,
            head: 0,
            weights: Array::new(&[t, t], data).unwrap(),
        }
    }

    fn eye(t: usize) -> Vec<f64> {
        (0..t * t)
            .map(|i| if i / t == i % t { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn reference_values() {
        for t in 1..6 {
            assert_eq!(
                diagonality(&Array::new(&[t, t], eye(t)).unwrap()).unwrap(),
                1.0
            );
        }
        let uni = diagonality(&Array::full(&[4, 4], 0.25)).unwrap();
        assert!((uni - 7.0 / 12.0).abs() < 1e-12);
        let anti = diagonality(&Array::from_f64(&[2, 2], &[0.0, 1.0, 1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(anti, 0.0);
        assert_eq!(
            diagonality(&Array::new(&[1, 1], vec![1.0]).unwrap()).unwrap(),
            1.0
        );
    }

    #[test]
    fn report_averages_heads_then_utterances() {
        let id2 = map(2, eye(2), 0);
        let anti = map(2, vec![0.0, 1.0, 1.0, 0.0], 0);
        let uni = map(4, vec![0.25; 16], 1);
        let r = DiagonalityReport::from_maps(
            2,
            &[
                vec![id2.clone(), anti.clone(), uni.clone()],
                vec![id2.clone(), id2.clone(), map(3, eye(3), 1)],
            ],
        )
        .unwrap();
        assert!((r.layers[0] - 0.75).abs() < 1e-15);
        assert!((r.layers[1] - (7.0 / 12.0 + 1.0) / 2.0).abs() < 1e-15);
        assert!((r.average - (r.layers[0] + r.layers[1]) / 2.0).abs() < 1e-15);
        assert!(DiagonalityReport::from_maps(2, &[]).is_err());
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("layer,value\n0,0.75\n1,"));
    }

    #[test]
    fn importance_pools_frames() {
        let a = Array::from_f64(&[2, 2], &[1.0, 0.0, 0.5, 0.5]).unwrap();
        let b = Array::from_f64(&[1, 2], &[0.0, 1.0]).unwrap();
        let m = KernelImportanceMatrix::from_weights(&[3, 7], 1, &[vec![(0, a)], vec![(0, b)]])
            .unwrap();
        assert!((m.values[0][0] - 0.5).abs() < 1e-15 && (m.values[0][1] - 0.5).abs() < 1e-15);
        let mut csv = Vec::new();
        m.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap(), "layer,k3,k7\n0,0.5,0.5\n");
    }

    #[test]
    fn identical_configs_have_zero_delta() {
        let mut cfg = EncoderConfig::new(1, 8, 2);
        cfg.kernels = vec![3, 5];
        let rows = param_report(&[("a".into(), cfg.clone()), ("b".into(), cfg)]).unwrap();
        assert_eq!(rows[1].delta, 0);
        assert_eq!(rows[1].expected_delta, Some(0));
    }
}
