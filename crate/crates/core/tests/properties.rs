mod common;

use proptest::prelude::*;

use multiconvformer::analysis::{diagonality, KernelImportanceMatrix};
use multiconvformer::ctc::{ctc_loss, edit_distance, greedy_decode_scores, CtcTarget};
use multiconvformer::encoder::{fusion_params_in_layer, param_count, EncoderParams};
use multiconvformer::multiconv::{final_kernel_size, fusion_param_formula, McsguParams};
use multiconvformer::nn::ParamBuilder;
use multiconvformer::{
    checkpoint, Array, EncoderConfig, FusionKind, Model, ModelConfig, Tape, Var,
};

fn fusion() -> impl Strategy<Value = FusionKind> {
    prop::sample::select(FusionKind::ALL.to_vec())
}

/// Strictly increasing odd kernel sizes.
fn kernels(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(0usize..12, 1..=max_len)
        .prop_map(|s| s.into_iter().map(|i| 2 * i + 1).collect())
}

fn row_stochastic(t: usize) -> impl Strategy<Value = Array<f64>> {
    prop::collection::vec(0.01f64..1.0, t * t).prop_map(move |v| {
        let mut v = v;
        for row in v.chunks_mut(t) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
        Array::new(&[t, t], v).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_concat_is_identity(rows in 1usize..5, cols in 2usize..9, seed in any::<u64>()) {
        let boundary = 1 + (seed as usize) % (cols - 1);
        let data: Vec<f64> = (0..rows * cols).map(|i| (i as f64 + seed as f64 % 7.0).sin()).collect();
        let tape = Tape::new();
        let x = tape.constant(Array::new(&[rows, cols], data).unwrap());
        let (a, b) = x.split_channels(boundary).unwrap();
        prop_assert_eq!(a.shape(), vec![rows, boundary]);
        prop_assert_eq!(Var::concat_channels(&[a, b]).unwrap().value(), x.value());
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0f64..30.0, 12)) {
        let tape = Tape::new();
        let x = tape.constant(Array::new(&[3, 4], v).unwrap());
        let p = x.softmax().value();
        let lp = x.log_softmax().value();
        for r in 0..3 {
            let s: f64 = (0..4).map(|c| p.at(r, c)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            let lse = (0..4).map(|c| lp.at(r, c).exp()).sum::<f64>().ln();
            prop_assert!(lse.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(v in prop::collection::vec(-5.0f64..5.0, 8)) {
        prop_assume!(v.iter().any(|x| (x - v[0]).abs() > 1e-3));
        let tape = Tape::new();
        let x = tape.constant(Array::new(&[1, 8], v).unwrap());
        let y = x.layer_norm(&tape.constant(Array::ones(&[8])), &tape.constant(Array::zeros(&[8])), 1e-12)
            .unwrap()
            .value();
        let mean = y.data().iter().sum::<f64>() / 8.0;
        let var = y.data().iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 8.0;
        prop_assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ctc_matches_enumeration(
        frames in 1usize..=5,
        vocab in 1usize..=3,
        tokens in prop::collection::vec(1usize..=3, 1..=3),
        logits in prop::collection::vec(-3.0f64..3.0, 20),
    ) {
        let tokens: Vec<usize> = tokens.into_iter().map(|t| 1 + (t - 1) % vocab).collect();
        let target = CtcTarget::new(tokens.clone()).unwrap();
        prop_assume!(frames >= target.min_frames());
        let lat = common::lattice_from(frames, vocab + 1, &logits[..frames * (vocab + 1)]);
        let dp = ctc_loss(&lat, &target).unwrap();
        prop_assert!(dp.feasible);
        prop_assert!((dp.nll - common::brute_force_nll(&lat, &tokens)).abs() < 1e-9);
        prop_assert!(dp.nll >= 0.0);
    }

    #[test]
    fn ctc_ignores_per_frame_shifts(
        logits in prop::collection::vec(-3.0f64..3.0, 15),
        shifts in prop::collection::vec(-50.0f64..50.0, 5),
    ) {
        let target = CtcTarget::new(vec![1, 2]).unwrap();
        let base = ctc_loss(&common::lattice_from(5, 3, &logits), &target).unwrap().nll;
        let shifted: Vec<f64> = logits.iter().enumerate().map(|(i, v)| v + shifts[i / 3]).collect();
        let moved = ctc_loss(&common::lattice_from(5, 3, &shifted), &target).unwrap().nll;
        prop_assert!((base - moved).abs() < 1e-9);
    }

    #[test]
    fn greedy_decode_collapses_argmax_path(path in prop::collection::vec(0usize..4, 1..12)) {
        let scores: Vec<f64> = path
            .iter()
            .flat_map(|&c| (0..4).map(move |k| if k == c { 2.0 } else { 0.0 }))
            .collect();
        let hyp = greedy_decode_scores(&scores, 4);
        prop_assert_eq!(&hyp, &common::collapse(&path));
        prop_assert!(!hyp.contains(&0));
    }

    #[test]
    fn edit_distance_bounds(a in prop::collection::vec(0u8..4, 0..8), b in prop::collection::vec(0u8..4, 0..8)) {
        let ab = edit_distance(&a, &b);
        prop_assert_eq!(ab.distance, edit_distance(&b, &a).distance);
        prop_assert_eq!(ab.distance, ab.substitutions + ab.insertions + ab.deletions);
        prop_assert!(ab.distance <= a.len().max(b.len()));
        prop_assert!(ab.distance >= a.len().abs_diff(b.len()));
        prop_assert_eq!(edit_distance(&a, &a).distance, 0);
    }

    #[test]
    fn diagonality_lies_in_unit_interval(w in (2usize..7).prop_flat_map(row_stochastic)) {
        let d = diagonality(&w).unwrap();
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&d));
    }

    #[test]
    fn diagonality_drops_when_mass_moves_away(
        w in (3usize..7).prop_flat_map(row_stochastic),
        row in 0usize..7,
        frac in 0.05f64..1.0,
    ) {
        let t = w.shape()[0];
        let i = row % t;
        // move part of the diagonal mass to the farthest column
        let far = if i < t / 2 { t - 1 } else { 0 };
        let mut moved = w.clone();
        let amount = frac * w.at(i, i);
        moved.data_mut()[i * t + i] -= amount;
        moved.data_mut()[i * t + far] += amount;
        prop_assert!(diagonality(&moved).unwrap() < diagonality(&w).unwrap());
    }

    #[test]
    fn diagonality_symmetric_under_transpose(w in (2usize..6).prop_flat_map(row_stochastic)) {
        let t = w.shape()[0];
        let mut sym = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                sym[i * t + j] = 0.5 * (w.at(i, j) + w.at(j, i));
            }
        }
        let s = Array::new(&[t, t], sym.clone()).unwrap();
        let mut tr = vec![0.0; t * t];
        for i in 0..t {
            for j in 0..t {
                tr[j * t + i] = sym[i * t + j];
            }
        }
        let d1 = diagonality(&s).unwrap();
        let d2 = diagonality(&Array::new(&[t, t], tr).unwrap()).unwrap();
        prop_assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn importance_rows_sum_to_one(
        frames in prop::collection::vec(1usize..6, 1..4),
        raw in prop::collection::vec(0.01f64..1.0, 60),
    ) {
        let p = 3;
        let mut it = raw.iter().cycle();
        let weights: Vec<Vec<(usize, Array<f64>)>> = frames
            .iter()
            .map(|&t| {
                let mut v: Vec<f64> = (0..t * p).map(|_| *it.next().unwrap()).collect();
                for row in v.chunks_mut(p) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|x| *x /= s);
                }
                vec![(0, Array::new(&[t, p], v).unwrap())]
            })
            .collect();
        let m = KernelImportanceMatrix::from_weights(&[3, 5, 7], 1, &weights).unwrap();
        prop_assert!((m.values[0].iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unit_layout_matches_closed_form(ks in kernels(4), f in fusion(), groups in 1usize..4) {
        let d_prime = ks.len() * groups * 2;
        let mut b = ParamBuilder::new();
        McsguParams::new(&mut b, "layers.0.conv.mcsgu", 2 * d_prime, &ks, f).unwrap();
        let measured = fusion_params_in_layer(b.specs(), 0);
        prop_assert_eq!(measured, fusion_param_formula(d_prime, &ks, f));
    }

    #[test]
    fn encoder_deltas_match_closed_form(ks in kernels(4), layers in 1usize..4, width in 1usize..3) {
        let p = ks.len();
        let mut cfg = EncoderConfig::new(layers, 8, 2);
        cfg.d_inter = 2 * p * width * 2;
        cfg.kernels = ks.clone();
        let total = |f: FusionKind| {
            let mut c = cfg.clone();
            c.fusion = f;
            let mut b = ParamBuilder::new();
            EncoderParams::new(&mut b, &c).unwrap();
            param_count(b.specs()).total as i64
        };
        let d_prime = (cfg.d_inter / 2) as i64;
        let (n, p, kf) = (layers as i64, p as i64, final_kernel_size(&ks) as i64);
        prop_assert_eq!(total(FusionKind::Weighted) - total(FusionKind::Sum), n * (d_prime * p + p));
        prop_assert_eq!(total(FusionKind::Depth) - total(FusionKind::Concat), n * (d_prime * kf + d_prime));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn checkpoint_round_trip(seed in any::<u64>(), f in fusion()) {
        let mut enc = EncoderConfig::new(1, 8, 2);
        enc.kernels = vec![3, 5];
        enc.feat_dim = 11;
        enc.fusion = f;
        enc.seed = seed;
        let model = Model::<f64>::new(&ModelConfig { encoder: enc, vocab_size: 3 }).unwrap();
        let bytes = checkpoint::encode(&model).unwrap();
        let back: Model<f64> = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(checkpoint::encode(&back).unwrap(), bytes);
    }
}
