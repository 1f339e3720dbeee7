#![allow(dead_code)]

use multiconvformer::ctc::LogProbLattice;
use multiconvformer::Array;

/// Collapses a frame-level path: merge repeats, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &c in path {
        if Some(c) != prev && c != 0 {
            out.push(c);
        }
        prev = Some(c);
    }
    out
}

/// `-ln Σ P(path)` over every one of the `classes^T` frame paths that
/// collapse to `target`.
pub fn brute_force_nll(lattice: &LogProbLattice, target: &[usize]) -> f64 {
    let (t_len, classes) = (lattice.frames(), lattice.classes());
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path) == target {
            total += path
                .iter()
                .enumerate()
                .map(|(t, &c)| lattice.log_prob(t, c))
                .sum::<f64>()
                .exp();
        }
        let mut i = 0;
        loop {
            if i == t_len {
                return -total.ln();
            }
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

pub fn lattice_from(frames: usize, classes: usize, logits: &[f64]) -> LogProbLattice {
    LogProbLattice::from_logits(&Array::new(&[frames, classes], logits.to_vec()).unwrap()).unwrap()
}
