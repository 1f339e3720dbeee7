//! Connectionist temporal classification: loss, gradient, greedy decoding
//! and token edit distance.
//!
//! The blank symbol is class 0 and vocabulary tokens are `1..=V`. All
//! dynamic programming runs in log space.

use crate::error::{Error, Result};
use crate::tensor::{Array, Real, Var};

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Per-frame log-probabilities over `V + 1` classes (blank first).
#[derive(Clone, Debug, PartialEq)]
pub struct LogProbLattice {
    log_probs: Array<f64>,
}

impl LogProbLattice {
    /// Applies a per-frame log-softmax to `[T, V+1]` logits.
    pub fn from_logits(logits: &Array<f64>) -> Result<Self> {
        let shape = logits.shape();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::dim("ctc lattice", shape, &[0, 2]));
        }
        let c = shape[1];
        let mut out = logits.data().to_vec();
        for row in out.chunks_exact_mut(c) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Ok(LogProbLattice {
            log_probs: Array::new(shape, out)?,
        })
    }

    /// Wraps values that are already normalized log-probabilities.
    pub fn from_log_probs(log_probs: Array<f64>) -> Result<Self> {
        let shape = log_probs.shape();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::dim("ctc lattice", shape, &[0, 2]));
        }
        Ok(LogProbLattice { log_probs })
    }

    pub fn frames(&self) -> usize {
        self.log_probs.shape()[0]
    }

    /// `V + 1`.
    pub fn classes(&self) -> usize {
        self.log_probs.shape()[1]
    }

    pub fn log_prob(&self, t: usize, class: usize) -> f64 {
        self.log_probs.at(t, class)
    }

    pub fn log_probs(&self) -> &Array<f64> {
        &self.log_probs
    }
}

/// Nonempty token sequence with ids in `1..=V`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcTarget(Vec<usize>);

impl CtcTarget {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Input("CTC target must not be empty".into()));
        }
        if tokens.contains(&BLANK) {
            return Err(Error::Input("CTC target contains the blank id 0".into()));
        }
        Ok(CtcTarget(tokens))
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shortest lattice that can emit this target: one frame per token plus
    /// one blank between each pair of equal neighbours.
    pub fn min_frames(&self) -> usize {
        self.0.len() + self.0.windows(2).filter(|w| w[0] == w[1]).count()
    }

    fn extended(&self) -> Vec<usize> {
        let mut ext = Vec::with_capacity(2 * self.0.len() + 1);
        ext.push(BLANK);
        for &tok in &self.0 {
            ext.push(tok);
            ext.push(BLANK);
        }
        ext
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CtcLoss {
    /// Negative log-likelihood; `+∞` when infeasible.
    pub nll: f64,
    pub feasible: bool,
}

struct ForwardBackward {
    nll: f64,
    /// Posterior class occupancy `[T, V+1]`; each row sums to 1.
    occupancy: Vec<f64>,
}

fn check_vocab(lattice: &LogProbLattice, target: &CtcTarget) -> Result<()> {
    if let Some(&bad) = target.tokens().iter().find(|&&t| t >= lattice.classes()) {
        return Err(Error::Index {
            op: "ctc target",
            index: bad,
            range: format!("1..{}", lattice.classes()),
        });
    }
    Ok(())
}

fn forward_backward(
    lattice: &LogProbLattice,
    target: &CtcTarget,
    want_occupancy: bool,
) -> ForwardBackward {
    let t_len = lattice.frames();
    let classes = lattice.classes();
    let ext = target.extended();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; t_len * s_len];
    alpha[0] = lattice.log_prob(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lattice.log_prob(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if skip_ok(s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == ninf {
                ninf
            } else {
                acc + lattice.log_prob(t, ext[s])
            };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_p = if s_len >= 2 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[s_len - 1]
    };
    if !want_occupancy || log_p == ninf {
        return ForwardBackward {
            nll: -log_p,
            occupancy: Vec::new(),
        };
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; t_len * s_len];
    beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len >= 2 {
        beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let next = |s2: usize| beta[(t + 1) * s_len + s2] + lattice.log_prob(t + 1, ext[s2]);
            let mut acc = next(s);
            if s + 1 < s_len {
                acc = log_add(acc, next(s + 1));
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                acc = log_add(acc, next(s + 2));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut occupancy = vec![0.0; t_len * classes];
    for t in 0..t_len {
        for s in 0..s_len {
            let lp = alpha[t * s_len + s] + beta[t * s_len + s] - log_p;
            if lp > ninf {
                occupancy[t * classes + ext[s]] += lp.exp();
            }
        }
    }
    ForwardBackward {
        nll: -log_p,
        occupancy,
    }
}

/// Negative log-likelihood of `target` summed over every alignment.
/// Infeasible pairs (lattice too short) give `nll = +∞, feasible = false`.
pub fn ctc_loss(lattice: &LogProbLattice, target: &CtcTarget) -> Result<CtcLoss> {
    check_vocab(lattice, target)?;
    if lattice.frames() < target.min_frames() {
        return Ok(CtcLoss {
            nll: f64::INFINITY,
            feasible: false,
        });
    }
    let fb = forward_backward(lattice, target, false);
    Ok(CtcLoss {
        nll: fb.nll,
        feasible: fb.nll.is_finite(),
    })
}

/// Gradient of the loss with respect to the *logits* that produced the
/// lattice: `softmax − occupancy`, row-major `[T, V+1]`.
pub fn ctc_logit_grad(lattice: &LogProbLattice, target: &CtcTarget) -> Result<(CtcLoss, Vec<f64>)> {
    check_vocab(lattice, target)?;
    if lattice.frames() < target.min_frames() {
        return Ok((
            CtcLoss {
                nll: f64::INFINITY,
                feasible: false,
            },
            Vec::new(),
        ));
    }
    let fb = forward_backward(lattice, target, true);
    if !fb.nll.is_finite() {
        return Ok((
            CtcLoss {
                nll: fb.nll,
                feasible: false,
            },
            Vec::new(),
        ));
    }
    let grad = lattice
        .log_probs
        .data()
        .iter()
        .zip(&fb.occupancy)
        .map(|(lp, occ)| lp.exp() - occ)
        .collect();
    Ok((
        CtcLoss {
            nll: fb.nll,
            feasible: true,
        },
        grad,
    ))
}

/// CTC loss recorded on the tape for `[T, V+1]` logits. Infeasible targets
/// are an error here; callers that want to skip them check
/// [`CtcTarget::min_frames`] first.
pub fn ctc_loss_on_tape<'t, F: Real>(
    logits: &Var<'t, F>,
    target: &CtcTarget,
) -> Result<Var<'t, F>> {
    let value = logits.value();
    let as_f64 = Array::new(value.shape(), value.to_f64())?;
    let lattice = LogProbLattice::from_logits(&as_f64)?;
    let (loss, grad) = ctc_logit_grad(&lattice, target)?;
    if !loss.feasible {
        return Err(Error::Input(format!(
            "target of {} tokens needs at least {} frames, lattice has {}",
            target.len(),
            target.min_frames(),
            lattice.frames()
        )));
    }
    let grad = grad.into_iter().map(F::from_f64_lossy).collect();
    Ok(logits.precomputed_scalar(F::from_f64_lossy(loss.nll), grad))
}

/// Best-path decoding of per-frame class scores (`[T, classes]`, row-major):
/// argmax per frame (lowest id wins ties), merge repeats, drop blanks.
pub fn greedy_decode_scores<F: Real>(scores: &[F], classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in scores.chunks_exact(classes) {
        let mut best = 0;
        for (i, v) in row.iter().enumerate().skip(1) {
            if *v > row[best] {
                best = i;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

pub fn ctc_greedy_decode(lattice: &LogProbLattice) -> Vec<usize> {
    greedy_decode_scores(lattice.log_probs.data(), lattice.classes())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct EditOps {
    pub distance: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    /// `distance / len(reference)`; `+∞` for an empty reference with a
    /// nonempty hypothesis, 0 when both are empty.
    pub fn rate(&self, reference_len: usize) -> f64 {
        match (reference_len, self.distance) {
            (0, 0) => 0.0,
            (0, _) => f64::INFINITY,
            (n, d) => d as f64 / n as f64,
        }
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`.
/// Insertions are extra hypothesis tokens, deletions are missed reference
/// tokens.
pub fn edit_distance<T: PartialEq>(hyp: &[T], reference: &[T]) -> EditOps {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = EditOps {
        distance: d[n * w + m],
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hyp[j - 1];
            if cur == d[(i - 1) * w + j - 1] + usize::from(!same) {
                ops.substitutions += usize::from(!same);
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == d[(i - 1) * w + j] + 1 {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    ops
}
