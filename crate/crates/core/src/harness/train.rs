//! CTC training with Adam, periodic dev evaluation and metrics logging.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Utterance;
use crate::checkpoint;
use crate::ctc::{
    ctc_loss, ctc_loss_on_tape, edit_distance, greedy_decode_scores, CtcTarget, EditOps,
    LogProbLattice,
};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{subsampled_len, Graph, ParamStore};
use crate::tensor::{Array, Real, Tape};

fn default_batch() -> usize {
    16
}
fn default_steps() -> usize {
    2000
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-9
}
fn default_clip() -> f64 {
    5.0
}
fn default_eval_interval() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Batch order and dropout masks.
    #[serde(default)]
    pub seed: u64,
    /// Stop once dev TER reaches this value.
    #[serde(default)]
    pub early_stop_ter: Option<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        TrainConfig {
            encoder,
            batch_size: default_batch(),
            steps: default_steps(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            grad_clip: default_clip(),
            eval_interval: default_eval_interval(),
            seed: 0,
            early_stop_ter: None,
            out_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 || self.steps == 0 || self.eval_interval == 0 {
            return fail("batch_size, steps and eval_interval must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0 && self.grad_clip > 0.0) {
            return fail("eps and grad_clip must be positive");
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Mean batch loss since the previous record.
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_ter: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UtteranceResult {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub edits: EditOps,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Corpus token error rate: total edits over total reference tokens.
    pub ter: f64,
    /// Mean CTC loss over feasible utterances.
    pub loss: f64,
    pub errors: usize,
    pub reference_tokens: usize,
    pub infeasible: usize,
    pub utterances: Vec<UtteranceResult>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "id,reference,hypothesis,distance,substitutions,insertions,deletions"
        )?;
        let join = |t: &[usize]| t.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        for u in &self.utterances {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                u.id,
                join(&u.reference),
                join(&u.hypothesis),
                u.edits.distance,
                u.edits.substitutions,
                u.edits.insertions,
                u.edits.deletions
            )?;
        }
        Ok(())
    }
}

pub fn to_real<F: Real>(a: &Array<f32>) -> Array<F> {
    let data = a
        .data()
        .iter()
        .map(|&v| F::from_f64_lossy(v as f64))
        .collect();
    Array::new(a.shape(), data).expect("same shape")
}

fn check_tokens(model_vocab: usize, utts: &[Utterance]) -> Result<()> {
    for u in utts {
        if let Some(&bad) = u.tokens.iter().find(|&&t| t == 0 || t > model_vocab) {
            return Err(Error::Config(format!(
                "utterance {} has token {bad}, model vocabulary is 1..={model_vocab}",
                u.id
            )));
        }
    }
    Ok(())
}

/// Greedy decoding and token error rate over `utts`.
pub fn evaluate<F: Real>(model: &Model<F>, utts: &[Utterance]) -> Result<EvalReport> {
    if utts.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    check_tokens(model.config().vocab_size, utts)?;
    let classes = model.config().classes();
    let mut results = Vec::with_capacity(utts.len());
    let (mut errors, mut ref_tokens, mut infeasible) = (0, 0, 0);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    for u in utts {
        let (logits, _) = model.infer(&to_real(&u.features), false)?;
        let hyp = greedy_decode_scores(logits.data(), classes);
        let lattice = LogProbLattice::from_logits(&Array::new(logits.shape(), logits.to_f64())?)?;
        let loss = ctc_loss(&lattice, &CtcTarget::new(u.tokens.clone())?)?;
        if loss.feasible {
            loss_sum += loss.nll;
            loss_n += 1;
        } else {
            infeasible += 1;
        }
        let edits = edit_distance(&hyp, &u.tokens);
        errors += edits.distance;
        ref_tokens += u.tokens.len();
        results.push(UtteranceResult {
            id: u.id.clone(),
            reference: u.tokens.clone(),
            hypothesis: hyp,
            edits,
        });
    }
    Ok(EvalReport {
        ter: EditOps {
            distance: errors,
            ..Default::default()
        }
        .rate(ref_tokens),
        loss: if loss_n == 0 {
            f64::INFINITY
        } else {
            loss_sum / loss_n as f64
        },
        errors,
        reference_tokens: ref_tokens,
        infeasible,
        utterances: results,
    })
}

/// Adam with bias correction; moments kept in f64.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<F: Real>(store: &ParamStore<F>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, a)| vec![0.0; a.len()]).collect();
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn update<F: Real>(&mut self, store: &mut ParamStore<F>, grads: &[Vec<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in store
            .arrays_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let delta = self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                if delta != 0.0 {
                    *p = F::from_f64_lossy(p.to_f64_lossy() - delta);
                }
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

pub fn is_feasible(u: &Utterance) -> bool {
    let target_frames = u.tokens.len() + u.tokens.windows(2).filter(|w| w[0] == w[1]).count();
    !u.tokens.is_empty()
        && subsampled_len(u.features.shape()[0]).is_some_and(|t| t >= target_frames)
}

fn dropout_seed(seed: u64, step: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((step as u64) << 24) ^ index as u64
}

pub struct TrainOutcome<F> {
    /// Parameters with the lowest dev TER seen.
    pub best: Model<F>,
    pub best_step: usize,
    pub best_dev_ter: f64,
    pub last: Model<F>,
    pub metrics: Vec<MetricsRecord>,
    pub steps_run: usize,
    /// Training utterances excluded because no CTC alignment fits.
    pub skipped: usize,
}

/// Runs the training loop. `on_record` sees every metrics record as it is
/// produced. With `cfg.out_dir` set, the config, `metrics.jsonl`,
/// `best.ckpt` and `last.ckpt` are written there.
pub fn train<F: Real>(
    cfg: &TrainConfig,
    vocab_size: usize,
    train_set: &[Utterance],
    dev_set: &[Utterance],
    mut on_record: impl FnMut(&MetricsRecord),
) -> Result<TrainOutcome<F>> {
    cfg.validate()?;
    let start = Instant::now();
    let model_cfg = ModelConfig {
        encoder: cfg.encoder.clone(),
        vocab_size,
    };
    check_tokens(vocab_size, train_set)?;
    check_tokens(vocab_size, dev_set)?;
    if dev_set.is_empty() {
        return Err(Error::Input("dev split is empty".into()));
    }
    let mut model = Model::<F>::new(&model_cfg)?;
    let mut adam = Adam::new(
        &model.store,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
    );

    let pool: Vec<(usize, Array<F>, CtcTarget)> = train_set
        .iter()
        .enumerate()
        .filter(|(_, u)| is_feasible(u))
        .map(|(i, u)| Ok((i, to_real(&u.features), CtcTarget::new(u.tokens.clone())?)))
        .collect::<Result<_>>()?;
    let skipped = train_set.len() - pool.len();
    if pool.is_empty() {
        return Err(Error::Input("no feasible training utterances".into()));
    }

    let mut metrics_file = match &cfg.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            cfg.save(&dir.join("config.json"))?;
            Some(fs::File::create(dir.join("metrics.jsonl"))?)
        }
        None => None,
    };

    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(7);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut cursor = order.len();

    let mut best = model.clone();
    let (mut best_step, mut best_ter) = (0, f64::INFINITY);
    let mut metrics = Vec::new();
    let (mut loss_acc, mut loss_batches) = (0.0, 0usize);
    let mut steps_run = 0;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut grads: Vec<Vec<f64>> = model
            .store
            .iter()
            .map(|(_, _, a)| vec![0.0; a.len()])
            .collect();
        let mut batch_loss = 0.0;
        for (i, &idx) in batch.iter().enumerate() {
            let (_, features, target) = &pool[idx];
            let tape = Tape::new();
            let mut g = Graph::new(&tape, &model.store, true, dropout_seed(cfg.seed, step, i));
            let x = g.input(features.clone());
            let (logits, _) = model.forward(&mut g, &x, false)?;
            let loss = ctc_loss_on_tape(&logits, target)?;
            batch_loss += loss.item().to_f64_lossy();
            tape.backward(loss)?;
            for (acc, pg) in grads.iter_mut().zip(g.params.grads()) {
                for (a, v) in acc.iter_mut().zip(pg) {
                    *a += v.to_f64_lossy();
                }
            }
        }
        let n = batch.len() as f64;
        batch_loss /= n;
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                utterances: batch
                    .iter()
                    .map(|&i| train_set[pool[i].0].id.clone())
                    .collect(),
            });
        }
        grads.iter_mut().flatten().for_each(|g| *g /= n);
        clip_global_norm(&mut grads, cfg.grad_clip);
        adam.update(&mut model.store, &grads);
        loss_acc += batch_loss;
        loss_batches += 1;
        steps_run = step;

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let report = evaluate(&model, dev_set)?;
            let rec = MetricsRecord {
                step,
                train_loss: loss_acc / loss_batches as f64,
                dev_loss: report.loss,
                dev_ter: report.ter,
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            (loss_acc, loss_batches) = (0.0, 0);
            if let Some(f) = metrics_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            on_record(&rec);
            if report.ter < best_ter {
                best_ter = report.ter;
                best_step = step;
                best = model.clone();
            }
            metrics.push(rec);
            if cfg.early_stop_ter.is_some_and(|t| report.ter <= t) {
                break;
            }
        }
    }

    if let Some(dir) = &cfg.out_dir {
        checkpoint::save(&best, &dir.join("best.ckpt"))?;
        checkpoint::save(&model, &dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        best,
        best_step,
        best_dev_ter: best_ter,
        last: model,
        metrics,
        steps_run,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut b = crate::nn::ParamBuilder::new();
        b.add("w", &[2], crate::nn::Init::Ones);
        let mut store = b.init::<f64>(0);
        let mut adam = Adam::new(&store, 0.1, 0.9, 0.98, 1e-9);
        adam.update(&mut store, &[vec![3.0, -0.5]]);
        let w = store.get(store.id_of("w").unwrap()).data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] - 1.1).abs() < 1e-8);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn config_json_round_trip() {
        let mut cfg = TrainConfig::new(EncoderConfig::new(2, 64, 4));
        cfg.learning_rate = 0.1 + 0.2;
        cfg.early_stop_ter = Some(0.03);
        let back = TrainConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.learning_rate.to_bits(), cfg.learning_rate.to_bits());
    }
}
