use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::moe::{self, load_balance_loss};
use crate::scalar::Real;
use crate::tasks::{self, Task, TaskSample};
use crate::ternary;

use super::optim::{clip_global_norm, AdamW};
use super::{Model, ModelConfig, Variant};

/// Mixed into the run seed so data and shuffling never share a stream with
/// parameter initialisation.
const TRAIN_DATA_SALT: u64 = 0x7472_6169_6e00_0001;
const EVAL_DATA_SALT: u64 = 0x6576_616c_0000_0002;
const SHUFFLE_SALT: u64 = 0x7368_7566_0000_0003;

/// Metrics after one epoch; epoch 0 holds the untrained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training objective over the epoch (absent for epoch 0).
    pub train_loss: Option<f64>,
    pub eval_loss: f64,
    pub token_accuracy: f64,
    /// Mean load-balancing term over the epoch's batches (at epoch 0, of the
    /// evaluation pass).
    pub balance_loss: f64,
    /// Mean relative substrate quantization error (%) over butterfly layers.
    pub quant_error: Option<f64>,
    /// Mean expert diversity over butterfly layers on an evaluation probe.
    pub diversity: Option<f64>,
}

/// Per-epoch training history. Deterministic for a given config: wall time
/// and memory live in the run manifest instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: Variant,
    pub task: Task,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn initial(&self) -> &EpochRecord {
        &self.epochs[0]
    }

    pub fn last(&self) -> &EpochRecord {
        self.epochs.last().expect("epoch 0 always recorded")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub token_accuracy: f64,
    pub balance_loss: f64,
}

/// Training and evaluation sets for `config.task`, from disjoint seeded
/// streams.
pub fn datasets(config: &ModelConfig) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
    let n = config.task_len();
    let train = tasks::generate(config.task, config.train_samples, n, config.vocab, config.seed ^ TRAIN_DATA_SALT)?;
    let eval = tasks::generate(config.task, config.eval_samples, n, config.vocab, config.seed ^ EVAL_DATA_SALT)?;
    Ok((train, eval))
}

/// Teacher-forced cross-entropy and accuracy over target positions.
pub fn evaluate<T: Real>(model: &Model<T>, data: &[TaskSample]) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::config("evaluation dataset is empty"));
    }
    let (mut loss, mut correct, mut total, mut balance) = (0.0, 0usize, 0usize, 0.0);
    let batches = data.chunks(model.config().batch);
    let n_batches = batches.len();
    for chunk in batches {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let refs: Vec<&TaskSample> = chunk.iter().collect();
        let out = model.batch_loss(&mut g, &bound, &refs)?;
        let n = out.targets.len();
        loss += g.value(out.ce).item().to_f64() * n as f64;
        correct += count_correct(g.value(out.target_logits), &out.targets);
        total += n;
        balance += out
            .forward
            .stats
            .iter()
            .map(|s| load_balance_loss(s, s.n_experts(), model.config().lambda_balance))
            .sum::<f64>();
    }
    Ok(Evaluation {
        loss: loss / total as f64,
        token_accuracy: correct as f64 / total as f64,
        balance_loss: balance / n_batches as f64,
    })
}

fn count_correct<T: Real>(logits: &Tensor<T>, targets: &[usize]) -> usize {
    targets
        .iter()
        .enumerate()
        .filter(|&(r, &t)| {
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            best == t
        })
        .count()
}

/// Substrate error and expert diversity of every butterfly layer, averaged.
fn butterfly_diagnostics<T: Real>(model: &Model<T>, probe: &[TaskSample]) -> Result<(Option<f64>, Option<f64>)> {
    if model.config().variant != Variant::ButterflyMoe {
        return Ok((None, None));
    }
    let layers: Vec<_> = model.butterfly_layers().collect();
    let mut q = 0.0;
    for l in &layers {
        q += ternary::relative_quant_error(l.latent())?;
    }
    let mut div = 0.0;
    for sim in expert_similarities(model, probe)? {
        div += moe::diversity_score(&sim.matrix)?;
    }
    let n = layers.len() as f64;
    Ok((Some(q / n), Some(div / n)))
}

/// Expert output similarity of every butterfly layer, probed with the
/// normalised feed-forward inputs that `probe` produces in that layer.
pub fn expert_similarities<T: Real>(model: &Model<T>, probe: &[TaskSample]) -> Result<Vec<moe::Similarity>> {
    if probe.is_empty() {
        return Err(Error::config("similarity probe is empty"));
    }
    let mut g = Graph::new();
    let bound = model.bind(&mut g, false);
    let refs: Vec<&TaskSample> = probe.iter().collect();
    let out = model.batch_loss(&mut g, &bound, &refs)?;
    model
        .blocks
        .iter()
        .zip(&out.forward.ffn_inputs)
        .filter_map(|(b, &h)| match &b.ffn {
            super::Ffn::Butterfly { moe, .. } => Some(moe.expert_similarity(g.value(h))),
            _ => None,
        })
        .collect()
}

/// Peak resident set size of this process, where the platform reports it.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// Minimises cross-entropy plus the balance terms with AdamW for
/// `config.epochs` epochs, shuffling with a stream that depends only on the
/// seed so every variant sees the same batches. `on_epoch` observes each
/// record as it is produced.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[TaskSample],
    eval_set: &[TaskSample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    let config = model.config().clone();
    if train_set.is_empty() && config.epochs > 0 {
        return Err(Error::config("training dataset is empty"));
    }
    let probe = &eval_set[..eval_set.len().min(config.batch)];
    let mut opt = AdamW::new(config.lr, config.beta1, config.beta2, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let record = |model: &Model<T>, epoch: usize, train_loss: Option<f64>, balance: Option<f64>| -> Result<EpochRecord> {
        let ev = evaluate(model, eval_set)?;
        let (quant_error, diversity) = butterfly_diagnostics(model, probe)?;
        Ok(EpochRecord {
            epoch,
            train_loss,
            eval_loss: ev.loss,
            token_accuracy: ev.token_accuracy,
            balance_loss: balance.unwrap_or(ev.balance_loss),
            quant_error,
            diversity,
        })
    };

    let first = record(model, 0, None, None)?;
    on_epoch(&first);
    let mut epochs = vec![first];
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut balance_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch) {
            let refs: Vec<&TaskSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, true);
            let out = model.batch_loss(&mut g, &bound, &refs)?;
            let loss = g.value(out.total).item().to_f64();
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} at epoch {epoch}, step {}", opt.steps() + 1)));
            }
            loss_sum += loss;
            balance_sum += out.forward.balance.map_or(0.0, |b| g.value(b).item().to_f64());
            batches += 1;
            let mut grads = g.backward(out.total)?;
            let mut flat: Vec<Tensor<T>> = bound
                .vars()
                .into_iter()
                .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape().to_vec())))
                .collect();
            let norm = clip_global_norm(&mut flat, config.grad_clip);
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("gradient norm became {norm} at epoch {epoch}")));
            }
            opt.step(model, &flat);
        }
        let rec = record(model, epoch, Some(loss_sum / batches as f64), Some(balance_sum / batches as f64))?;
        on_epoch(&rec);
        epochs.push(rec);
    }
    Ok(TrainReport {
        variant: config.variant,
        task: config.task,
        seed: config.seed,
        epochs,
    })
}

/// Wall-clock helper for callers that report timing next to a
/// [`TrainReport`].
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(variant: Variant, task: Task) -> ModelConfig {
        ModelConfig {
            vocab: 12,
            seq_len: 8,
            d_model: 16,
            d_ff: 32,
            n_blocks: 1,
            n_heads: 2,
            n_experts: 4,
            k: 2,
            layers_in: 4,
            layers_out: 5,
            variant,
            task,
            batch: 16,
            epochs: 2,
            train_samples: 64,
            eval_samples: 32,
            ..Default::default()
        }
    }

    #[test]
    fn empty_eval_is_config_error() {
        let m = Model::<f32>::new(small(Variant::Dense, Task::Copy)).unwrap();
        assert!(matches!(evaluate(&m, &[]), Err(Error::Config(_))));
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits: Tensor<f64> = Tensor::from_f64([3, 3], &[0.0, 5.0, 1.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.1]).unwrap();
        assert_eq!(count_correct(&logits, &[1, 0, 1]), 2);
    }

    #[test]
    fn untrained_accuracy_is_near_chance() {
        let c = ModelConfig {
            eval_samples: 400,
            ..small(Variant::ButterflyMoe, Task::Copy)
        };
        let m = Model::<f64>::new(c.clone()).unwrap();
        let (_, eval) = datasets(&c).unwrap();
        let acc = evaluate(&m, &eval).unwrap().token_accuracy;
        // 1600 target tokens over 11 numeric symbols
        let p = 1.0 / 11.0;
        let sigma = (p * (1.0 - p) / 1600.0).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma + 0.05, "accuracy {acc}");
    }

    #[test]
    fn evaluation_loss_equals_cross_entropy() {
        let c = small(Variant::Dense, Task::Reverse);
        let m = Model::<f64>::new(c.clone()).unwrap();
        let (_, eval) = datasets(&c).unwrap();
        let part = &eval[..c.batch];
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let refs: Vec<_> = part.iter().collect();
        let out = m.batch_loss(&mut g, &bound, &refs).unwrap();
        let direct = g.cross_entropy(out.target_logits, &out.targets).unwrap();
        assert!((evaluate(&m, part).unwrap().loss - g.value(direct).item()).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_reports_init_only() {
        let c = ModelConfig {
            epochs: 0,
            ..small(Variant::ButterflyMoe, Task::Copy)
        };
        let mut m = Model::<f32>::new(c.clone()).unwrap();
        let (tr, ev) = datasets(&c).unwrap();
        let r = train(&mut m, &tr, &ev, |_| {}).unwrap();
        assert_eq!(r.epochs.len(), 1);
        assert!(r.epochs[0].train_loss.is_none() && r.epochs[0].quant_error.is_some());
    }

    #[test]
    fn zero_lr_keeps_parameters_and_loss() {
        let c = ModelConfig {
            lr: 0.0,
            ..small(Variant::ButterflyMoe, Task::Copy)
        };
        let mut m = Model::<f64>::new(c.clone()).unwrap();
        let before = m.clone();
        let (tr, ev) = datasets(&c).unwrap();
        let r = train(&mut m, &tr, &ev, |_| {}).unwrap();
        assert_eq!(m, before);
        assert_eq!(r.epochs[0].eval_loss, r.epochs[2].eval_loss);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        for v in [Variant::Dense, Variant::StandardMoe, Variant::ButterflyMoe] {
            let c = ModelConfig {
                epochs: 3,
                ..small(v, Task::Copy)
            };
            let (tr, ev) = datasets(&c).unwrap();
            let run = || {
                let mut m = Model::<f32>::new(c.clone()).unwrap();
                train(&mut m, &tr, &ev, |_| {}).unwrap()
            };
            let a = run();
            assert_eq!(a, run());
            assert!(a.last().eval_loss < a.initial().eval_loss, "{v}: {:?}", a.epochs);
        }
    }
}
