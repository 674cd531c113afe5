use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::evaluate;
use super::optim::{clip_grad_norm, Adam};
use crate::corpus::{build_vocab, vocab_from_tokens, Process, Vocabulary, START_ID};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Parameters;
use crate::templating::Templater;
use crate::transformer::{
    backward, forward, lm_loss, ForwardOptions, MaskMode, ModelConfig, OutputGrads, Precision,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean total loss over the epoch's processes, before each update.
    pub train_loss: f64,
    pub task_loss: f64,
    pub lm_loss: f64,
    /// Mean pre-clipping gradient norm over the epoch's steps.
    pub grad_norm: f64,
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best checkpoint by dev metric, or the last one without a dev set.
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| Error::Validation(format!("cannot start worker threads: {e}")))
}

fn item_seed(seed: u64, epoch: usize, item: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (item as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

fn same_architecture(a: &ModelConfig, b: &ModelConfig) -> bool {
    (
        a.vocab_size,
        a.d_model,
        a.n_heads,
        a.n_layers,
        a.d_ff,
        a.max_positions,
        a.mask_mode,
    ) == (
        b.vocab_size,
        b.d_model,
        b.n_heads,
        b.n_layers,
        b.d_ff,
        b.max_positions,
        b.mask_mode,
    )
}

struct Step {
    loss: f64,
    task: f64,
    lm: f64,
}

/// Sums per-item gradients in item order, so the result does not depend on
/// how the items were scheduled across threads.
fn apply_batch(
    model: &mut Model,
    opt: &mut Adam,
    cfg: &TrainConfig,
    results: Vec<Result<(Step, Model)>>,
) -> Result<(Vec<Step>, f64)> {
    let n = results.len() as f64;
    let mut total = model.zeros_like();
    let mut steps = Vec::with_capacity(results.len());
    for r in results {
        let (s, g) = r?;
        if !s.loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        total.add_scaled(&g, 1.0 / n);
        steps.push(s);
    }
    let norm = clip_grad_norm(&mut total, cfg.grad_clip);
    opt.update(model, &total);
    if model.config.precision == Precision::F32 {
        model.round_to_f32();
    }
    Ok((steps, norm))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Optimizes `L_task + lm_lambda * L_lm` on labeled processes.
///
/// A compatible `init` checkpoint supplies the vocabulary and encoder
/// weights; its head is reused only when the model spec matches.
pub fn finetune(
    cfg: &TrainConfig,
    train: &[Process],
    dev: Option<&[Process]>,
    init: Option<&Checkpoint>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = cfg.spec()?;
    if train.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    for p in train.iter().chain(dev.unwrap_or_default()) {
        if p.task != cfg.task {
            return Err(Error::Incompatible(format!(
                "process `{}` is a {} process but the config trains {}",
                p.id, p.task, cfg.task
            )));
        }
    }
    let vocab = match init {
        Some(c) => c.vocab.clone(),
        None => build_vocab(train, cfg.min_count),
    };
    let mcfg = cfg.model_config(vocab.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(&mcfg, spec, &mut rng)?;
    if let Some(c) = init {
        if !same_architecture(&c.model.config, &mcfg) {
            return Err(Error::Incompatible(format!(
                "initial checkpoint architecture {:?} does not match the config {:?}",
                c.model.config, mcfg
            )));
        }
        model.encoder = c.model.encoder.clone();
        if c.model.spec == spec {
            model.head = c.model.head.clone();
            model.transitions = c.model.transitions.clone();
        }
        if mcfg.precision == Precision::F32 {
            model.round_to_f32();
        }
    }
    if cfg.lm_lambda > 0.0 && mcfg.mask_mode == MaskMode::Bidirectional {
        log::warn!("next-token loss is undefined for a bidirectional encoder; training on the task loss only");
    }
    let templater = Templater::new(cfg.max_len);
    let pool = thread_pool(cfg.threads)?;
    let mut opt = Adam::new(cfg.learning_rate, model.num_params());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut losses, mut tasks, mut lms, mut norms) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for batch in order.chunks(cfg.batch_size) {
            let current = &model;
            let results: Vec<Result<(Step, Model)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut item_rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, i));
                        let r = (mcfg.dropout > 0.0).then_some(&mut item_rng as &mut dyn RngCore);
                        let out = current.loss_and_grad(
                            &train[i],
                            &vocab,
                            &templater,
                            cfg.lm_lambda,
                            r,
                        )?;
                        Ok((
                            Step {
                                loss: out.loss,
                                task: out.task_loss,
                                lm: out.lm_loss,
                            },
                            out.grads,
                        ))
                    })
                    .collect()
            });
            let (steps, norm) = apply_batch(&mut model, &mut opt, cfg, results)?;
            norms.push(norm);
            for s in steps {
                losses.push(s.loss);
                tasks.push(s.task);
                lms.push(s.lm);
            }
        }
        let dev_metric = match dev {
            Some(d) if !d.is_empty() => evaluate(&model, &vocab, d, &templater)?.0.dev_metric(),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: mean(&losses),
            task_loss: mean(&tasks),
            lm_loss: mean(&lms),
            grad_norm: mean(&norms),
            dev_metric,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} (task {:.5}, lm {:.5}) dev {:?}",
            record.train_loss,
            record.task_loss,
            record.lm_loss,
            record.dev_metric
        );
        history.push(record);
        if let Some(m) = dev_metric {
            if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                best = Some((m, epoch, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if cfg.patience.is_some_and(|p| since_best >= p) {
                log::info!("no dev improvement for {since_best} epochs; stopping");
                break;
            }
        }
    }
    let last = history.len();
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, last),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, vocab)?,
        history,
        best_epoch,
    })
}

/// Token lists for LM pre-training: every process's steps joined by
/// `[SEP]`, the same way the templates join history.
pub fn lm_documents(corpus: &[Process]) -> Vec<Vec<String>> {
    corpus
        .iter()
        .map(|p| {
            let mut doc = Vec::new();
            for (i, s) in p.steps.iter().enumerate() {
                if i > 0 {
                    doc.push(crate::corpus::SEP.to_string());
                }
                doc.extend(s.tokens.iter().cloned());
            }
            doc
        })
        .collect()
}

/// Next-token pre-training on unlabeled token sequences.
///
/// Each document is fed as `[START] tokens…`; the task loss is absent, so
/// `lm_lambda` plays no role.
pub fn pretrain_lm(cfg: &TrainConfig, docs: &[Vec<String>]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.model.mask_mode != MaskMode::Causal {
        return Err(Error::UnsupportedObjective(
            "language-model pre-training requires a causal encoder".into(),
        ));
    }
    if docs.iter().all(|d| d.is_empty()) {
        return Err(Error::Validation(
            "pre-training corpus has no tokens".into(),
        ));
    }
    if cfg.lm_lambda != 0.0 {
        log::warn!(
            "lm_lambda = {} is ignored during pre-training",
            cfg.lm_lambda
        );
    }
    let vocab = vocab_from_tokens(docs.iter().flatten(), cfg.min_count);
    let mcfg = cfg.model_config(vocab.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(&mcfg, cfg.spec()?, &mut rng)?;
    let ids: Vec<Vec<usize>> = docs
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| {
            let mut v = vec![START_ID];
            v.extend(vocab.ids(d));
            v.truncate(mcfg.max_positions);
            v
        })
        .collect();
    let pool = thread_pool(cfg.threads)?;
    let mut opt = Adam::new(cfg.learning_rate, model.num_params());
    let mut order: Vec<usize> = (0..ids.len()).collect();
    let mut history = Vec::new();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut losses, mut norms) = (Vec::new(), Vec::new());
        for batch in order.chunks(cfg.batch_size) {
            let current = &model;
            let results: Vec<Result<(Step, Model)>> = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut item_rng = ChaCha8Rng::seed_from_u64(item_seed(cfg.seed, epoch, i));
                        let opts = ForwardOptions {
                            cache: true,
                            rng: (mcfg.dropout > 0.0).then_some(&mut item_rng as &mut dyn RngCore),
                        };
                        let trace = forward(&current.encoder, &current.config, &ids[i], opts)?;
                        let lm = lm_loss(&trace, &ids[i])?;
                        let back = backward(
                            &current.encoder,
                            &current.config,
                            &trace,
                            &OutputGrads {
                                d_states: None,
                                d_logits: Some(lm.d_logits),
                            },
                        )?;
                        let mut g = current.zeros_like();
                        g.encoder = back.grads;
                        Ok((
                            Step {
                                loss: lm.loss,
                                task: 0.0,
                                lm: lm.loss,
                            },
                            g,
                        ))
                    })
                    .collect()
            });
            let (steps, norm) = apply_batch(&mut model, &mut opt, cfg, results)?;
            norms.push(norm);
            losses.extend(steps.iter().map(|s| s.loss));
        }
        let record = EpochRecord {
            epoch,
            train_loss: mean(&losses),
            task_loss: 0.0,
            lm_loss: mean(&losses),
            grad_norm: mean(&norms),
            dev_metric: None,
        };
        log::info!("epoch {epoch}: lm loss {:.5}", record.lm_loss);
        history.push(record);
    }
    let best_epoch = history.len();
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(model, vocab)?,
        history,
        best_epoch,
    })
}

/// Vocabulary of a corpus as the trainer would build it.
pub fn training_vocab(cfg: &TrainConfig, train: &[Process]) -> Vocabulary {
    build_vocab(train, cfg.min_count)
}
