//! Data preparation, the training loop and evaluation.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{rng, Config, Stream};
use crate::data::{load_jsonl, synth_gen, tokenize, Encoded, Payload, TaskSample, Vocab};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::metrics::{Accumulator, MetricsReport};
use crate::model::{BidenModel, Prediction, Scored};
use crate::numkit::{ParamGrads, ParamStore, Real};
use crate::optim::{grad_norm, AdamW, LinearSchedule};

/// Tokenized train/dev sets and the vocabulary built from the train set.
pub struct Prepared {
    pub vocab: Vocab,
    pub train: Vec<Encoded>,
    pub dev: Vec<Encoded>,
    /// `id: reason` for samples dropped during tokenization.
    pub rejected: Vec<String>,
}

/// Default vocabulary cap.
pub const VOCAB_SIZE: usize = 2000;

/// Train and dev samples: the configured JSONL files, or generated data.
pub fn load_samples(cfg: &Config) -> Result<(Vec<TaskSample>, Vec<TaskSample>)> {
    let (train, dev) = match (&cfg.data.train, &cfg.data.dev) {
        (Some(t), d) => (
            load_jsonl(t)?,
            d.as_ref().map(load_jsonl).transpose()?.unwrap_or_default(),
        ),
        (None, Some(_)) => return Err(Error::Config("a dev path needs a train path".into())),
        (None, None) => {
            let s = &cfg.data.synth;
            let seed = s.seed.unwrap_or(cfg.seed);
            let task = cfg.synth_task();
            // Dev data comes from a disjoint seed.
            (
                synth_gen(task, s.train_size, seed, &s.generator),
                synth_gen(task, s.dev_size, seed ^ 0x5eed_d15c, &s.generator),
            )
        }
    };
    for s in train.iter().chain(&dev) {
        if s.task.kind() != cfg.task {
            return Err(Error::Config(format!(
                "sample {} is {} but the config task is {}",
                s.dialogue.id,
                s.task.kind().as_str(),
                cfg.task.as_str()
            )));
        }
    }
    Ok((train, dev))
}

/// Tokenizes `samples`, collecting rejections instead of failing.
pub fn encode_all(samples: &[TaskSample], vocab: &Vocab, cfg: &Config, rejected: &mut Vec<String>) -> Vec<Encoded> {
    samples
        .iter()
        .filter_map(|s| match tokenize(s, vocab, &cfg.data.tokenize) {
            Ok(e) => Some(e),
            Err(e) => {
                rejected.push(e.to_string());
                None
            }
        })
        .collect()
}

pub fn prepare(cfg: &Config) -> Result<Prepared> {
    let (train, dev) = load_samples(cfg)?;
    let vocab = Vocab::build(&train, cfg.data.vocab_size.unwrap_or(VOCAB_SIZE));
    prepare_with_vocab(cfg, vocab, &train, &dev)
}

pub fn prepare_with_vocab(cfg: &Config, vocab: Vocab, train: &[TaskSample], dev: &[TaskSample]) -> Result<Prepared> {
    let mut rejected = Vec::new();
    let train = encode_all(train, &vocab, cfg, &mut rejected);
    let dev = encode_all(dev, &vocab, cfg, &mut rejected);
    if train.is_empty() {
        return Err(Error::Config("no usable training samples".into()));
    }
    Ok(Prepared {
        vocab,
        train,
        dev,
        rejected,
    })
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Start {
        seed: u64,
        config_hash: String,
        params: usize,
        train: usize,
        dev: usize,
        steps: usize,
    },
    Step {
        step: usize,
        lr: f64,
        loss: f64,
    },
    TrainMetric {
        step: usize,
        value: f64,
    },
    Epoch {
        epoch: usize,
        step: usize,
        train_loss: f64,
        dev: Option<MetricsReport>,
    },
    Done {
        steps: usize,
        best_epoch: Option<usize>,
        stopped_early: bool,
    },
}

pub struct TrainOutcome<T: Real> {
    /// Parameters of the best dev epoch (the last epoch without dev data).
    pub model: BidenModel<T>,
    pub steps: usize,
    pub best_dev: Option<MetricsReport>,
    /// Last measured train metric, when a target was configured.
    pub train_metric: Option<f64>,
    pub losses: Vec<f64>,
}

/// Gradients of the mean loss over `batch`, plus that mean.
pub fn batch_gradients<T: Real>(
    model: &BidenModel<T>,
    batch: &[&Encoded],
    dropout: &mut Dropout<'_>,
) -> Result<(ParamGrads<T>, f64)> {
    let mut acc = ParamGrads::new(model.store.len());
    let scale = T::one() / T::from_f64(batch.len() as f64);
    let mut total = 0.0;
    for sample in batch {
        let mut tape = model.tape();
        let (loss, _) = model.loss(&mut tape, sample, dropout)?;
        total += tape.value(loss).item().as_f64();
        tape.backward(loss)?.accumulate_into(&mut acc, scale);
    }
    Ok((acc, total / batch.len() as f64))
}

fn clip<T: Real>(grads: &mut ParamGrads<T>, max_norm: f64) {
    let norm = grad_norm(grads);
    if norm > max_norm {
        grads.scale(T::from_f64(max_norm / norm));
    }
}

/// Total optimizer steps for `n` training samples.
pub fn total_steps(cfg: &Config, n: usize) -> usize {
    let per_epoch = n.div_ceil(cfg.train.batch_size);
    cfg.train.max_steps.unwrap_or(per_epoch * cfg.train.epochs)
}

/// Trains from scratch on `data`.
pub fn train<T: Real>(cfg: &Config, data: &Prepared, log: &mut dyn FnMut(&LogEvent)) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let model = BidenModel::new(
        cfg.model.clone(),
        cfg.task,
        data.vocab.len(),
        &mut rng(cfg.seed, Stream::Init),
    )?;
    train_model(cfg, model, data, log)
}

/// Continues training `model` on `data`.
pub fn train_model<T: Real>(
    cfg: &Config,
    mut model: BidenModel<T>,
    data: &Prepared,
    log: &mut dyn FnMut(&LogEvent),
) -> Result<TrainOutcome<T>> {
    let tc = &cfg.train;
    let total = total_steps(cfg, data.train.len());
    let schedule = LinearSchedule::new(tc.lr, tc.warmup_frac, total);
    let mut opt = AdamW::new(&model.store, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    let mut shuffle_rng = rng(cfg.seed, Stream::Shuffle);
    let mut drop_rng = rng(cfg.seed, Stream::Dropout);
    log(&LogEvent::Start {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        params: model.store.num_scalars(),
        train: data.train.len(),
        dev: data.dev.len(),
        steps: total,
    });

    let mut step = 0;
    let mut best: Option<(MetricsReport, ParamStore<T>, usize)> = None;
    let mut losses = Vec::new();
    let mut train_metric = None;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epoch = 0;
    'outer: while step < total {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = (0.0, 0usize);
        for chunk in order.chunks(tc.batch_size) {
            if step >= total {
                break;
            }
            let batch: Vec<&Encoded> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut dropout = Dropout {
                rate: cfg.model.dropout,
                rng: Some(&mut drop_rng),
            };
            let (mut grads, loss) = batch_gradients(&model, &batch, &mut dropout)?;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite { step, loss });
            }
            if let Some(c) = tc.clip_norm {
                clip(&mut grads, c);
            }
            let lr = schedule.lr(step);
            opt.step(&mut model.store, &grads, lr);
            losses.push(loss);
            epoch_loss = (epoch_loss.0 + loss, epoch_loss.1 + 1);
            log(&LogEvent::Step { step, lr, loss });
            step += 1;
            if let Some(target) = tc.target_train_metric {
                if step % tc.eval_every.max(1) == 0 || step == total {
                    let value = train_set_metric(&model, &data.train)?;
                    train_metric = Some(value);
                    log(&LogEvent::TrainMetric { step, value });
                    if value >= target {
                        stopped_early = true;
                        break 'outer;
                    }
                }
            }
        }
        let dev = if data.dev.is_empty() {
            None
        } else {
            Some(evaluate(&model, &data.vocab, &data.dev)?)
        };
        if let Some(report) = &dev {
            if best.as_ref().is_none_or(|(b, _, _)| report.primary() > b.primary()) {
                best = Some((report.clone(), model.store.clone(), epoch));
            }
        }
        log(&LogEvent::Epoch {
            epoch,
            step,
            train_loss: epoch_loss.0 / epoch_loss.1.max(1) as f64,
            dev,
        });
        epoch += 1;
    }
    let best_epoch = best.as_ref().map(|b| b.2);
    let best_dev = match best {
        Some((report, store, _)) if !stopped_early => {
            model.store = store;
            Some(report)
        }
        Some((report, _, _)) => Some(report),
        None => None,
    };
    log(&LogEvent::Done {
        steps: step,
        best_epoch,
        stopped_early,
    });
    Ok(TrainOutcome {
        model,
        steps: step,
        best_dev,
        train_metric,
        losses,
    })
}

/// The fitting metric on training data: R@1, exact match, or teacher-forced
/// next-token accuracy.
pub fn train_set_metric<T: Real>(model: &BidenModel<T>, data: &[Encoded]) -> Result<f64> {
    let mut hits = 0.0;
    let mut total = 0.0;
    for sample in data {
        let mut tape = model.tape();
        let (_, scored) = model.loss(&mut tape, sample, &mut Dropout::off())?;
        match scored {
            Scored::Selection { log_probs, label } => {
                total += 1.0;
                if crate::metrics::rank_of(&log_probs, label) == 1 {
                    hits += 1.0;
                }
            }
            Scored::Qa {
                start,
                end,
                allowed,
                span,
            } => {
                total += 1.0;
                if crate::heads::qa::best_span(&start, &end, &allowed, model.config.max_span) == Some(span) {
                    hits += 1.0;
                }
            }
            Scored::Summary { correct, total: t } => {
                hits += correct as f64;
                total += t as f64;
            }
        }
    }
    Ok(if total == 0.0 { 0.0 } else { hits / total })
}

/// Task metrics of `model` on `data`.
pub fn evaluate<T: Real>(model: &BidenModel<T>, vocab: &Vocab, data: &[Encoded]) -> Result<MetricsReport> {
    let mut acc = Accumulator::new(model.task);
    for sample in data {
        let pred = model.predict(sample)?;
        match (&sample.payload, pred) {
            (Payload::Selection { label }, Prediction::Scores(s)) => acc.push_ranking(&s, *label),
            (Payload::Qa { answer, .. }, Prediction::Span { tokens, .. }) => {
                let words: Vec<String> = tokens.iter().map(|&t| vocab.token(t).to_string()).collect();
                acc.push_span(&words, answer);
            }
            (Payload::Summary { references, .. }, Prediction::Tokens(t)) => {
                let words: Vec<String> = t.iter().map(|&t| vocab.token(t).to_string()).collect();
                acc.push_summary(&words, references);
            }
            _ => {
                return Err(Error::Config(format!(
                    "sample {} does not match the model's task {}",
                    sample.id,
                    model.task.as_str()
                )))
            }
        }
    }
    Ok(acc.finish())
}
