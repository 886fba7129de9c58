//! End-to-end gradient check of every task pipeline against central finite
//! differences, at tiny dimensions and in f64.

use serde::Serialize;

use crate::config::{rng, Stream};
use crate::data::{tokenize, Dialogue, Encoded, Task, TaskKind, TaskSample, TokenizeConfig, Utterance, Vocab};
use crate::encoder::Dropout;
use crate::error::Result;
use crate::heads::RnnKind;
use crate::model::{BidenModel, InitMode, ModelConfig};
use crate::numkit::GradFault;

/// Largest allowed per-tensor relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Gradient norms below this are compared absolutely. Some gradients are
/// exactly zero (a bias shared by all candidates cancels in the softmax), and
/// their finite differences are pure rounding noise.
pub const GRAD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Central-difference step.
    pub eps: f64,
    pub tolerance: f64,
    /// Broken backward rule to plant, for testing the checker itself.
    pub fault: Option<GradFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            seed: 0,
            eps: 1e-5,
            tolerance: TOLERANCE,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    /// `‖g_analytic − g_numeric‖ / max(‖g_analytic‖ + ‖g_numeric‖, GRAD_FLOOR)`.
    pub rel_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PipelineCheck {
    pub pipeline: String,
    pub task: TaskKind,
    pub tokens: usize,
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub pipelines: Vec<PipelineCheck>,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Tiny dims: d = 8, two heads, one encoder layer.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        d_g: 4,
        decoder_layers: 1,
        decoder_heads: 2,
        max_len: 16,
        max_target_len: 8,
        max_span: 4,
        ..ModelConfig::default()
    }
}

fn dialogue(words: &[&str]) -> Dialogue {
    Dialogue {
        id: "tiny".into(),
        utterances: words
            .iter()
            .enumerate()
            .map(|(i, w)| Utterance::new(["ann", "ben"][i % 2], *w))
            .collect(),
    }
}

/// A handmade sample of `task` with at most ten tokens per sequence.
pub fn tiny_sample(task: TaskKind) -> TaskSample {
    match task {
        TaskKind::ResponseSelection => TaskSample {
            dialogue: dialogue(&["red", "blue"]),
            task: Task::ResponseSelection {
                candidates: vec!["green".into(), "blue".into()],
                label: 1,
            },
        },
        TaskKind::ExtractiveQa => {
            let d = dialogue(&["red", "blue"]);
            let span = TaskSample::locate_answer(&d, "blue", 1).expect("answer present");
            TaskSample {
                dialogue: d,
                task: Task::ExtractiveQa {
                    question: "blue".into(),
                    answer_span: span,
                },
            }
        }
        TaskKind::Summarization => TaskSample {
            dialogue: dialogue(&["red", "blue", "green"]),
            task: Task::Summarization {
                references: vec!["red green".into()],
            },
        },
    }
}

/// The checked pipelines: each task with the full model, plus the variants
/// whose backward paths differ (copy init, mean-pool fusion, max readout,
/// token-level RNN baselines).
pub fn pipelines() -> Vec<(String, TaskKind, ModelConfig)> {
    let base = tiny_model_config();
    let mut out = vec![
        ("selection".to_string(), TaskKind::ResponseSelection, base.clone()),
        ("qa".to_string(), TaskKind::ExtractiveQa, base.clone()),
        ("summary".to_string(), TaskKind::Summarization, base.clone()),
    ];
    let mut copy = base.clone();
    copy.init = InitMode::CopyLastEncoderLayer;
    out.push(("summary+copy_init".into(), TaskKind::Summarization, copy));
    let mut mean = base.clone();
    mean.ablation.mean_pool_fusion = true;
    out.push(("qa+mean_pool_fusion".into(), TaskKind::ExtractiveQa, mean));
    let mut max = base.clone();
    max.readout = crate::heads::Readout::MaxStates;
    out.push(("selection+max_readout".into(), TaskKind::ResponseSelection, max));
    for kind in [RnnKind::Gru, RnnKind::Lstm] {
        let mut rnn = base.clone();
        rnn.ablation.bi_rnn_baseline = Some(kind);
        out.push((
            format!("selection+bi_{kind:?}").to_lowercase(),
            TaskKind::ResponseSelection,
            rnn,
        ));
    }
    out
}

fn encode(task: TaskKind, cfg: &ModelConfig) -> Result<(Vocab, Encoded)> {
    let sample = tiny_sample(task);
    let vocab = Vocab::build(std::slice::from_ref(&sample), 100);
    let tc = TokenizeConfig {
        max_len: cfg.max_len,
        max_target_len: cfg.max_target_len,
    };
    let enc = tokenize(&sample, &vocab, &tc)?;
    Ok((vocab, enc))
}

fn loss_of(model: &BidenModel<f64>, sample: &Encoded) -> Result<f64> {
    let mut tape = model.tape();
    let (loss, _) = model.loss(&mut tape, sample, &mut Dropout::off())?;
    Ok(tape.value(loss).item())
}

/// Checks one pipeline.
pub fn check_pipeline(name: &str, task: TaskKind, cfg: ModelConfig, opts: &GradcheckOptions) -> Result<PipelineCheck> {
    let (vocab, sample) = encode(task, &cfg)?;
    let mut model = BidenModel::<f64>::new(cfg, task, vocab.len(), &mut rng(opts.seed, Stream::Init))?;
    let analytic = {
        let mut tape = model.tape();
        tape.inject_fault(opts.fault);
        let (loss, _) = model.loss(&mut tape, &sample, &mut Dropout::off())?;
        tape.backward(loss)?
    };
    let ids: Vec<_> = model.store.ids().collect();
    let mut tensors = Vec::with_capacity(ids.len());
    for id in ids {
        let len = model.store.get(id).len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + opts.eps;
            let plus = loss_of(&model, &sample)?;
            model.store.get_mut(id).data_mut()[j] = orig - opts.eps;
            let minus = loss_of(&model, &sample)?;
            model.store.get_mut(id).data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * opts.eps);
        }
        let zeros = vec![0.0; len];
        let a = analytic.param(id).map_or(zeros.as_slice(), |g| g.data());
        let diff = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel_err = diff / (norm(a) + norm(&numeric)).max(GRAD_FLOOR);
        tensors.push(TensorCheck {
            name: model.store.name(id).to_string(),
            entries: len,
            rel_err,
        });
    }
    let max_rel_err = tensors.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    Ok(PipelineCheck {
        pipeline: name.to_string(),
        task,
        tokens: sample.contexts.iter().map(|c| c.len()).max().unwrap_or(0),
        tensors,
        max_rel_err,
        passed: max_rel_err < opts.tolerance,
    })
}

/// Checks every pipeline of [`pipelines`].
pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let pipelines = pipelines()
        .into_iter()
        .map(|(name, task, cfg)| check_pipeline(&name, task, cfg, opts))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = pipelines.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed: opts.seed,
        tolerance: opts.tolerance,
        passed: pipelines.iter().all(|p| p.passed),
        pipelines,
        max_rel_err,
    })
}
