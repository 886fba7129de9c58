//! Dialogue samples, tokenization, JSONL ingestion and synthetic corpora.

mod jsonl;
mod synth;
mod tokenizer;

pub use jsonl::{load_jsonl, parse_jsonl, to_jsonl_line, write_jsonl};
pub use synth::{synth_gen, SynthConfig, SynthTask};
pub use tokenizer::{
    detokenize, history_layout, split_words, tokenize, Encoded, Payload, TokenFlags, TokenizeConfig, TokenizedContext,
    Vocab, BOS, CLS, EOS, PAD, QST, RSP, SEP, SPEAKER_SLOTS, UNK,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

impl Utterance {
    pub fn new(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Utterance {
            speaker: speaker.into(),
            text: text.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        if self.utterances.is_empty() {
            return Err(Error::Rejected {
                id: self.id.clone(),
                reason: "dialogue has no utterances".into(),
            });
        }
        if let Some(i) = self.utterances.iter().position(|u| split_words(&u.text).is_empty()) {
            return Err(Error::Rejected {
                id: self.id.clone(),
                reason: format!("utterance {i} has empty text"),
            });
        }
        Ok(())
    }
}

/// Inclusive `[start, end]` token positions in the history layout
/// (`[CLS] spk w… [SEP] spk w… [SEP] …`).
pub type Span = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Task {
    ResponseSelection { candidates: Vec<String>, label: usize },
    ExtractiveQa { question: String, answer_span: Span },
    Summarization { references: Vec<String> },
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::ResponseSelection { .. } => TaskKind::ResponseSelection,
            Task::ExtractiveQa { .. } => TaskKind::ExtractiveQa,
            Task::Summarization { .. } => TaskKind::Summarization,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    ResponseSelection,
    ExtractiveQa,
    Summarization,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::ResponseSelection => "response_selection",
            TaskKind::ExtractiveQa => "extractive_qa",
            TaskKind::Summarization => "summarization",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSample {
    pub dialogue: Dialogue,
    pub task: Task,
}

impl TaskSample {
    /// Checks every per-task invariant.
    pub fn validate(&self) -> Result<()> {
        self.dialogue.validate()?;
        let reject = |reason: String| Error::Rejected {
            id: self.dialogue.id.clone(),
            reason,
        };
        match &self.task {
            Task::ResponseSelection { candidates, label } => {
                if candidates.len() < 2 {
                    return Err(reject(format!("need at least 2 candidates, got {}", candidates.len())));
                }
                if *label >= candidates.len() {
                    return Err(reject(format!(
                        "label {label} out of range for {} candidates",
                        candidates.len()
                    )));
                }
                if let Some(i) = candidates.iter().position(|c| split_words(c).is_empty()) {
                    return Err(reject(format!("candidate {i} is empty")));
                }
            }
            Task::ExtractiveQa {
                question,
                answer_span: (s, e),
            } => {
                if split_words(question).is_empty() {
                    return Err(reject("question is empty".into()));
                }
                let layout = history_layout(&self.dialogue);
                if s > e {
                    return Err(reject(format!("answer span start {s} > end {e}")));
                }
                if *e >= layout.len() {
                    return Err(reject(format!(
                        "answer span [{s}, {e}] outside the {}-token history",
                        layout.len()
                    )));
                }
                if layout[*s].1.is_none() || layout[*e].1.is_none() {
                    return Err(reject(format!(
                        "answer span [{s}, {e}] starts or ends on a special token"
                    )));
                }
            }
            Task::Summarization { references } => {
                if references.is_empty() {
                    return Err(reject("summarization needs at least one reference".into()));
                }
                if references.iter().any(|r| split_words(r).is_empty()) {
                    return Err(reject("empty reference summary".into()));
                }
            }
        }
        Ok(())
    }

    /// Answer span computed from answer text inside a given utterance: the
    /// first occurrence of its word sequence.
    pub fn locate_answer(dialogue: &Dialogue, text: &str, utterance: usize) -> Option<Span> {
        let want = split_words(text);
        if want.is_empty() {
            return None;
        }
        let layout = history_layout(dialogue);
        let positions: Vec<(usize, &str)> = layout
            .iter()
            .enumerate()
            .filter_map(|(pos, (u, w))| match w {
                Some(w) if *u == utterance => Some((pos, w.as_str())),
                _ => None,
            })
            .collect();
        positions.windows(want.len()).find_map(|win| {
            win.iter()
                .zip(&want)
                .all(|((_, a), b)| a == b)
                .then(|| (win[0].0, win[want.len() - 1].0))
        })
    }
}
