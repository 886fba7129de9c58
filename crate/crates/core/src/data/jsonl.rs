use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{split_words, Dialogue, Task, TaskSample, Utterance};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSample {
    id: String,
    utterances: Vec<Utterance>,
    task: RawTask,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum RawTask {
    ResponseSelection {
        candidates: Vec<String>,
        label: usize,
    },
    ExtractiveQa {
        question: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer_span: Option<[usize; 2]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer_text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer_utterance: Option<usize>,
    },
    Summarization {
        references: Vec<String>,
    },
}

fn from_raw(raw: RawSample) -> std::result::Result<TaskSample, String> {
    let dialogue = Dialogue {
        id: raw.id,
        utterances: raw.utterances,
    };
    let task = match raw.task {
        RawTask::ResponseSelection { candidates, label } => Task::ResponseSelection { candidates, label },
        RawTask::Summarization { references } => Task::Summarization { references },
        RawTask::ExtractiveQa {
            question,
            answer_span,
            answer_text,
            answer_utterance,
        } => {
            let span = match (answer_span, answer_text, answer_utterance) {
                (Some([s, e]), _, _) => (s, e),
                (None, Some(text), Some(u)) => TaskSample::locate_answer(&dialogue, &text, u)
                    .ok_or_else(|| format!("answer_text {text:?} not found in utterance {u}"))?,
                _ => {
                    return Err("extractive_qa needs `answer_span` or both `answer_text` and `answer_utterance`".into())
                }
            };
            Task::ExtractiveQa {
                question,
                answer_span: span,
            }
        }
    };
    let sample = TaskSample { dialogue, task };
    sample.validate().map_err(|e| e.to_string())?;
    Ok(sample)
}

/// Parses JSONL text. Blank lines are skipped; the first invalid line aborts
/// with its 1-based line number.
pub fn parse_jsonl(text: &str) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = i + 1;
        let raw: RawSample = serde_json::from_str(line).map_err(|e| Error::Data {
            line: line_no,
            msg: e.to_string(),
        })?;
        out.push(from_raw(raw).map_err(|msg| Error::Data { line: line_no, msg })?);
    }
    Ok(out)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<TaskSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

/// Serializes one sample. QA samples carry both the span and the
/// `answer_text`/`answer_utterance` pair it was derived from.
pub fn to_jsonl_line(sample: &TaskSample) -> Result<String> {
    let task = match &sample.task {
        Task::ResponseSelection { candidates, label } => RawTask::ResponseSelection {
            candidates: candidates.clone(),
            label: *label,
        },
        Task::Summarization { references } => RawTask::Summarization {
            references: references.clone(),
        },
        Task::ExtractiveQa {
            question,
            answer_span: (s, e),
        } => {
            let layout = super::history_layout(&sample.dialogue);
            let words: Vec<String> = (*s..=*e).filter_map(|p| layout[p].1.clone()).collect();
            debug_assert!(!words.is_empty() && split_words(&words.join(" ")) == words);
            RawTask::ExtractiveQa {
                question: question.clone(),
                answer_span: Some([*s, *e]),
                answer_text: Some(words.join(" ")),
                answer_utterance: Some(layout[*s].0),
            }
        }
    };
    let raw = RawSample {
        id: sample.dialogue.id.clone(),
        utterances: sample.dialogue.utterances.clone(),
        task,
    };
    Ok(serde_json::to_string(&raw)?)
}

pub fn write_jsonl(path: impl AsRef<Path>, samples: &[TaskSample]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for s in samples {
        buf.extend_from_slice(to_jsonl_line(s)?.as_bytes());
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
