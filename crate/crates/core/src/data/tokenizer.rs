use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Dialogue, Span, Task, TaskSample};
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
/// Speaker slot of an appended question.
pub const QST: usize = 6;
/// Speaker slot of an appended response candidate.
pub const RSP: usize = 7;
/// Number of per-dialogue speaker slots; further speakers wrap around.
pub const SPEAKER_SLOTS: usize = 8;
const FIRST_SPEAKER: usize = 8;
const RESERVED: usize = FIRST_SPEAKER + SPEAKER_SLOTS;

/// Lowercases and splits into alphanumeric runs and single punctuation marks.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() || ch == '_' || ch == '\'' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Position-by-position view of the history layout: utterance index and the
/// word for content tokens, `None` for `[CLS]`, speaker and `[SEP]` tokens.
pub fn history_layout(dialogue: &Dialogue) -> Vec<(usize, Option<String>)> {
    let mut out = vec![(0, None)];
    for (u, utt) in dialogue.utterances.iter().enumerate() {
        out.push((u, None));
        out.extend(split_words(&utt.text).into_iter().map(|w| (u, Some(w))));
        out.push((u, None));
    }
    out
}

/// Token vocabulary with reserved ids for specials and speaker slots.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    fn reserved() -> Vec<String> {
        let mut t: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "[QST]", "[RSP]"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        t.extend((0..SPEAKER_SLOTS).map(|i| format!("[SPK{i}]")));
        t
    }

    /// Builds a vocabulary from every text field of `samples`, most frequent
    /// first (ties broken lexicographically), capped at `max_size` entries
    /// including the reserved ones.
    pub fn build(samples: &[TaskSample], max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut add = |text: &str| {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        };
        for s in samples {
            for u in &s.dialogue.utterances {
                add(&u.text);
            }
            match &s.task {
                Task::ResponseSelection { candidates, .. } => candidates.iter().for_each(|c| add(c)),
                Task::ExtractiveQa { question, .. } => add(question),
                Task::Summarization { references } => references.iter().for_each(|r| add(r)),
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = Self::reserved();
        let room = max_size.saturating_sub(tokens.len());
        tokens.extend(words.into_iter().take(room).map(|(w, _)| w));
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or("[UNK]", String::as_str)
    }

    pub fn is_reserved(id: usize) -> bool {
        id < RESERVED
    }

    pub fn speaker_slot(slot: usize) -> usize {
        FIRST_SPEAKER + slot % SPEAKER_SLOTS
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id(w)).collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFlags {
    pub pad: bool,
    pub cls: bool,
    pub sep: bool,
    pub speaker: bool,
    /// Any token of an appended question utterance.
    pub question: bool,
}

impl TokenFlags {
    /// `[CLS]`, `[SEP]`, speaker or padding.
    pub fn is_special(&self) -> bool {
        self.pad || self.cls || self.sep || self.speaker
    }

    pub fn is_content(&self) -> bool {
        !self.is_special()
    }
}

/// One flat model input.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedContext {
    pub token_ids: Vec<usize>,
    /// Token → utterance index.
    pub utterance: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub position_ids: Vec<usize>,
    pub flags: Vec<TokenFlags>,
}

impl TokenizedContext {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.utterance
            .iter()
            .zip(&self.flags)
            .filter(|(_, f)| !f.pad)
            .map(|(u, _)| u + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn pad_mask(&self) -> Vec<bool> {
        self.flags.iter().map(|f| f.pad).collect()
    }

    /// Content-token positions grouped by utterance.
    pub fn content_groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_utterances()];
        for (i, (u, f)) in self.utterance.iter().zip(&self.flags).enumerate() {
            if f.is_content() {
                groups[*u].push(i);
            }
        }
        groups
    }

    /// Appends `count` padding tokens. Padding continues the last utterance
    /// index so the index map stays non-decreasing.
    pub fn padded(&self, count: usize) -> Self {
        let mut out = self.clone();
        let last = self.utterance.last().copied().unwrap_or(0);
        let n = self.len();
        for k in 0..count {
            out.token_ids.push(PAD);
            out.utterance.push(last);
            out.segment_ids.push(last % 2);
            out.position_ids.push(n + k);
            out.flags.push(TokenFlags {
                pad: true,
                ..Default::default()
            });
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeConfig {
    pub max_len: usize,
    /// Longest summary target including `[BOS]`/`[EOS]`.
    pub max_target_len: usize,
}

impl Default for TokenizeConfig {
    fn default() -> Self {
        TokenizeConfig {
            max_len: 128,
            max_target_len: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Selection {
        label: usize,
    },
    Qa {
        /// Span in the (possibly truncated) context.
        span: Span,
        answer: Vec<String>,
    },
    Summary {
        /// `[BOS] w… [EOS]`.
        target: Vec<usize>,
        references: Vec<Vec<String>>,
    },
}

/// A tokenized sample: one context per candidate for response selection,
/// exactly one otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub id: String,
    pub contexts: Vec<TokenizedContext>,
    pub payload: Payload,
}

struct Unit {
    speaker: usize,
    words: Vec<String>,
    question: bool,
}

fn speaker_slots(dialogue: &Dialogue) -> Vec<usize> {
    let mut seen: Vec<&str> = Vec::new();
    dialogue
        .utterances
        .iter()
        .map(|u| {
            let slot = match seen.iter().position(|s| *s == u.speaker) {
                Some(p) => p,
                None => {
                    seen.push(&u.speaker);
                    seen.len() - 1
                }
            };
            Vocab::speaker_slot(slot)
        })
        .collect()
}

fn unit_len(u: &Unit) -> usize {
    u.words.len() + 2
}

/// Lays out `[CLS] spk w… [SEP] spk w… [SEP] …`, dropping whole leading
/// history utterances until the result fits `max_len`. Returns the context
/// and the number of history utterances dropped.
fn layout(
    id: &str,
    history: &[Unit],
    last: Option<&Unit>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<(TokenizedContext, usize)> {
    let mut total = 1 + history.iter().map(unit_len).sum::<usize>() + last.map_or(0, unit_len);
    // Without an appended unit the last history utterance must stay.
    let droppable = history.len() - usize::from(last.is_none() && !history.is_empty());
    let mut dropped = 0;
    while total > max_len && dropped < droppable {
        total -= unit_len(&history[dropped]);
        dropped += 1;
    }
    if total > max_len {
        return Err(Error::Rejected {
            id: id.to_string(),
            reason: format!("final utterance alone needs {total} tokens, max_len is {max_len}"),
        });
    }
    let mut ctx = TokenizedContext {
        token_ids: Vec::with_capacity(total),
        utterance: Vec::with_capacity(total),
        segment_ids: Vec::with_capacity(total),
        position_ids: (0..total).collect(),
        flags: Vec::with_capacity(total),
    };
    let push = |ctx: &mut TokenizedContext, tok: usize, u: usize, flags: TokenFlags| {
        ctx.token_ids.push(tok);
        ctx.utterance.push(u);
        ctx.segment_ids.push(u % 2);
        ctx.flags.push(flags);
    };
    push(
        &mut ctx,
        CLS,
        0,
        TokenFlags {
            cls: true,
            ..Default::default()
        },
    );
    for (u, unit) in history[dropped..].iter().chain(last).enumerate() {
        let q = unit.question;
        push(
            &mut ctx,
            unit.speaker,
            u,
            TokenFlags {
                speaker: true,
                question: q,
                ..Default::default()
            },
        );
        for w in &unit.words {
            push(
                &mut ctx,
                vocab.id(w),
                u,
                TokenFlags {
                    question: q,
                    ..Default::default()
                },
            );
        }
        push(
            &mut ctx,
            SEP,
            u,
            TokenFlags {
                sep: true,
                question: q,
                ..Default::default()
            },
        );
    }
    Ok((ctx, dropped))
}

/// Tokenizes a sample into model inputs.
///
/// Response selection yields one context per candidate, each candidate being
/// the final utterance. A question is appended as the final utterance. Only
/// leading history utterances are ever truncated.
pub fn tokenize(sample: &TaskSample, vocab: &Vocab, cfg: &TokenizeConfig) -> Result<Encoded> {
    sample.validate()?;
    let id = sample.dialogue.id.as_str();
    let slots = speaker_slots(&sample.dialogue);
    let history: Vec<Unit> = sample
        .dialogue
        .utterances
        .iter()
        .zip(slots)
        .map(|(u, speaker)| Unit {
            speaker,
            words: split_words(&u.text),
            question: false,
        })
        .collect();

    match &sample.task {
        Task::ResponseSelection { candidates, label } => {
            let contexts = candidates
                .iter()
                .map(|c| {
                    let unit = Unit {
                        speaker: RSP,
                        words: split_words(c),
                        question: false,
                    };
                    layout(id, &history, Some(&unit), vocab, cfg.max_len).map(|(c, _)| c)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Encoded {
                id: id.to_string(),
                contexts,
                payload: Payload::Selection { label: *label },
            })
        }
        Task::ExtractiveQa {
            question,
            answer_span: (s, e),
        } => {
            let unit = Unit {
                speaker: QST,
                words: split_words(question),
                question: true,
            };
            let (ctx, dropped) = layout(id, &history, Some(&unit), vocab, cfg.max_len)?;
            let full = history_layout(&sample.dialogue);
            let removed: usize = history[..dropped].iter().map(unit_len).sum();
            if full[*s].0 < dropped {
                return Err(Error::Rejected {
                    id: id.to_string(),
                    reason: format!(
                        "answer span [{s}, {e}] lies in utterance {} which truncation removed",
                        full[*s].0
                    ),
                });
            }
            let answer = (*s..=*e).filter_map(|p| full[p].1.clone()).collect();
            Ok(Encoded {
                id: id.to_string(),
                contexts: vec![ctx],
                payload: Payload::Qa {
                    span: (s - removed, e - removed),
                    answer,
                },
            })
        }
        Task::Summarization { references } => {
            let (ctx, _) = layout(id, &history, None, vocab, cfg.max_len)?;
            let mut target = vec![BOS];
            let body = vocab.encode(&references[0]);
            let room = cfg.max_target_len.saturating_sub(2);
            target.extend(body.into_iter().take(room));
            target.push(EOS);
            Ok(Encoded {
                id: id.to_string(),
                contexts: vec![ctx],
                payload: Payload::Summary {
                    target,
                    references: references.iter().map(|r| split_words(r)).collect(),
                },
            })
        }
    }
}

/// Content tokens of a context as strings (specials and padding skipped).
pub fn detokenize(ctx: &TokenizedContext, vocab: &Vocab) -> Vec<String> {
    ctx.token_ids
        .iter()
        .zip(&ctx.flags)
        .filter(|(_, f)| f.is_content())
        .map(|(&t, _)| vocab.token(t).to_string())
        .collect()
}
