//! Seeded synthetic corpora for the three tasks.
//!
//! Every utterance carries exactly one keyword among a few filler words, so
//! the target of each task is a function of keyword positions:
//!
//! * temporal response selection: a dialogue draws one keyword per
//!   candidate. The final utterance carries one of them and earlier
//!   utterances carry the rest. The correct candidate echoes the final
//!   keyword, distractors echo the earlier ones. Every candidate keyword
//!   therefore occurs somewhere in the history, and only its turn position
//!   identifies the answer.
//! * span QA: the question names one keyword; the answer is its (unique)
//!   occurrence in the history.
//! * copy summarization: the reference is the dialogue's keywords in order.

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dialogue, Task, TaskSample, Utterance};

const FILLERS: &[&str] = &[
    "i", "you", "we", "think", "maybe", "really", "the", "a", "about", "so", "well", "just", "like", "then", "okay",
    "yes", "no", "now", "that", "it",
];

const KEYWORDS: &[&str] = &[
    "apple", "bridge", "castle", "dragon", "engine", "forest", "garden", "harbor", "island", "jungle", "kettle",
    "ladder", "mirror", "needle", "orchard", "pepper", "quarry", "river", "saddle", "tunnel", "umbrella", "valley",
    "wagon", "yacht", "zebra", "anchor", "basket", "candle", "desert", "feather", "glacier", "hammer", "igloo",
    "jacket", "lantern", "meadow", "nugget", "oyster", "pillow", "rocket",
];

const SPEAKERS: &[&str] = &["alice", "bob", "carol"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SynthTask {
    /// Temporal response selection.
    #[serde(rename = "a")]
    Selection,
    /// Span QA.
    #[serde(rename = "b")]
    Qa,
    /// Copy summarization.
    #[serde(rename = "c")]
    Summary,
}

impl std::str::FromStr for SynthTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "a" | "selection" | "response_selection" => Ok(SynthTask::Selection),
            "b" | "qa" | "extractive_qa" => Ok(SynthTask::Qa),
            "c" | "summary" | "summarization" => Ok(SynthTask::Summary),
            other => Err(format!("unknown synthetic task {other:?} (expected a, b or c)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub min_utterances: usize,
    pub max_utterances: usize,
    pub num_candidates: usize,
    pub max_fillers: usize,
    /// Number of keywords drawn from the pool (at most 40).
    pub keyword_pool: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            min_utterances: 4,
            max_utterances: 6,
            num_candidates: 4,
            max_fillers: 2,
            keyword_pool: KEYWORDS.len(),
        }
    }
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SynthConfig,
}

impl Gen<'_> {
    fn phrase(&mut self, keyword: &str) -> String {
        let n = self.rng.random_range(0..=self.cfg.max_fillers);
        let mut words: Vec<&str> = (0..n)
            .map(|_| FILLERS[self.rng.random_range(0..FILLERS.len())])
            .collect();
        let at = self.rng.random_range(0..=words.len());
        words.insert(at, keyword);
        words.join(" ")
    }

    fn keywords(&mut self, k: usize) -> Vec<&'static str> {
        let pool = self.cfg.keyword_pool.clamp(k, KEYWORDS.len());
        let mut all: Vec<&'static str> = KEYWORDS[..pool].to_vec();
        all.shuffle(&mut self.rng);
        all.truncate(k);
        all
    }

    fn num_utterances(&mut self, min: usize) -> usize {
        let lo = self.cfg.min_utterances.max(min);
        let hi = self.cfg.max_utterances.max(lo);
        self.rng.random_range(lo..=hi)
    }

    fn dialogue(&mut self, id: String, keywords: &[&str], parties: usize) -> Dialogue {
        let utterances = keywords
            .iter()
            .enumerate()
            .map(|(i, kw)| Utterance::new(SPEAKERS[i % parties], self.phrase(kw)))
            .collect();
        Dialogue { id, utterances }
    }

    fn selection(&mut self, idx: usize) -> TaskSample {
        let c = self.cfg.num_candidates.max(2);
        let group = self.keywords(c);
        let final_kw = self.rng.random_range(0..c);
        let u = self.num_utterances(c);
        // Non-final turns cover every non-final keyword at least once.
        let mut earlier: Vec<&str> = group
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != final_kw)
            .map(|(_, k)| *k)
            .collect();
        while earlier.len() < u - 1 {
            let pick = earlier[self.rng.random_range(0..c - 1)];
            earlier.push(pick);
        }
        earlier.shuffle(&mut self.rng);
        earlier.push(group[final_kw]);
        let dialogue = self.dialogue(format!("sel-{idx}"), &earlier, 2);

        let label = self.rng.random_range(0..c);
        let mut distractors: Vec<&str> = group
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != final_kw)
            .map(|(_, k)| *k)
            .collect();
        distractors.shuffle(&mut self.rng);
        let mut candidates = Vec::with_capacity(c);
        for slot in 0..c {
            let kw = if slot == label {
                group[final_kw]
            } else {
                distractors.pop().expect("c - 1 distractors")
            };
            candidates.push(self.phrase(kw));
        }
        TaskSample {
            dialogue,
            task: Task::ResponseSelection { candidates, label },
        }
    }

    fn qa(&mut self, idx: usize) -> TaskSample {
        let u = self.num_utterances(1);
        let kws = self.keywords(u);
        let dialogue = self.dialogue(format!("qa-{idx}"), &kws, 3);
        let target = self.rng.random_range(0..u);
        let span = TaskSample::locate_answer(&dialogue, kws[target], target).expect("keyword present in its utterance");
        TaskSample {
            dialogue,
            task: Task::ExtractiveQa {
                question: format!("what about the {}", kws[target]),
                answer_span: span,
            },
        }
    }

    fn summary(&mut self, idx: usize) -> TaskSample {
        let u = self.num_utterances(1);
        let kws = self.keywords(u);
        let dialogue = self.dialogue(format!("sum-{idx}"), &kws, 2);
        TaskSample {
            dialogue,
            task: Task::Summarization {
                references: vec![kws.join(" ")],
            },
        }
    }
}

/// Generates `size` samples of `task`, deterministically from `seed`.
pub fn synth_gen(task: SynthTask, size: usize, seed: u64, cfg: &SynthConfig) -> Vec<TaskSample> {
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
    };
    (0..size)
        .map(|i| match task {
            SynthTask::Selection => g.selection(i),
            SynthTask::Qa => g.qa(i),
            SynthTask::Summary => g.summary(i),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{history_layout, split_words};

    #[test]
    fn same_seed_same_samples() {
        let cfg = SynthConfig::default();
        for task in [SynthTask::Selection, SynthTask::Qa, SynthTask::Summary] {
            assert_eq!(synth_gen(task, 1, 7, &cfg), synth_gen(task, 1, 7, &cfg));
            assert_ne!(synth_gen(task, 3, 7, &cfg), synth_gen(task, 3, 8, &cfg));
        }
    }

    #[test]
    fn qa_span_is_the_questioned_keyword() {
        for s in synth_gen(SynthTask::Qa, 200, 3, &SynthConfig::default()) {
            s.validate().unwrap();
            let Task::ExtractiveQa { question, answer_span } = &s.task else {
                panic!()
            };
            let layout = history_layout(&s.dialogue);
            assert_eq!(answer_span.0, answer_span.1);
            let word = layout[answer_span.0].1.clone().unwrap();
            assert_eq!(split_words(question).last().unwrap(), &word);
            let occurrences = layout.iter().filter(|(_, w)| w.as_deref() == Some(&word)).count();
            assert_eq!(occurrences, 1);
        }
    }

    #[test]
    fn selection_candidates_all_occur_in_history() {
        for s in synth_gen(SynthTask::Selection, 200, 4, &SynthConfig::default()) {
            s.validate().unwrap();
            let Task::ResponseSelection { candidates, label } = &s.task else {
                panic!()
            };
            let kw = |text: &str| {
                split_words(text)
                    .into_iter()
                    .find(|w| KEYWORDS.contains(&w.as_str()))
                    .unwrap()
            };
            let last = kw(&s.dialogue.utterances.last().unwrap().text);
            assert_eq!(kw(&candidates[*label]), last);
            for (i, c) in candidates.iter().enumerate() {
                let k = kw(c);
                assert!(s.dialogue.utterances.iter().any(|u| kw(&u.text) == k));
                if i != *label {
                    assert_ne!(k, last);
                }
            }
        }
    }

    #[test]
    fn summary_reference_lists_keywords_in_order() {
        for s in synth_gen(SynthTask::Summary, 50, 5, &SynthConfig::default()) {
            let Task::Summarization { references } = &s.task else {
                panic!()
            };
            let words = split_words(&references[0]);
            assert_eq!(words.len(), s.dialogue.utterances.len());
            for (w, u) in words.iter().zip(&s.dialogue.utterances) {
                assert!(split_words(&u.text).contains(w));
            }
        }
    }

    #[test]
    fn label_slots_uniform() {
        let samples = synth_gen(SynthTask::Selection, 10_000, 11, &SynthConfig::default());
        let mut counts = [0usize; 4];
        for s in &samples {
            let Task::ResponseSelection { label, .. } = s.task else {
                panic!()
            };
            counts[label] += 1;
        }
        for c in counts {
            let frac = c as f64 / samples.len() as f64;
            assert!((frac - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }
}
