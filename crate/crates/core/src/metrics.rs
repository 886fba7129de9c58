//! Ranking, span and summary metrics. All return values in `[0, 1]`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;

/// 1-based rank of `gold` under descending `scores`. Equal scores rank the
/// lower candidate index first.
pub fn rank_of(scores: &[f64], gold: usize) -> usize {
    let g = scores[gold];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > g || (s == g && j < gold))
        .count()
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    mean(ranks.iter().map(|&r| if r <= k { 1.0 } else { 0.0 }))
}

pub fn mrr(ranks: &[usize]) -> f64 {
    mean(ranks.iter().map(|&r| 1.0 / r as f64))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn exact_match<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    let same = pred.len() == gold.len() && pred.iter().zip(gold).all(|(a, b)| a.as_ref() == b.as_ref());
    if same {
        1.0
    } else {
        0.0
    }
}

fn counts<S: AsRef<str>>(tokens: &[S]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_ref()).or_insert(0) += 1;
    }
    m
}

fn f1(overlap: usize, pred_len: usize, gold_len: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / pred_len as f64;
    let r = overlap as f64 / gold_len as f64;
    2.0 * p * r / (p + r)
}

/// Bag-of-tokens F1. Two empty sequences score 1.
pub fn token_f1<S: AsRef<str>>(pred: &[S], gold: &[S]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return exact_match(pred, gold);
    }
    let (cp, cg) = (counts(pred), counts(gold));
    let overlap = cp.iter().map(|(t, &c)| c.min(cg.get(t).copied().unwrap_or(0))).sum();
    f1(overlap, pred.len(), gold.len())
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(|t| t.as_ref()).collect()).or_insert(0) += 1;
        }
    }
    m
}

fn rouge_n_single<S: AsRef<str>>(cand: &[S], reference: &[S], n: usize) -> f64 {
    let (c, r) = (ngrams(cand, n), ngrams(reference, n));
    let overlap = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    let (cl, rl) = (c.values().sum(), r.values().sum());
    if cl == 0 || rl == 0 {
        return 0.0;
    }
    f1(overlap, cl, rl)
}

/// ROUGE-n F1 with clipped n-gram counts, maximized over references.
pub fn rouge_n<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>], n: usize) -> f64 {
    refs.iter().map(|r| rouge_n_single(cand, r, n)).fold(0.0, f64::max)
}

pub fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L: LCS-based F1, maximized over references.
pub fn rouge_l<S: AsRef<str>>(cand: &[S], refs: &[Vec<S>]) -> f64 {
    refs.iter()
        .map(|r| {
            if cand.is_empty() || r.is_empty() {
                0.0
            } else {
                f1(lcs_len(cand, r), cand.len(), r.len())
            }
        })
        .fold(0.0, f64::max)
}

/// Named metrics over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: TaskKind,
    pub count: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// The metric used for model selection and comparisons.
    pub fn primary_name(task: TaskKind) -> &'static str {
        match task {
            TaskKind::ResponseSelection => "r@1",
            TaskKind::ExtractiveQa => "f1",
            TaskKind::Summarization => "rouge_l",
        }
    }

    pub fn primary(&self) -> f64 {
        self.metrics[Self::primary_name(self.task)]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }
}

/// Accumulates per-sample results into a [`MetricsReport`].
#[derive(Clone, Debug)]
pub enum Accumulator {
    Ranking(Vec<usize>),
    Spans { em: Vec<f64>, f1: Vec<f64> },
    Summaries { r1: Vec<f64>, r2: Vec<f64>, rl: Vec<f64> },
}

impl Accumulator {
    pub fn new(task: TaskKind) -> Self {
        match task {
            TaskKind::ResponseSelection => Accumulator::Ranking(Vec::new()),
            TaskKind::ExtractiveQa => Accumulator::Spans {
                em: Vec::new(),
                f1: Vec::new(),
            },
            TaskKind::Summarization => Accumulator::Summaries {
                r1: Vec::new(),
                r2: Vec::new(),
                rl: Vec::new(),
            },
        }
    }

    pub fn push_ranking(&mut self, scores: &[f64], gold: usize) {
        if let Accumulator::Ranking(r) = self {
            r.push(rank_of(scores, gold));
        }
    }

    pub fn push_span<S: AsRef<str>>(&mut self, pred: &[S], gold: &[S]) {
        if let Accumulator::Spans { em, f1 } = self {
            em.push(exact_match(pred, gold));
            f1.push(token_f1(pred, gold));
        }
    }

    pub fn push_summary<S: AsRef<str>>(&mut self, cand: &[S], refs: &[Vec<S>]) {
        if let Accumulator::Summaries { r1, r2, rl } = self {
            r1.push(rouge_n(cand, refs, 1));
            r2.push(rouge_n(cand, refs, 2));
            rl.push(rouge_l(cand, refs));
        }
    }

    pub fn finish(&self) -> MetricsReport {
        let avg = |v: &[f64]| mean(v.iter().copied());
        let (task, count, pairs): (TaskKind, usize, Vec<(&str, f64)>) = match self {
            Accumulator::Ranking(r) => (
                TaskKind::ResponseSelection,
                r.len(),
                vec![("r@1", recall_at_k(r, 1)), ("r@2", recall_at_k(r, 2)), ("mrr", mrr(r))],
            ),
            Accumulator::Spans { em, f1 } => (TaskKind::ExtractiveQa, em.len(), vec![("em", avg(em)), ("f1", avg(f1))]),
            Accumulator::Summaries { r1, r2, rl } => (
                TaskKind::Summarization,
                r1.len(),
                vec![("rouge_1", avg(r1)), ("rouge_2", avg(r2)), ("rouge_l", avg(rl))],
            ),
        };
        MetricsReport {
            task,
            count,
            metrics: pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        }
    }
}
