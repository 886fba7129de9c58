//! Extractive QA: independent start and end distributions over the history
//! tokens.

use rand_chacha::ChaCha8Rng;

use crate::data::{Span, TokenizedContext};
use crate::error::{Error, Result};
use crate::numkit::{ParamId, ParamStore, Real, Tape, Tensor, Var, NEG_INF};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QaParams {
    /// `d×2`: column 0 is `w_s`, column 1 is `w_e`.
    pub w: ParamId,
}

impl QaParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, d: usize, rng: &mut ChaCha8Rng) -> Self {
        QaParams {
            w: store.uniform("qa.w", [d, 2], rng),
        }
    }
}

/// Positions an answer may start or end at: history content tokens.
pub fn answer_positions(ctx: &TokenizedContext) -> Vec<bool> {
    ctx.flags.iter().map(|f| f.is_content() && !f.question).collect()
}

/// Start/end log-probabilities, each `1×n`, with disallowed positions at
/// `NEG_INF`.
pub fn span_log_probs<T: Real>(
    tape: &mut Tape<'_, T>,
    h_e: Var,
    ctx: &TokenizedContext,
    p: &QaParams,
) -> Result<(Var, Var)> {
    let n = tape.shape(h_e)[0];
    let w = tape.param(p.w);
    let logits = tape.matmul(h_e, w)?;
    let allowed = answer_positions(ctx);
    let mask = Tensor::new(
        vec![1, n],
        allowed
            .iter()
            .map(|&a| if a { T::zero() } else { T::from_f64(NEG_INF) })
            .collect(),
    )?;
    let mut out = [h_e; 2];
    for (k, slot) in out.iter_mut().enumerate() {
        let col = tape.slice_cols(logits, k, 1)?;
        let row = tape.reshape(col, vec![1, n])?;
        *slot = tape.log_softmax(row, Some(&mask))?;
    }
    Ok((out[0], out[1]))
}

/// `−(log P_start[a_s] + log P_end[a_e])` plus the two log-distributions.
pub fn qa_spans<T: Real>(
    tape: &mut Tape<'_, T>,
    h_e: Var,
    ctx: &TokenizedContext,
    span: Span,
    p: &QaParams,
) -> Result<(Var, Var, Var)> {
    let allowed = answer_positions(ctx);
    let (s, e) = span;
    if s > e || e >= allowed.len() || !allowed[s] || !allowed[e] {
        return Err(Error::contract(format!(
            "answer span [{s}, {e}] is not on history content tokens"
        )));
    }
    let (ls, le) = span_log_probs(tape, h_e, ctx, p)?;
    let a = tape.select(ls, &[s])?;
    let b = tape.select(le, &[e])?;
    let both = tape.add(a, b)?;
    let neg = tape.scale(both, -T::one());
    let loss = tape.sum(neg);
    Ok((ls, le, loss))
}

/// The `(s, e)` maximizing `start[s] + end[e]` over allowed positions with
/// `s ≤ e ≤ s + max_span`. Ties go to the lowest start, then lowest end.
pub fn best_span(start: &[f64], end: &[f64], allowed: &[bool], max_span: usize) -> Option<Span> {
    let n = start.len();
    let mut best: Option<(f64, Span)> = None;
    for s in (0..n).filter(|&s| allowed[s]) {
        for e in (s..n.min(s + max_span + 1)).filter(|&e| allowed[e]) {
            let score = start[s] + end[e];
            if best.is_none_or(|(b, _)| score > b) {
                best = Some((score, (s, e)));
            }
        }
    }
    best.map(|(_, span)| span)
}
