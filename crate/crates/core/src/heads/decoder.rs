//! Autoregressive decoder for summarization. Post-norm layers with causal
//! self-attention, cross-attention over `H_e` and a feed-forward block. The
//! output projection reuses the encoder's token table.

use rand_chacha::ChaCha8Rng;

use crate::data::{BOS, EOS};
use crate::encoder::{feed_forward, multi_head_attention, AttnParams, Dropout, LN_EPS};
use crate::error::{Error, Result};
use crate::masking::build_causal_mask;
use crate::numkit::{ParamId, ParamStore, Real, Tape, Tensor, Var, NEG_INF};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayerParams {
    pub self_attn: AttnParams,
    pub cross_attn: AttnParams,
    pub ffn: [ParamId; 4],
    /// `(gamma, beta)` after self-attention, cross-attention and the FFN.
    pub ln: [(ParamId, ParamId); 3],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecoderParams {
    pub heads: usize,
    /// The encoder token table, shared as input embedding and output
    /// projection.
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<DecoderLayerParams>,
}

impl DecoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        tokens: ParamId,
        max_len: usize,
        d: usize,
        d_ff: usize,
        layers: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let positions = store.uniform_bound("dec.positions", [max_len, d], (3.0 / d as f64).sqrt(), rng);
        let layers = (0..layers)
            .map(|l| {
                let pre = format!("dec.{l}");
                DecoderLayerParams {
                    self_attn: AttnParams::init(store, &format!("{pre}.self"), d, rng),
                    cross_attn: AttnParams::init(store, &format!("{pre}.cross"), d, rng),
                    ffn: [
                        store.uniform(format!("{pre}.w1"), [d, d_ff], rng),
                        store.zeros(format!("{pre}.b1"), [d_ff]),
                        store.uniform(format!("{pre}.w2"), [d_ff, d], rng),
                        store.zeros(format!("{pre}.b2"), [d]),
                    ],
                    ln: [1, 2, 3].map(|k| {
                        (
                            store.ones(format!("{pre}.ln{k}_g"), [d]),
                            store.zeros(format!("{pre}.ln{k}_b"), [d]),
                        )
                    }),
                }
            })
            .collect();
        DecoderParams {
            heads,
            tokens,
            positions,
            layers,
        }
    }
}

fn add_norm<T: Real>(tape: &mut Tape<'_, T>, x: Var, r: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
    let s = tape.add(x, r)?;
    let (g, b) = (tape.param(g), tape.param(b));
    tape.layer_norm(s, g, b, LN_EPS)
}

/// Cross-attention mask: every decoder position sees every non-pad encoder
/// token.
pub fn memory_mask<T: Real>(m: usize, memory_pad: &[bool]) -> Tensor<T> {
    let row: Vec<T> = memory_pad
        .iter()
        .map(|&p| if p { T::from_f64(NEG_INF) } else { T::zero() })
        .collect();
    let data = (0..m).flat_map(|_| row.iter().copied()).collect();
    Tensor::new(vec![m, memory_pad.len()], data).expect("m rows of memory length")
}

/// Vocabulary logits (`m×|V|`) for each prefix position of `inputs`.
pub fn decoder_logits<T: Real>(
    tape: &mut Tape<'_, T>,
    h_e: Var,
    memory_pad: &[bool],
    inputs: &[usize],
    p: &DecoderParams,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    let m = inputs.len();
    let tok = tape.param(p.tokens);
    let pos = tape.param(p.positions);
    if m > tape.value(pos).rows() {
        return Err(Error::contract(format!(
            "decoder input of {m} tokens exceeds the position table"
        )));
    }
    let et = tape.gather(tok, inputs)?;
    let positions: Vec<usize> = (0..m).collect();
    let ep = tape.gather(pos, &positions)?;
    let mut x = tape.add(et, ep)?;
    let causal = build_causal_mask(m);
    let cross = memory_mask(m, memory_pad);
    for layer in &p.layers {
        let a = multi_head_attention(tape, x, x, &causal, &layer.self_attn, p.heads)?;
        let a = drop.apply(tape, a.out)?;
        x = add_norm(tape, a, x, layer.ln[0])?;
        let c = multi_head_attention(tape, x, h_e, &cross, &layer.cross_attn, p.heads)?;
        let c = drop.apply(tape, c.out)?;
        x = add_norm(tape, c, x, layer.ln[1])?;
        let f = feed_forward(tape, x, layer.ffn)?;
        let f = drop.apply(tape, f)?;
        x = add_norm(tape, f, x, layer.ln[2])?;
    }
    tape.matmul_nt(x, tok)
}

/// Teacher-forced mean per-token negative log-likelihood of `target`
/// (which starts with `[BOS]` and ends with `[EOS]`). Also returns the
/// logits so callers can score token accuracy.
pub fn summarize_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    h_e: Var,
    memory_pad: &[bool],
    target: &[usize],
    p: &DecoderParams,
    drop: &mut Dropout<'_>,
) -> Result<(Var, Var)> {
    if target.len() < 2 || target[0] != BOS || *target.last().expect("non-empty") != EOS {
        return Err(Error::contract(
            "summary target must be [BOS] … [EOS] with at least one step",
        ));
    }
    let m = target.len() - 1;
    let logits = decoder_logits(tape, h_e, memory_pad, &target[..m], p, drop)?;
    let v = tape.shape(logits)[1];
    let logp = tape.log_softmax(logits, None)?;
    let idx: Vec<usize> = (0..m).map(|t| t * v + target[t + 1]).collect();
    let picked = tape.select(logp, &idx)?;
    let mean = tape.mean(picked);
    Ok((tape.scale(mean, -T::one()), logits))
}

/// Index of the largest entry; ties keep the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding from `[BOS]` until `[EOS]` or `max_len` generated tokens.
/// The returned tokens exclude `[BOS]` and `[EOS]`.
pub fn greedy_decode<T: Real>(
    tape: &mut Tape<'_, T>,
    h_e: Var,
    memory_pad: &[bool],
    p: &DecoderParams,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut seq = vec![BOS];
    let pos = tape.param(p.positions);
    let limit = max_len.min(tape.value(pos).rows().saturating_sub(1));
    while seq.len() <= limit {
        let logits = decoder_logits(tape, h_e, memory_pad, &seq, p, &mut Dropout::off())?;
        let last = tape.value(logits).row(seq.len() - 1).to_vec();
        let next = argmax(&last);
        if next == EOS {
            break;
        }
        seq.push(next);
    }
    seq.remove(0);
    Ok(seq)
}
