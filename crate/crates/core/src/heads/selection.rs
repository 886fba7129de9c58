//! Response selection: utterance max-pooling, a Bi-GRU over utterances and a
//! linear scorer per candidate context.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rnn::{BiRnnParams, RnnKind};
use crate::data::TokenizedContext;
use crate::error::{Error, Result};
use crate::numkit::{ParamId, ParamStore, PoolKind, Real, Tape, Var};

/// How the Bi-GRU states become the dialogue vector `H_d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `[h_fwd(last); h_bwd(first)] · W + b`.
    #[default]
    FinalStates,
    /// Max over utterances of `[h_fwd; h_bwd]`, then the same projection.
    MaxStates,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionParams {
    pub gru: BiRnnParams,
    /// `2d_g×d`.
    pub proj: ParamId,
    pub proj_b: ParamId,
    /// Classifier `w_d`, stored as `d×1`.
    pub w_d: ParamId,
}

impl SelectionParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, d: usize, d_g: usize, rng: &mut ChaCha8Rng) -> Self {
        SelectionParams {
            gru: BiRnnParams::init(store, "sel.gru", RnnKind::Gru, d, d_g, rng),
            proj: store.uniform("sel.proj", [2 * d_g, d], rng),
            proj_b: store.zeros("sel.proj_b", [d]),
            w_d: store.uniform("sel.w_d", [d, 1], rng),
        }
    }
}

/// One utterance vector per utterance: the max over its content tokens.
pub fn utterance_vectors<T: Real>(tape: &mut Tape<'_, T>, h_e: Var, ctx: &TokenizedContext) -> Result<Var> {
    tape.pool_rows(h_e, &ctx.content_groups(), PoolKind::Max)
}

/// `H_d` for one candidate context (`1×d`). With `no_bigru` the utterance
/// vectors are averaged instead.
pub fn dialogue_vector<T: Real>(
    tape: &mut Tape<'_, T>,
    h_e: Var,
    ctx: &TokenizedContext,
    p: &SelectionParams,
    readout: Readout,
    no_bigru: bool,
) -> Result<Var> {
    let u = utterance_vectors(tape, h_e, ctx)?;
    if no_bigru {
        let rows = tape.shape(u)[0];
        let all: Vec<usize> = (0..rows).collect();
        return tape.pool_rows(u, &[all], PoolKind::Mean);
    }
    let state = match readout {
        Readout::FinalStates => p.gru.final_states(tape, u)?,
        Readout::MaxStates => {
            let s = p.gru.states(tape, u)?;
            let rows: Vec<usize> = (0..tape.shape(s)[0]).collect();
            tape.pool_rows(s, &[rows], PoolKind::Max)?
        }
    };
    let (w, b) = (tape.param(p.proj), tape.param(p.proj_b));
    tape.linear(state, w, Some(b))
}

/// Candidate scores `w_dᵀ H_d` as a `1×N` row from per-context `H_d`s.
pub fn candidate_scores<T: Real>(tape: &mut Tape<'_, T>, h_d: &[Var], p: &SelectionParams) -> Result<Var> {
    let stacked = tape.concat_rows(h_d)?;
    let w = tape.param(p.w_d);
    let s = tape.matmul(stacked, w)?;
    tape.reshape(s, vec![1, h_d.len()])
}

/// `P_D` as log-probabilities (`1×N`) and `−log P_D[label]`.
pub fn select_response<T: Real>(
    tape: &mut Tape<'_, T>,
    h_d: &[Var],
    label: usize,
    p: &SelectionParams,
) -> Result<(Var, Var)> {
    if h_d.len() < 2 || label >= h_d.len() {
        return Err(Error::contract(format!(
            "label {label} invalid for {} candidates",
            h_d.len()
        )));
    }
    let scores = candidate_scores(tape, h_d, p)?;
    let logp = tape.log_softmax(scores, None)?;
    let pick = tape.select(logp, &[label])?;
    let loss = tape.scale(pick, -T::one());
    let loss = tape.sum(loss);
    Ok((logp, loss))
}
