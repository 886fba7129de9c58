//! GRU and LSTM cells unrolled on the tape, and the token-level bidirectional
//! baselines built from them.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numkit::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnKind {
    Gru,
    Lstm,
}

impl RnnKind {
    fn gates(self) -> usize {
        match self {
            RnnKind::Gru => 3,
            RnnKind::Lstm => 4,
        }
    }
}

/// One direction of a recurrent layer.
///
/// GRU: `w` is `d_in×3h` with blocks `(z, r, h̃)`; `u` is `h×3h`. The reset
/// gate multiplies the state before the candidate block of `u`.
/// LSTM: blocks `(i, f, g, o)` in `w` and `u`, both `·×4h`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RnnParams {
    pub kind: RnnKind,
    pub hidden: usize,
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
}

impl RnnParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: RnnKind,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let g = kind.gates();
        RnnParams {
            kind,
            hidden,
            w: store.uniform(format!("{prefix}.w"), [d_in, g * hidden], rng),
            u: store.uniform(format!("{prefix}.u"), [hidden, g * hidden], rng),
            b: store.zeros(format!("{prefix}.b"), [g * hidden]),
        }
    }

    /// Hidden states (`1×h` each) in input order. With `reverse` the
    /// recurrence runs from the last row to the first.
    pub fn run<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var, reverse: bool) -> Result<Vec<Var>> {
        let steps = tape.shape(x)[0];
        let h = self.hidden;
        let (w, u, b) = (tape.param(self.w), tape.param(self.u), tape.param(self.b));
        let xw = tape.linear(x, w, Some(b))?;
        let mut state = tape.constant(Tensor::zeros(vec![1, h]));
        let mut cell = state;
        let mut out = vec![state; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let xt = tape.slice_rows(xw, t, 1)?;
            match self.kind {
                RnnKind::Gru => {
                    let hu = tape.matmul(state, u)?;
                    let x_zr = tape.slice_cols(xt, 0, 2 * h)?;
                    let h_zr = tape.slice_cols(hu, 0, 2 * h)?;
                    let zr = tape.add(x_zr, h_zr)?;
                    let zr = tape.sigmoid(zr);
                    let z = tape.slice_cols(zr, 0, h)?;
                    let r = tape.slice_cols(zr, h, h)?;
                    let rh = tape.mul(r, state)?;
                    let u_h = tape.slice_cols(u, 2 * h, h)?;
                    let rhu = tape.matmul(rh, u_h)?;
                    let x_h = tape.slice_cols(xt, 2 * h, h)?;
                    let cand = tape.add(x_h, rhu)?;
                    let cand = tape.tanh(cand);
                    // h' = h + z ⊙ (h̃ − h)
                    let delta = tape.sub(cand, state)?;
                    let step = tape.mul(z, delta)?;
                    state = tape.add(state, step)?;
                }
                RnnKind::Lstm => {
                    let hu = tape.matmul(state, u)?;
                    let pre = tape.add(xt, hu)?;
                    let ifo = |tape: &mut Tape<'_, T>, k: usize| -> Result<Var> {
                        let s = tape.slice_cols(pre, k * h, h)?;
                        Ok(tape.sigmoid(s))
                    };
                    let i = ifo(tape, 0)?;
                    let f = ifo(tape, 1)?;
                    let o = ifo(tape, 3)?;
                    let g = tape.slice_cols(pre, 2 * h, h)?;
                    let g = tape.tanh(g);
                    let keep = tape.mul(f, cell)?;
                    let write = tape.mul(i, g)?;
                    cell = tape.add(keep, write)?;
                    let c = tape.tanh(cell);
                    state = tape.mul(o, c)?;
                }
            }
            out[t] = state;
        }
        Ok(out)
    }
}

/// A forward and a backward [`RnnParams`] over the same input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiRnnParams {
    pub fwd: RnnParams,
    pub bwd: RnnParams,
}

impl BiRnnParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: RnnKind,
        d_in: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        BiRnnParams {
            fwd: RnnParams::init(store, &format!("{prefix}.fwd"), kind, d_in, hidden, rng),
            bwd: RnnParams::init(store, &format!("{prefix}.bwd"), kind, d_in, hidden, rng),
        }
    }

    /// Per-step `[h_fwd; h_bwd]` rows, `steps×2h`.
    pub fn states<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let f = self.fwd.run(tape, x, false)?;
        let b = self.bwd.run(tape, x, true)?;
        let rows: Vec<Var> = f
            .into_iter()
            .zip(b)
            .map(|(f, b)| tape.concat_cols(&[f, b]))
            .collect::<Result<_>>()?;
        tape.concat_rows(&rows)
    }

    /// `[h_fwd(last); h_bwd(first)]`, the states after reading every row.
    pub fn final_states<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let f = self.fwd.run(tape, x, false)?;
        let b = self.bwd.run(tape, x, true)?;
        let last = *f.last().expect("at least one step");
        tape.concat_cols(&[last, b[0]])
    }
}

/// Token-level bidirectional recurrence over `h` (`n×d`), replacing the
/// decoupling module. Hidden size per direction is `d/2`, so the output is
/// `n×d` again.
pub fn bi_rnn_baseline<T: Real>(tape: &mut Tape<'_, T>, h: Var, p: &BiRnnParams) -> Result<Var> {
    p.states(tape, h)
}
