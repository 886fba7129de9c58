//! Selection, span and decoder heads, and the recurrent cells, against loop
//! oracles and closed-form losses.

use biden::config::{rng, Stream};
use biden::data::{synth_gen, tokenize, Encoded, SynthConfig, SynthTask, TokenizeConfig, Vocab, BOS};
use biden::encoder::Dropout;
use biden::heads::decoder::decoder_logits;
use biden::heads::qa::answer_positions;
use biden::heads::selection::utterance_vectors;
use biden::heads::{best_span, RnnKind, RnnParams};
use biden::model::{BidenModel, ModelConfig, Prediction};
use biden::numkit::{ParamStore, Tape, Tensor};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 8,
        heads: 2,
        layers: 1,
        d_ff: 16,
        d_g: 4,
        max_len: 96,
        max_target_len: 24,
        ..ModelConfig::default()
    }
}

fn setup(task: SynthTask, seed: u64) -> (BidenModel, Vec<Encoded>) {
    let samples = synth_gen(task, 6, seed, &SynthConfig::default());
    let vocab = Vocab::build(&samples, 500);
    let tc = TokenizeConfig {
        max_len: 96,
        max_target_len: 24,
    };
    let enc = samples.iter().map(|s| tokenize(s, &vocab, &tc).unwrap()).collect();
    let kind = samples[0].task.kind();
    let model = BidenModel::new(tiny(), kind, vocab.len(), &mut rng(seed, Stream::Init)).unwrap();
    (model, enc)
}

fn loss(model: &BidenModel, sample: &Encoded) -> f64 {
    let mut tape = model.tape();
    let (l, _) = model.loss(&mut tape, sample, &mut Dropout::off()).unwrap();
    tape.value(l).item()
}

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn identical_candidates_split_evenly() {
    let (model, enc) = setup(SynthTask::Selection, 1);
    let mut s = enc[0].clone();
    s.contexts = vec![s.contexts[0].clone(), s.contexts[0].clone()];
    s.payload = biden::data::Payload::Selection { label: 1 };
    assert!((loss(&model, &s) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn zero_classifier_is_uniform_over_candidates() {
    let (mut model, enc) = setup(SynthTask::Selection, 2);
    let w_d = model.selection.unwrap().w_d;
    model.store.get_mut(w_d).data_mut().fill(0.0);
    let n = enc[0].contexts.len();
    assert!((loss(&model, &enc[0]) - (n as f64).ln()).abs() < 1e-12);
}

#[test]
fn candidate_scores_follow_their_candidates() {
    let (model, enc) = setup(SynthTask::Selection, 3);
    let s = &enc[0];
    let Prediction::Scores(base) = model.predict(s).unwrap() else {
        panic!("scores")
    };
    let mut rev = s.clone();
    rev.contexts.reverse();
    let Prediction::Scores(flipped) = model.predict(&rev).unwrap() else {
        panic!("scores")
    };
    let mut back = flipped.clone();
    back.reverse();
    assert_eq!(base, back);
}

#[test]
fn pads_never_change_utterance_vectors() {
    let (_, enc) = setup(SynthTask::Selection, 4);
    let ctx = &enc[0].contexts[0];
    let mut r = rng(5, Stream::Data);
    let h = random(&mut r, ctx.len(), 8);
    let extra = random(&mut r, 3, 8);
    let mut padded_h = h.data().to_vec();
    padded_h.extend_from_slice(&extra.data().iter().map(|v| v * 100.0).collect::<Vec<_>>());
    let padded_h = Tensor::new(vec![ctx.len() + 3, 8], padded_h).unwrap();
    let mut tape: Tape = Tape::new();
    let (a, b) = (tape.constant(h), tape.constant(padded_h));
    let u = utterance_vectors(&mut tape, a, ctx).unwrap();
    let v = utterance_vectors(&mut tape, b, &ctx.padded(3)).unwrap();
    assert_eq!(tape.value(u), tape.value(v));
}

#[test]
fn zero_span_weights_give_two_log_v() {
    let (mut model, enc) = setup(SynthTask::Qa, 6);
    let w = model.qa.unwrap().w;
    model.store.get_mut(w).data_mut().fill(0.0);
    for s in &enc {
        let v = answer_positions(&s.contexts[0]).iter().filter(|&&a| a).count() as f64;
        assert!((loss(&model, s) - 2.0 * v.ln()).abs() < 1e-9);
    }
}

#[test]
fn span_distributions_are_normalized_and_masked() {
    let (model, enc) = setup(SynthTask::Qa, 7);
    let mut tape = model.tape();
    let (_, scored) = model.loss(&mut tape, &enc[0], &mut Dropout::off()).unwrap();
    let biden::model::Scored::Qa {
        start, end, allowed, ..
    } = scored
    else {
        panic!("qa")
    };
    for logp in [start, end] {
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (q, &ok) in p.iter().zip(&allowed) {
            if !ok {
                assert_eq!(*q, 0.0);
            }
        }
    }
}

/// Exhaustive pair search with the documented tie order.
fn span_oracle(start: &[f64], end: &[f64], allowed: &[bool], max_span: usize) -> Option<(usize, usize)> {
    let mut pairs = Vec::new();
    for s in 0..start.len() {
        for e in 0..end.len() {
            if allowed[s] && allowed[e] && s <= e && e - s <= max_span {
                pairs.push((start[s] + end[e], s, e));
            }
        }
    }
    let best = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    pairs.iter().filter(|p| p.0 == best).map(|p| (p.1, p.2)).min()
}

#[test]
fn best_span_matches_exhaustive_search() {
    let mut r = rng(8, Stream::Data);
    for case in 0..2000 {
        let n = r.random_range(1..16);
        // Small integer logits make ties common.
        let start: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64).collect();
        let end: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64).collect();
        let allowed: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        let max_span = r.random_range(0..6);
        assert_eq!(
            best_span(&start, &end, &allowed, max_span),
            span_oracle(&start, &end, &allowed, max_span),
            "case {case}"
        );
    }
}

#[test]
fn zero_output_table_gives_log_vocab_loss() {
    let (mut model, enc) = setup(SynthTask::Summary, 9);
    let tokens = model.encoder.tokens;
    model.store.get_mut(tokens).data_mut().fill(0.0);
    let v = model.vocab_size as f64;
    assert!((loss(&model, &enc[0]) - v.ln()).abs() < 1e-9);
}

#[test]
fn decoder_logits_ignore_future_targets() {
    let (model, enc) = setup(SynthTask::Summary, 10);
    let dec = model.decoder.clone().unwrap();
    let ctx = &enc[0].contexts[0];
    let run = |inputs: &[usize]| {
        let mut tape = model.tape();
        let rep = model.represent(&mut tape, ctx, &mut Dropout::off()).unwrap();
        let l = decoder_logits(&mut tape, rep.h_e, &ctx.pad_mask(), inputs, &dec, &mut Dropout::off()).unwrap();
        tape.value(l).clone()
    };
    let a = run(&[BOS, 20, 21, 22, 23]);
    let b = run(&[BOS, 20, 30, 31, 32]);
    for t in 0..5 {
        assert_eq!(a.row(t) == b.row(t), t < 2, "step {t}");
    }
}

#[test]
fn greedy_decode_respects_the_length_cap() {
    let (model, enc) = setup(SynthTask::Summary, 11);
    let Prediction::Tokens(out) = model.predict(&enc[0]).unwrap() else {
        panic!("tokens")
    };
    assert!(out.len() <= model.config.max_target_len);
    assert!(!out.contains(&BOS));
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar GRU/LSTM recurrence over the rows of `x`.
fn rnn_oracle(store: &ParamStore, p: &RnnParams, x: &Tensor, reverse: bool) -> Vec<Vec<f64>> {
    let (w, u, b) = (store.get(p.w), store.get(p.u), store.get(p.b));
    let h = p.hidden;
    let g = w.cols();
    let mut state = vec![0.0; h];
    let mut cell = vec![0.0; h];
    let mut out = vec![Vec::new(); x.rows()];
    let order: Vec<usize> = if reverse {
        (0..x.rows()).rev().collect()
    } else {
        (0..x.rows()).collect()
    };
    for t in order {
        let xw: Vec<f64> = (0..g)
            .map(|c| b.data()[c] + (0..x.cols()).map(|k| x.at(t, k) * w.at(k, c)).sum::<f64>())
            .collect();
        let hu = |s: &[f64], c: usize| (0..h).map(|k| s[k] * u.at(k, c)).sum::<f64>();
        match p.kind {
            RnnKind::Gru => {
                let z: Vec<f64> = (0..h).map(|j| sigmoid(xw[j] + hu(&state, j))).collect();
                let r: Vec<f64> = (0..h).map(|j| sigmoid(xw[h + j] + hu(&state, h + j))).collect();
                let rs: Vec<f64> = (0..h).map(|j| r[j] * state[j]).collect();
                let cand: Vec<f64> = (0..h).map(|j| (xw[2 * h + j] + hu(&rs, 2 * h + j)).tanh()).collect();
                state = (0..h).map(|j| (1.0 - z[j]) * state[j] + z[j] * cand[j]).collect();
            }
            RnnKind::Lstm => {
                let pre: Vec<f64> = (0..g).map(|c| xw[c] + hu(&state, c)).collect();
                for j in 0..h {
                    let (i, f, gg, o) = (
                        sigmoid(pre[j]),
                        sigmoid(pre[h + j]),
                        pre[2 * h + j].tanh(),
                        sigmoid(pre[3 * h + j]),
                    );
                    cell[j] = f * cell[j] + i * gg;
                    state[j] = o * cell[j].tanh();
                }
            }
        }
        out[t] = state.clone();
    }
    out
}

#[test]
fn recurrent_cells_match_scalar_recurrence() {
    let mut r = rng(12, Stream::Data);
    for kind in [RnnKind::Gru, RnnKind::Lstm] {
        let mut store = ParamStore::new();
        let p = RnnParams::init(&mut store, "rnn", kind, 5, 3, &mut rng(13, Stream::Init));
        let b = store.get_mut(p.b);
        b.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        let x = random(&mut r, 4, 5);
        for reverse in [false, true] {
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(x.clone());
            let states = p.run(&mut tape, xv, reverse).unwrap();
            let want = rnn_oracle(&store, &p, &x, reverse);
            for (t, s) in states.iter().enumerate() {
                for j in 0..3 {
                    assert!(
                        (tape.value(*s).at(0, j) - want[t][j]).abs() < 1e-12,
                        "{kind:?} step {t}"
                    );
                }
            }
        }
    }
}

#[test]
fn reverse_run_is_forward_run_on_reversed_input() {
    let mut r = rng(14, Stream::Data);
    let mut store = ParamStore::new();
    let p = RnnParams::init(&mut store, "rnn", RnnKind::Gru, 4, 3, &mut rng(15, Stream::Init));
    let x = random(&mut r, 5, 4);
    let rev_rows: Vec<f64> = (0..5).rev().flat_map(|t| x.row(t).to_vec()).collect();
    let xr = Tensor::new(vec![5, 4], rev_rows).unwrap();
    let mut tape = Tape::with_params(&store);
    let (a, b) = (tape.constant(x), tape.constant(xr));
    let back = p.run(&mut tape, a, true).unwrap();
    let fwd = p.run(&mut tape, b, false).unwrap();
    for t in 0..5 {
        assert_eq!(tape.value(back[t]), tape.value(fwd[4 - t]));
    }
}

#[test]
fn zero_recurrence_first_state_is_input_only() {
    let mut store = ParamStore::new();
    let p = RnnParams::init(&mut store, "rnn", RnnKind::Gru, 4, 2, &mut rng(16, Stream::Init));
    store.get_mut(p.u).data_mut().fill(0.0);
    let x = random(&mut rng(17, Stream::Data), 1, 4);
    let w = store.get(p.w).clone();
    let mut tape = Tape::with_params(&store);
    let xv = tape.constant(x.clone());
    let s = p.run(&mut tape, xv, false).unwrap();
    for j in 0..2 {
        let proj = |c: usize| (0..4).map(|k| x.at(0, k) * w.at(k, c)).sum::<f64>();
        let want = sigmoid(proj(j)) * proj(4 + j).tanh();
        assert!((tape.value(s[0]).at(0, j) - want).abs() < 1e-12);
    }
}

#[test]
fn losses_are_non_negative() {
    for task in [SynthTask::Selection, SynthTask::Qa, SynthTask::Summary] {
        let (model, enc) = setup(task, 18);
        for s in &enc {
            assert!(loss(&model, s) >= 0.0);
        }
    }
}
