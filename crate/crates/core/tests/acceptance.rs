//! Acceptance suite: nine criteria, each printed as one PASS/FAIL line with
//! its measurements and wall time. Runtime budgets are part of each verdict.
//!
//! Arguments that are not flags filter criteria by number or name, e.g.
//! `cargo test --test acceptance -- 1 masks`.

mod support;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use biden::ablate::{run_ablation, Variant};
use biden::bidm::{decouple, moe_fuse, BidmParams, MoeParams};
use biden::config::{rng, Config, Stream};
use biden::data::{
    synth_gen, tokenize, Dialogue, Encoded, SynthConfig, SynthTask, Task, TaskKind, TaskSample, TokenizeConfig,
    Utterance, Vocab,
};
use biden::encoder::Dropout;
use biden::export::export_attention;
use biden::gradcheck::{gradcheck, GradcheckOptions};
use biden::masking::{build_decoupling_masks, build_padded_masks, Channel, DecouplingMasks};
use biden::metrics::{exact_match, lcs_len, mrr, rank_of, recall_at_k, rouge_l, rouge_n, token_f1};
use biden::model::{BidenModel, InitMode, ModelConfig};
use biden::numkit::{ParamStore, Tape, Tensor, NEG_INF};
use biden::optim::AdamW;
use biden::train::{batch_gradients, prepare, train};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// Outcome of one criterion: pass flag and a one-line summary.
type Verdict = (bool, String);

struct Criterion {
    number: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Verdict,
}

const CRITERIA: [Criterion; 9] = [
    Criterion {
        number: 1,
        name: "mask_partition",
        budget: Duration::from_secs(10),
        run: mask_partition,
    },
    Criterion {
        number: 2,
        name: "normalization",
        budget: Duration::from_secs(30),
        run: normalization,
    },
    Criterion {
        number: 3,
        name: "causality",
        budget: Duration::from_secs(60),
        run: causality,
    },
    Criterion {
        number: 4,
        name: "gradient_check",
        budget: Duration::from_secs(300),
        run: gradient_check,
    },
    Criterion {
        number: 5,
        name: "degenerate_equivalences",
        budget: Duration::from_secs(60),
        run: degenerate,
    },
    Criterion {
        number: 6,
        name: "metric_oracles",
        budget: Duration::from_secs(60),
        run: metric_oracles,
    },
    Criterion {
        number: 7,
        name: "ablation_ordering",
        budget: Duration::from_secs(1200),
        run: ablation,
    },
    Criterion {
        number: 8,
        name: "overfit",
        budget: Duration::from_secs(600),
        run: overfit,
    },
    Criterion {
        number: 9,
        name: "export_structure",
        budget: Duration::from_secs(10),
        run: export_structure,
    },
];

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |c: &Criterion| {
        filters.is_empty()
            || filters.iter().any(|f| {
                *f == c.number.to_string() || format!("criterion_{}_{}", c.number, c.name).contains(f.as_str())
            })
    };
    let mut failed = 0;
    for c in CRITERIA.iter().filter(|c| selected(c)) {
        let start = Instant::now();
        let (ok, detail) = (c.run)();
        let took = start.elapsed();
        let within = took <= c.budget;
        let pass = ok && within;
        if !pass {
            failed += 1;
        }
        let budget = if within {
            String::new()
        } else {
            format!(", over the {}s budget", c.budget.as_secs())
        };
        println!(
            "criterion {} {}: {} ({detail}; {:.1}s{budget})",
            c.number,
            c.name,
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// 1–`max_utt` utterances of 1–`max_tok` tokens each.
fn utterance_map(r: &mut ChaCha8Rng, max_utt: usize, max_tok: usize) -> Vec<usize> {
    let utts = r.random_range(1..=max_utt);
    (0..utts)
        .flat_map(|u| std::iter::repeat_n(u, r.random_range(1..=max_tok)))
        .collect()
}

fn open(t: &Tensor, i: usize, j: usize) -> bool {
    t.at(i, j) == 0.0
}

fn mask_partition() -> Verdict {
    let mut r = rng(101, Stream::Data);
    let mut pairs = 0usize;
    let mut errors = Vec::new();
    for case in 0..1000 {
        let utt = utterance_map(&mut r, 12, 20);
        let n = utt.len();
        let last = utt[n - 1];
        let m: DecouplingMasks = build_decoupling_masks(&utt);
        for i in 0..n {
            for j in 0..n {
                pairs += 1;
                let want = [utt[i] < utt[j], utt[i] == utt[j], utt[i] > utt[j]];
                let got = [Channel::F2c, Channel::C2c, Channel::P2c].map(|c| open(m.mask(c), i, j));
                let closed_ok = [Channel::F2c, Channel::C2c, Channel::P2c]
                    .iter()
                    .all(|&c| open(m.mask(c), i, j) || m.mask(c).at(i, j) == NEG_INF);
                if got != want || got.iter().filter(|&&g| g).count() != 1 || !closed_ok {
                    errors.push(format!("case {case} pair ({i}, {j})"));
                }
            }
            let want_valid = [utt[i] != last, true, utt[i] != 0];
            for (k, c) in [Channel::F2c, Channel::C2c, Channel::P2c].into_iter().enumerate() {
                let valid = m.valid(c)[i];
                let gate_open = m.m_g.at(i, k) == 0.0;
                let gate_closed = m.m_g.at(i, k) == NEG_INF;
                if valid != want_valid[k] || gate_open != valid || gate_open == gate_closed {
                    errors.push(format!("case {case} token {i} channel {}", c.name()));
                }
            }
        }
    }
    let detail = format!("1000 dialogues, {pairs} token pairs, {} mismatches", errors.len());
    (
        errors.is_empty(),
        errors
            .first()
            .map_or(detail.clone(), |e| format!("{detail}, first at {e}")),
    )
}

fn small_params(seed: u64, d: usize) -> (ParamStore, BidmParams, MoeParams) {
    let mut store = ParamStore::new();
    let mut r = rng(seed, Stream::Init);
    let bidm = BidmParams::init(&mut store, d, 2 * d, &mut r);
    let moe = MoeParams::init(&mut store, d, &mut r);
    (store, bidm, moe)
}

fn normalization() -> Verdict {
    let d = 8;
    let mut r = rng(202, Stream::Data);
    let (mut worst_row, mut worst_gate, mut bound_breaks, mut leaks) = (0.0f64, 0.0f64, 0usize, 0usize);
    let cases = 300;
    for case in 0..cases {
        let (store, bidm, moe) = small_params(1000 + case, d);
        let real = utterance_map(&mut r, 6, 6);
        let extra = if case % 2 == 0 { r.random_range(0..4) } else { 0 };
        let last = *real.last().unwrap();
        let mut utt = real.clone();
        utt.extend(std::iter::repeat_n(last, extra));
        let pad: Vec<bool> = (0..utt.len()).map(|i| i >= real.len()).collect();
        let masks: DecouplingMasks = build_padded_masks(&utt, &pad);
        let n = utt.len();
        let h = random(&mut r, n, d);
        let mut tape = Tape::with_params(&store);
        let hv = tape.constant(h);
        let dec = decouple(&mut tape, hv, &masks, &bidm, 2, &mut Dropout::off()).unwrap();
        let fused = moe_fuse(&mut tape, hv, &dec.channels, &masks.m_g, &moe).unwrap();
        for (c, att) in Channel::ALL.iter().zip(&dec.attention) {
            for w in &att.weights {
                let w = tape.value(*w);
                for i in 0..n {
                    let sum: f64 = w.row(i).iter().sum();
                    if masks.valid(*c)[i] {
                        worst_row = worst_row.max((sum - 1.0).abs());
                    } else if w.row(i).iter().any(|&v| v != 0.0) {
                        leaks += 1;
                    }
                }
            }
        }
        let gate = tape.value(fused.gate);
        let h_e = tape.value(fused.h_e);
        let chans: Vec<&Tensor> = dec.channels.iter().map(|&c| tape.value(c)).collect();
        for i in 0..n {
            let valid: Vec<bool> = Channel::ALL.iter().map(|&c| masks.valid(c)[i]).collect();
            for f in 0..d {
                let g = gate.row(i * d + f);
                if pad[i] {
                    leaks += g.iter().filter(|&&v| v != 0.0).count();
                    continue;
                }
                worst_gate = worst_gate.max((g.iter().sum::<f64>() - 1.0).abs());
                leaks += (0..3).filter(|&k| !valid[k] && g[k] != 0.0).count();
                let vals: Vec<f64> = (0..3).filter(|&k| valid[k]).map(|k| chans[k].at(i, f)).collect();
                let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = h_e.at(i, f);
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    bound_breaks += 1;
                }
            }
        }
    }
    let ok = worst_row <= 1e-9 && worst_gate <= 1e-9 && bound_breaks == 0 && leaks == 0;
    (
        ok,
        format!(
            "{cases} cases, max |row sum - 1| {worst_row:.1e}, max |gate sum - 1| {worst_gate:.1e}, \
             {leaks} weights on invalid entries, {bound_breaks} fused values out of bounds"
        ),
    )
}

fn causality() -> Verdict {
    let d = 8;
    let mut r = rng(303, Stream::Data);
    let (mut checked, mut violations, mut silent) = (0usize, 0usize, 0usize);
    for case in 0..200 {
        let (store, bidm, _) = small_params(2000 + case, d);
        let utt = utterance_map(&mut r, 5, 4);
        let n = utt.len();
        let masks: DecouplingMasks = build_decoupling_masks(&utt);
        let h = random(&mut r, n, d);
        let j = r.random_range(0..n);
        let mut moved = h.clone();
        for f in 0..d {
            moved.data_mut()[j * d + f] += r.random_range(-1.0..1.0);
        }
        let run = |x: &Tensor| {
            let mut tape = Tape::with_params(&store);
            let xv = tape.constant(x.clone());
            let dec = decouple(&mut tape, xv, &masks, &bidm, 2, &mut Dropout::off()).unwrap();
            dec.channels.map(|c| tape.value(c).clone())
        };
        let (before, after) = (run(&h), run(&moved));
        for c in Channel::ALL {
            // Row j always moves through its own residual path.
            for i in (0..n).filter(|&i| i != j) {
                checked += 1;
                let changed = before[c.index()].row(i) != after[c.index()].row(i);
                let admitted = c.admits(utt[i], utt[j]);
                if changed && !admitted {
                    violations += 1;
                }
                if admitted && !changed {
                    silent += 1;
                }
            }
        }
    }
    (
        violations == 0,
        format!("200 perturbations, {checked} row checks, {violations} leaks into unadmitted rows, {silent} admitted rows unchanged"),
    )
}

fn gradient_check() -> Verdict {
    match gradcheck(&GradcheckOptions::default()) {
        Ok(report) => {
            let per: Vec<String> = report
                .pipelines
                .iter()
                .map(|p| format!("{} {:.1e}", p.pipeline, p.max_rel_err))
                .collect();
            (
                report.passed && report.max_rel_err < 1e-4,
                format!(
                    "max rel err {:.2e} over {} pipelines [{}]",
                    report.max_rel_err,
                    per.len(),
                    per.join(", ")
                ),
            )
        }
        Err(e) => (false, format!("error: {e}")),
    }
}

fn tiny_model(init: InitMode, zero_masks: bool) -> ModelConfig {
    let mut cfg = ModelConfig {
        d: 8,
        heads: 2,
        layers: 2,
        d_ff: 16,
        d_g: 4,
        max_len: 64,
        max_target_len: 16,
        init,
        ..ModelConfig::default()
    };
    cfg.ablation.zero_masks = zero_masks;
    cfg
}

fn encoded(sample: &TaskSample) -> (Vocab, Encoded) {
    let vocab = Vocab::build(std::slice::from_ref(sample), 200);
    let enc = tokenize(
        sample,
        &vocab,
        &TokenizeConfig {
            max_len: 64,
            max_target_len: 16,
        },
    )
    .unwrap();
    (vocab, enc)
}

fn dialogue(texts: &[&str]) -> Dialogue {
    Dialogue {
        id: "degenerate".into(),
        utterances: texts
            .iter()
            .enumerate()
            .map(|(i, t)| Utterance::new(["ann", "ben"][i % 2], *t))
            .collect(),
    }
}

fn degenerate() -> Verdict {
    // (a) One utterance: only c2c is valid, so H_e is H_c2c exactly.
    let single = TaskSample {
        dialogue: dialogue(&["we walked along the quiet river at dawn"]),
        task: Task::Summarization {
            references: vec!["river walk".into()],
        },
    };
    let (vocab, enc) = encoded(&single);
    let model = BidenModel::<f64>::new(
        tiny_model(InitMode::Random, false),
        TaskKind::Summarization,
        vocab.len(),
        &mut rng(1, Stream::Init),
    )
    .unwrap();
    let mut tape = model.tape();
    let rep = model
        .represent(&mut tape, &enc.contexts[0], &mut Dropout::off())
        .unwrap();
    let c2c = rep.decoupled.as_ref().unwrap().channels[Channel::C2c.index()];
    let a = tape.value(rep.h_e) == tape.value(c2c);

    // (b) Zero masks with the three channel layers tied: all channels agree.
    let multi = TaskSample {
        dialogue: dialogue(&["where is the key", "under the mat", "thanks a lot"]),
        task: Task::Summarization {
            references: vec!["key under mat".into()],
        },
    };
    let (vocab, enc) = encoded(&multi);
    let mut model = BidenModel::<f64>::new(
        tiny_model(InitMode::Random, true),
        TaskKind::Summarization,
        vocab.len(),
        &mut rng(2, Stream::Init),
    )
    .unwrap();
    let bidm = model.bidm.unwrap();
    for c in [Channel::C2c, Channel::P2c] {
        for (s, t) in bidm.layer(Channel::F2c).ids().into_iter().zip(bidm.layer(c).ids()) {
            model.store.copy_tensor(s, t);
        }
    }
    let mut tape = model.tape();
    let rep = model
        .represent(&mut tape, &enc.contexts[0], &mut Dropout::off())
        .unwrap();
    let h_e = tape.value(rep.h_e).clone();
    let b_err = rep
        .decoupled
        .as_ref()
        .unwrap()
        .channels
        .iter()
        .map(|&c| tape.value(c).max_abs_diff(&h_e))
        .fold(0.0, f64::max);

    // (c) Copy init: bit-equal to the last encoder layer, then one step apart.
    let sel = TaskSample {
        dialogue: dialogue(&["shall we meet at noon", "noon works", "see you by the fountain"]),
        task: Task::ResponseSelection {
            candidates: vec!["at the fountain then".into(), "the sea is calm".into()],
            label: 0,
        },
    };
    let (vocab, enc) = encoded(&sel);
    let mut model = BidenModel::<f64>::new(
        tiny_model(InitMode::CopyLastEncoderLayer, false),
        TaskKind::ResponseSelection,
        vocab.len(),
        &mut rng(3, Stream::Init),
    )
    .unwrap();
    let bidm = model.bidm.unwrap();
    let tensors = |m: &BidenModel<f64>, ids: [biden::numkit::ParamId; 12]| ids.map(|id| m.store.get(id).clone());
    let last = tensors(&model, model.encoder.layers[1].ids());
    let equal_at_zero = Channel::ALL
        .iter()
        .all(|&c| tensors(&model, bidm.layer(c).ids()) == last);
    let (grads, _) = batch_gradients(&model, &[&enc], &mut Dropout::off()).unwrap();
    let mut opt = AdamW::new(&model.store, 0.9, 0.999, 1e-8, 0.01);
    opt.step(&mut model.store, &grads, 1e-3);
    let [f, c, p] = Channel::ALL.map(|c| tensors(&model, bidm.layer(c).ids()));
    let diverged = f != c && c != p && f != p;

    (
        a && b_err <= 1e-9 && equal_at_zero && diverged,
        format!(
            "(a) H_e == H_c2c bitwise: {a}; (b) max |H_e - H_k| {b_err:.1e}; \
             (c) equal at step 0: {equal_at_zero}, diverged after 1 step: {diverged}"
        ),
    )
}

fn metric_oracles() -> Verdict {
    let mut r = rng(606, Stream::Data);
    let mut bad = Vec::new();
    for case in 0..500 {
        let n = r.random_range(2..8);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..4) as f64).collect();
        let gold = r.random_range(0..n);
        if rank_of(&scores, gold) != support::rank(&scores, gold) {
            bad.push(format!("rank case {case}"));
        }
        let ranks: Vec<usize> = (0..r.random_range(1..20)).map(|_| r.random_range(1..6)).collect();
        let len = ranks.len() as f64;
        for k in 1..=2 {
            let want = ranks.iter().filter(|&&x| x <= k).count() as f64 / len;
            if (recall_at_k(&ranks, k) - want).abs() > 1e-9 {
                bad.push(format!("R@{k} case {case}"));
            }
        }
        if (mrr(&ranks) - ranks.iter().map(|&x| 1.0 / x as f64).sum::<f64>() / len).abs() > 1e-9 {
            bad.push(format!("MRR case {case}"));
        }
    }
    for case in 0..500 {
        let (p, g) = (support::words(&mut r, 6), support::words(&mut r, 6));
        if exact_match(&p, &g) != if p == g { 1.0 } else { 0.0 } {
            bad.push(format!("EM case {case}"));
        }
        if (token_f1(&p, &g) - support::token_f1(&p, &g)).abs() > 1e-9 {
            bad.push(format!("F1 case {case}"));
        }
    }
    for case in 0..500 {
        let cand = support::words(&mut r, 8);
        let refs: Vec<Vec<String>> = (0..r.random_range(1..4)).map(|_| support::words(&mut r, 8)).collect();
        if lcs_len(&cand, &refs[0]) != support::lcs(&cand, &refs[0]) {
            bad.push(format!("LCS case {case}"));
        }
        for n in 1..=2 {
            if (rouge_n(&cand, &refs, n) - support::rouge_n(&cand, &refs, n)).abs() > 1e-9 {
                bad.push(format!("ROUGE-{n} case {case}"));
            }
        }
        if (rouge_l(&cand, &refs) - support::rouge_l(&cand, &refs)).abs() > 1e-9 {
            bad.push(format!("ROUGE-L case {case}"));
        }
    }
    (
        bad.is_empty(),
        format!(
            "500 cases each for rank, R@k, MRR, EM, F1, ROUGE-1/2/L; {} mismatches{}",
            bad.len(),
            bad.first().map_or(String::new(), |b| format!(", first {b}"))
        ),
    )
}

fn ablation() -> Verdict {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/ablation.json");
    let cfg = match Config::load(path) {
        Ok(c) => c,
        Err(e) => return (false, format!("config: {e}")),
    };
    let variants = [Variant::Full, Variant::NoBidm, Variant::ZeroMasks, Variant::BiGru];
    let report = match run_ablation(&cfg, &variants, &[0, 1, 2], &mut |_, _, _| {}) {
        Ok(r) => r,
        Err(e) => return (false, format!("error: {e}")),
    };
    let get = |v| report.get(v).expect("variant ran");
    let full = get(Variant::Full);
    let fs = full.primary_per_seed();
    let mut ok = true;
    for v in [Variant::NoBidm, Variant::ZeroMasks] {
        let other = get(v);
        ok &= fs.iter().zip(other.primary_per_seed()).all(|(a, b)| *a > b);
        ok &= full.primary_mean() - other.primary_mean() >= 0.03;
    }
    ok &= get(Variant::BiGru).primary_mean() <= full.primary_mean();
    let fmt = |v: Variant| {
        let r = get(v);
        let seeds: Vec<String> = r.primary_per_seed().iter().map(|x| format!("{x:.3}")).collect();
        format!("{} {:.3} [{}]", v.name(), r.primary_mean(), seeds.join(" "))
    };
    (ok, format!("dev R@1 mean [per seed]: {}", variants.map(fmt).join(", ")))
}

fn overfit() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for task in [
        TaskKind::ResponseSelection,
        TaskKind::ExtractiveQa,
        TaskKind::Summarization,
    ] {
        let mut cfg = Config {
            task,
            seed: 0,
            ..Config::default()
        };
        cfg.train.lr = 1e-3;
        cfg.train.batch_size = 8;
        cfg.train.max_steps = Some(2000);
        cfg.train.target_train_metric = Some(0.99);
        cfg.train.eval_every = 25;
        cfg.data.synth.train_size = 64;
        cfg.data.synth.dev_size = 0;
        let outcome = prepare(&cfg).and_then(|data| {
            if data.train.len() != 64 {
                return Err(biden::Error::Config(format!(
                    "{} of 64 samples usable",
                    data.train.len()
                )));
            }
            train::<f32>(&cfg, &data, &mut |_| {})
        });
        match outcome {
            Ok(out) => {
                let metric = out.train_metric.unwrap_or(0.0);
                ok &= metric >= 0.99 && out.steps <= 2000;
                parts.push(format!("{} {metric:.3} after {} steps", task.as_str(), out.steps));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{}: {e}", task.as_str()));
            }
        }
    }
    (ok, parts.join(", "))
}

fn export_structure() -> Verdict {
    let mut checked = 0usize;
    let mut bad = Vec::new();
    for (k, task) in [SynthTask::Selection, SynthTask::Qa, SynthTask::Summary]
        .into_iter()
        .enumerate()
    {
        let samples = synth_gen(task, 10, 900 + k as u64, &SynthConfig::default());
        let vocab = Vocab::build(&samples, 1000);
        let cfg = ModelConfig {
            d: 16,
            heads: 2,
            layers: 1,
            d_ff: 32,
            d_g: 8,
            ..ModelConfig::default()
        };
        let model = BidenModel::<f64>::new(
            cfg,
            samples[0].task.kind(),
            vocab.len(),
            &mut rng(k as u64, Stream::Init),
        )
        .unwrap();
        for s in &samples {
            let enc = tokenize(s, &vocab, &TokenizeConfig::default()).unwrap();
            for ctx in 0..enc.contexts.len() {
                let e = export_attention(&model, &vocab, &enc, ctx).unwrap();
                let u = &e.utterance;
                // Utterance blocks recomputed from the boundaries alone.
                let block_of = |t: usize| e.boundaries.iter().position(|&(a, b)| a <= t && t < b).unwrap();
                for (name, ch) in &e.channels {
                    for (h, w) in ch.heads.iter().enumerate() {
                        for (i, row) in w.iter().enumerate() {
                            for (j, &v) in row.iter().enumerate() {
                                checked += 1;
                                let (bi, bj) = (block_of(i), block_of(j));
                                if bi != u[i] || bj != u[j] {
                                    bad.push(format!("{}: boundary mismatch at token {i}", e.sample_id));
                                }
                                let inside = match name.as_str() {
                                    "c2c" => bj == bi,
                                    "p2c" => bj < bi,
                                    "f2c" => bj > bi,
                                    _ => false,
                                };
                                if v != 0.0 && !inside {
                                    bad.push(format!("{} {name} head {h} ({i}, {j}) = {v}", e.sample_id));
                                }
                            }
                            let sum: f64 = row.iter().sum();
                            if ch.valid[i] && (sum - 1.0).abs() > 1e-6 || !ch.valid[i] && sum != 0.0 {
                                bad.push(format!("{} {name} head {h} row {i} sums to {sum}", e.sample_id));
                            }
                        }
                    }
                }
            }
        }
    }
    (
        bad.is_empty(),
        format!(
            "30 samples, {checked} exported weights scanned, {} structural violations{}",
            bad.len(),
            bad.first().map_or(String::new(), |b| format!(", first {b}"))
        ),
    )
}
