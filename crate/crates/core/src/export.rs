//! Attention export: per-channel, per-head decoupling attention weights and
//! the fusion gate for one context, as JSON.
//!
//! Field names are stable:
//!
//! * `tokens`: token strings, `utterance`: token → utterance index,
//!   `boundaries`: `[start, end)` token range of each utterance.
//! * `channels`: `f2c`, `c2c`, `p2c`, each with `valid` (per-row) and
//!   `heads` (`heads × n × n` post-softmax weights, rows = queries).
//! * `gate`: `n × 3` fusion weights averaged over features, columns in
//!   `gate_order`; absent for models without gated fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Encoded, Payload, TokenizedContext, Vocab};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::masking::Channel;
use crate::model::BidenModel;
use crate::numkit::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelExport {
    pub valid: Vec<bool>,
    pub heads: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub sample_id: String,
    pub context: usize,
    pub tokens: Vec<String>,
    pub utterance: Vec<usize>,
    pub boundaries: Vec<(usize, usize)>,
    pub channels: BTreeMap<String, ChannelExport>,
    pub gate_order: Vec<String>,
    pub gate: Option<Vec<[f64; 3]>>,
}

/// `[start, end)` of each utterance, from the token → utterance map.
pub fn utterance_boundaries(utterance: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for (i, &u) in utterance.iter().enumerate() {
        match out.get_mut(u) {
            Some(b) => b.1 = i + 1,
            None => out.push((i, i + 1)),
        }
    }
    out
}

/// The context exported by default: the gold candidate for selection, the
/// only context otherwise.
pub fn default_context(sample: &Encoded) -> usize {
    match sample.payload {
        Payload::Selection { label } => label,
        _ => 0,
    }
}

/// Runs the model on context `context` of `sample` and collects its
/// decoupling attention.
pub fn export_attention<T: Real>(
    model: &BidenModel<T>,
    vocab: &Vocab,
    sample: &Encoded,
    context: usize,
) -> Result<AttentionExport> {
    let ctx: &TokenizedContext = sample
        .contexts
        .get(context)
        .ok_or_else(|| Error::Config(format!("sample {} has no context {context}", sample.id)))?;
    let mut tape = model.tape();
    let rep = model.represent(&mut tape, ctx, &mut Dropout::off())?;
    let dec = rep
        .decoupled
        .as_ref()
        .ok_or_else(|| Error::Config("this model has no decoupling layers to export".into()))?;
    let n = ctx.len();
    let mut channels = BTreeMap::new();
    for c in Channel::ALL {
        let att = &dec.attention[c.index()];
        let heads = att
            .weights
            .iter()
            .map(|&w| {
                let t = tape.value(w);
                (0..n).map(|i| t.row(i).iter().map(|v| v.as_f64()).collect()).collect()
            })
            .collect();
        channels.insert(
            c.name().to_string(),
            ChannelExport {
                valid: att.valid.clone(),
                heads,
            },
        );
    }
    let gate = match (&rep.fused, model.moe.is_some()) {
        (Some(f), true) => {
            let g = tape.value(f.gate);
            let d = g.rows() / n;
            Some(
                (0..n)
                    .map(|i| {
                        let mut avg = [0.0; 3];
                        for r in i * d..(i + 1) * d {
                            for (k, a) in avg.iter_mut().enumerate() {
                                *a += g.at(r, k).as_f64() / d as f64;
                            }
                        }
                        avg
                    })
                    .collect(),
            )
        }
        _ => None,
    };
    Ok(AttentionExport {
        sample_id: sample.id.clone(),
        context,
        tokens: ctx.token_ids.iter().map(|&t| vocab.token(t).to_string()).collect(),
        utterance: ctx.utterance.clone(),
        boundaries: utterance_boundaries(&ctx.utterance),
        channels,
        gate_order: Channel::ALL.iter().map(|c| c.name().to_string()).collect(),
        gate,
    })
}

/// Scans an export for structural violations: weight outside the channel's
/// utterance blocks, valid rows not summing to 1 within `tol`, nonzero
/// invalid rows. Returns one message per violation.
pub fn structure_violations(export: &AttentionExport, tol: f64) -> Vec<String> {
    let mut out = Vec::new();
    let u = &export.utterance;
    for c in Channel::ALL {
        let Some(ch) = export.channels.get(c.name()) else {
            out.push(format!("missing channel {}", c.name()));
            continue;
        };
        for (h, w) in ch.heads.iter().enumerate() {
            for (i, row) in w.iter().enumerate() {
                let sum: f64 = row.iter().sum();
                if ch.valid[i] && (sum - 1.0).abs() > tol {
                    out.push(format!("{} head {h} row {i}: sums to {sum}", c.name()));
                }
                if !ch.valid[i] && row.iter().any(|&v| v != 0.0) {
                    out.push(format!("{} head {h} row {i}: invalid row has weight", c.name()));
                }
                let allowed = |j: usize| match c {
                    Channel::C2c => u[j] == u[i],
                    Channel::P2c => u[j] < u[i],
                    Channel::F2c => u[j] > u[i],
                };
                for (j, &v) in row.iter().enumerate() {
                    if v != 0.0 && !allowed(j) {
                        out.push(format!(
                            "{} head {h}: weight {v} at ({i}, {j}) crosses blocks",
                            c.name()
                        ));
                    }
                }
            }
        }
    }
    out
}
