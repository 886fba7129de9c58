//! The assembled network: parameters for one task plus the forward passes
//! that turn an [`Encoded`] sample into a loss or a prediction.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bidm::{
    decouple, init_copy_last_encoder_layer, mean_pool_fuse, moe_fuse, BidmParams, Decoupled, Fused, MoeParams,
};
use crate::data::{Encoded, Payload, TaskKind, TokenizedContext};
use crate::encoder::{embed, encode, Dropout, EncoderParams};
use crate::error::{Error, Result};
use crate::heads::decoder::{argmax, greedy_decode, summarize_loss, DecoderParams};
use crate::heads::qa::{answer_positions, best_span, span_log_probs, QaParams};
use crate::heads::rnn::{bi_rnn_baseline, BiRnnParams, RnnKind};
use crate::heads::selection::{candidate_scores, dialogue_vector, select_response, Readout, SelectionParams};
use crate::masking::{key_padding_mask, DecouplingMasks, MaskCache};
use crate::numkit::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    #[default]
    Random,
    /// The three decoupling layers start as copies of the last encoder layer.
    CopyLastEncoderLayer,
}

/// Switches that remove or replace parts of the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// `H_e := H`.
    pub no_bidm: bool,
    /// All three channels attend everywhere.
    pub zero_masks: bool,
    /// `H_e` is the mean of valid channels instead of the gated mixture.
    pub mean_pool_fusion: bool,
    /// The selection head averages utterance vectors instead of running the
    /// Bi-GRU.
    pub no_bigru: bool,
    /// A token-level bidirectional RNN over `H` replaces decoupling and
    /// fusion.
    pub bi_rnn_baseline: Option<RnnKind>,
}

impl Ablation {
    pub fn uses_bidm(&self) -> bool {
        !self.no_bidm && self.bi_rnn_baseline.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Bi-GRU hidden size per direction in the selection head.
    pub d_g: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_len: usize,
    pub max_target_len: usize,
    pub dropout: f64,
    pub max_span: usize,
    pub readout: Readout,
    pub ablation: Ablation,
    pub init: InitMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            d_g: 32,
            decoder_layers: 2,
            decoder_heads: 2,
            max_len: 128,
            max_target_len: 32,
            dropout: 0.0,
            max_span: 20,
            readout: Readout::FinalStates,
            ablation: Ablation::default(),
            init: InitMode::Random,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return bad(format!(
                "d = {} must be a positive multiple of heads = {}",
                self.d, self.heads
            ));
        }
        if self.decoder_heads == 0 || !self.d.is_multiple_of(self.decoder_heads) {
            return bad(format!(
                "d = {} is not divisible by decoder_heads = {}",
                self.d, self.decoder_heads
            ));
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.d_ff == 0 || self.d_g == 0 || self.max_len < 4 || self.max_target_len < 2 {
            return bad("d_ff, d_g, max_len and max_target_len must be positive".into());
        }
        if self.ablation.bi_rnn_baseline.is_some() && !self.d.is_multiple_of(2) {
            return bad("the bidirectional RNN baseline needs an even d".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must lie in [0, 1)", self.dropout));
        }
        Ok(())
    }
}

/// Intermediate values of one context's forward pass.
pub struct Representation<T: Real> {
    pub h: Var,
    pub h_e: Var,
    pub masks: Option<Arc<DecouplingMasks<T>>>,
    pub decoupled: Option<Decoupled>,
    pub fused: Option<Fused>,
}

/// Per-sample result of a training forward pass, for train-set metrics.
#[derive(Clone, Debug, PartialEq)]
pub enum Scored {
    /// Candidate log-probabilities.
    Selection { log_probs: Vec<f64>, label: usize },
    /// Start/end log-probabilities and the gold span.
    Qa {
        start: Vec<f64>,
        end: Vec<f64>,
        allowed: Vec<bool>,
        span: (usize, usize),
    },
    /// Teacher-forced next-token hits.
    Summary { correct: usize, total: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    /// Candidate scores (higher is better).
    Scores(Vec<f64>),
    /// Predicted token span and its tokens.
    Span {
        span: Option<(usize, usize)>,
        tokens: Vec<usize>,
    },
    /// Generated summary token ids.
    Tokens(Vec<usize>),
}

pub struct BidenModel<T: Real = f64> {
    pub config: ModelConfig,
    pub task: TaskKind,
    pub vocab_size: usize,
    pub store: ParamStore<T>,
    pub encoder: EncoderParams,
    pub bidm: Option<BidmParams>,
    pub moe: Option<MoeParams>,
    pub birnn: Option<BiRnnParams>,
    pub selection: Option<SelectionParams>,
    pub qa: Option<QaParams>,
    pub decoder: Option<DecoderParams>,
    masks: MaskCache<T>,
}

impl<T: Real> BidenModel<T> {
    /// Builds and initializes every parameter the task and ablations use.
    pub fn new(config: ModelConfig, task: TaskKind, vocab_size: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, vocab_size, c.max_len, c.d, c.d_ff, c.layers, rng);
        let (bidm, moe, birnn) = match c.ablation.bi_rnn_baseline {
            Some(kind) => (
                None,
                None,
                Some(BiRnnParams::init(&mut store, "birnn", kind, c.d, c.d / 2, rng)),
            ),
            None if c.ablation.no_bidm => (None, None, None),
            None => {
                let bidm = BidmParams::init(&mut store, c.d, c.d_ff, rng);
                let moe = (!c.ablation.mean_pool_fusion).then(|| MoeParams::init(&mut store, c.d, rng));
                (Some(bidm), moe, None)
            }
        };
        let mut model = BidenModel {
            selection: (task == TaskKind::ResponseSelection)
                .then(|| SelectionParams::init(&mut store, c.d, c.d_g, rng)),
            qa: (task == TaskKind::ExtractiveQa).then(|| QaParams::init(&mut store, c.d, rng)),
            decoder: (task == TaskKind::Summarization).then(|| {
                DecoderParams::init(
                    &mut store,
                    encoder.tokens,
                    c.max_target_len,
                    c.d,
                    c.d_ff,
                    c.decoder_layers,
                    c.decoder_heads,
                    rng,
                )
            }),
            config: config.clone(),
            task,
            vocab_size,
            store,
            encoder,
            bidm,
            moe,
            birnn,
            masks: MaskCache::new(),
        };
        if config.init == InitMode::CopyLastEncoderLayer {
            if let Some(bidm) = model.bidm {
                init_copy_last_encoder_layer(&mut model.store, &model.encoder, &bidm)?;
            }
        }
        Ok(model)
    }

    /// A copy of this model with parameters cast to another precision.
    pub fn cast<U: Real>(&self) -> BidenModel<U> {
        BidenModel {
            config: self.config.clone(),
            task: self.task,
            vocab_size: self.vocab_size,
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            bidm: self.bidm,
            moe: self.moe,
            birnn: self.birnn,
            selection: self.selection,
            qa: self.qa,
            decoder: self.decoder.clone(),
            masks: MaskCache::new(),
        }
    }

    pub fn tape(&self) -> Tape<'_, T> {
        Tape::with_params(&self.store)
    }

    /// Decoupling masks for `ctx`, from the cache.
    pub fn masks_for(&self, ctx: &TokenizedContext) -> Arc<DecouplingMasks<T>> {
        self.masks
            .get(&ctx.utterance, &ctx.pad_mask(), self.config.ablation.zero_masks)
    }

    /// `E → H → (H_f2c, H_c2c, H_p2c) → H_e` for one context.
    pub fn represent(
        &self,
        tape: &mut Tape<'_, T>,
        ctx: &TokenizedContext,
        drop: &mut Dropout<'_>,
    ) -> Result<Representation<T>> {
        let c = &self.config;
        let e = embed(tape, ctx, &self.encoder)?;
        let pad = ctx.pad_mask();
        let base = if pad.iter().any(|&p| p) {
            key_padding_mask(&pad)
        } else {
            Tensor::zeros(vec![ctx.len(), ctx.len()])
        };
        let h = encode(tape, e, &self.encoder, &base, c.heads, drop)?;
        let mut rep = Representation {
            h,
            h_e: h,
            masks: None,
            decoupled: None,
            fused: None,
        };
        if let Some(rnn) = &self.birnn {
            rep.h_e = bi_rnn_baseline(tape, h, rnn)?;
            return Ok(rep);
        }
        let Some(bidm) = &self.bidm else {
            return Ok(rep);
        };
        let masks = self.masks_for(ctx);
        let dec = decouple(tape, h, &masks, bidm, c.heads, drop)?;
        let fused = match &self.moe {
            Some(moe) => moe_fuse(tape, h, &dec.channels, &masks.m_g, moe)?,
            None => mean_pool_fuse(tape, &dec.channels, &masks)?,
        };
        rep.h_e = fused.h_e;
        rep.masks = Some(masks);
        rep.decoupled = Some(dec);
        rep.fused = Some(fused);
        Ok(rep)
    }

    fn head<'a, P>(&self, p: &'a Option<P>) -> Result<&'a P> {
        p.as_ref()
            .ok_or_else(|| Error::Config(format!("this model was built for {}", self.task.as_str())))
    }

    fn h_d(&self, tape: &mut Tape<'_, T>, ctx: &TokenizedContext, drop: &mut Dropout<'_>) -> Result<Var> {
        let p = self.head(&self.selection)?;
        let rep = self.represent(tape, ctx, drop)?;
        dialogue_vector(
            tape,
            rep.h_e,
            ctx,
            p,
            self.config.readout,
            self.config.ablation.no_bigru,
        )
    }

    /// Task loss for one sample.
    pub fn loss(&self, tape: &mut Tape<'_, T>, sample: &Encoded, drop: &mut Dropout<'_>) -> Result<(Var, Scored)> {
        match &sample.payload {
            Payload::Selection { label } => {
                let p = self.head(&self.selection)?;
                let h_d = sample
                    .contexts
                    .iter()
                    .map(|ctx| self.h_d(tape, ctx, drop))
                    .collect::<Result<Vec<_>>>()?;
                let (logp, loss) = select_response(tape, &h_d, *label, p)?;
                let log_probs = tape.value(logp).to_f64_vec();
                Ok((
                    loss,
                    Scored::Selection {
                        log_probs,
                        label: *label,
                    },
                ))
            }
            Payload::Qa { span, .. } => {
                let p = self.head(&self.qa)?;
                let ctx = &sample.contexts[0];
                let rep = self.represent(tape, ctx, drop)?;
                let (ls, le, loss) = crate::heads::qa::qa_spans(tape, rep.h_e, ctx, *span, p)?;
                Ok((
                    loss,
                    Scored::Qa {
                        start: tape.value(ls).to_f64_vec(),
                        end: tape.value(le).to_f64_vec(),
                        allowed: answer_positions(ctx),
                        span: *span,
                    },
                ))
            }
            Payload::Summary { target, .. } => {
                let p = self.head(&self.decoder)?;
                let ctx = &sample.contexts[0];
                let rep = self.represent(tape, ctx, drop)?;
                let (loss, logits) = summarize_loss(tape, rep.h_e, &ctx.pad_mask(), target, p, drop)?;
                let lv = tape.value(logits);
                let correct = (0..lv.rows()).filter(|&t| argmax(lv.row(t)) == target[t + 1]).count();
                Ok((
                    loss,
                    Scored::Summary {
                        correct,
                        total: lv.rows(),
                    },
                ))
            }
        }
    }

    /// Inference for one sample (no dropout).
    pub fn predict(&self, sample: &Encoded) -> Result<Prediction> {
        let mut drop = Dropout::off();
        let mut tape = self.tape();
        match &sample.payload {
            Payload::Selection { .. } => {
                let p = self.head(&self.selection)?;
                let h_d = sample
                    .contexts
                    .iter()
                    .map(|ctx| self.h_d(&mut tape, ctx, &mut drop))
                    .collect::<Result<Vec<_>>>()?;
                let s = candidate_scores(&mut tape, &h_d, p)?;
                Ok(Prediction::Scores(tape.value(s).to_f64_vec()))
            }
            Payload::Qa { .. } => {
                let p = self.head(&self.qa)?;
                let ctx = &sample.contexts[0];
                let rep = self.represent(&mut tape, ctx, &mut drop)?;
                let (ls, le) = span_log_probs(&mut tape, rep.h_e, ctx, p)?;
                let span = best_span(
                    &tape.value(ls).to_f64_vec(),
                    &tape.value(le).to_f64_vec(),
                    &answer_positions(ctx),
                    self.config.max_span,
                );
                let tokens = span
                    .map(|(s, e)| {
                        (s..=e)
                            .filter(|&i| ctx.flags[i].is_content())
                            .map(|i| ctx.token_ids[i])
                            .collect()
                    })
                    .unwrap_or_default();
                Ok(Prediction::Span { span, tokens })
            }
            Payload::Summary { .. } => {
                let p = self.head(&self.decoder)?;
                let ctx = &sample.contexts[0];
                let rep = self.represent(&mut tape, ctx, &mut drop)?;
                let out = greedy_decode(&mut tape, rep.h_e, &ctx.pad_mask(), p, self.config.max_target_len)?;
                Ok(Prediction::Tokens(out))
            }
        }
    }
}
