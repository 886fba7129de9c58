//! Token/position/segment embeddings and the post-norm transformer stack.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::data::TokenizedContext;
use crate::error::{Error, Result};
use crate::numkit::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Layer-norm epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Attention projections. Head `i` uses columns `i·d_k..(i+1)·d_k` of
/// `wq`, `wk` and `wv`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

impl AttnParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = |name: &str| store.uniform(format!("{prefix}.{name}"), [d, d], rng);
        AttnParams {
            wq: w("wq"),
            wk: w("wk"),
            wv: w("wv"),
            wo: w("wo"),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// Parameters of one transformer layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub attn: AttnParams,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
}

impl LayerParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        let attn = AttnParams::init(store, prefix, d, rng);
        let w1 = store.uniform(format!("{prefix}.w1"), [d, d_ff], rng);
        let w2 = store.uniform(format!("{prefix}.w2"), [d_ff, d], rng);
        LayerParams {
            attn,
            w1,
            w2,
            b1: store.zeros(format!("{prefix}.b1"), [d_ff]),
            b2: store.zeros(format!("{prefix}.b2"), [d]),
            ln1_g: store.ones(format!("{prefix}.ln1_g"), [d]),
            ln1_b: store.zeros(format!("{prefix}.ln1_b"), [d]),
            ln2_g: store.ones(format!("{prefix}.ln2_g"), [d]),
            ln2_b: store.zeros(format!("{prefix}.ln2_b"), [d]),
        }
    }

    pub fn ids(&self) -> [ParamId; 12] {
        let [wq, wk, wv, wo] = self.attn.ids();
        [
            wq, wk, wv, wo, self.w1, self.b1, self.w2, self.b2, self.ln1_g, self.ln1_b, self.ln2_g, self.ln2_b,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderParams {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub segments: ParamId,
    pub layers: Vec<LayerParams>,
}

impl EncoderParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        vocab: usize,
        max_len: usize,
        d: usize,
        d_ff: usize,
        layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        // Embedding rows: small symmetric uniform, independent of table size.
        let bound = (3.0 / d as f64).sqrt();
        let tokens = store.uniform_bound("emb.tokens", [vocab, d], bound, rng);
        let positions = store.uniform_bound("emb.positions", [max_len, d], bound, rng);
        let segments = store.uniform_bound("emb.segments", [2, d], bound, rng);
        let layers = (0..layers)
            .map(|l| LayerParams::init(store, &format!("enc.{l}"), d, d_ff, rng))
            .collect();
        EncoderParams {
            tokens,
            positions,
            segments,
            layers,
        }
    }
}

/// Inverted dropout. `rate == 0` (the default) is the identity and consumes
/// no randomness.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Dropout<'_> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply<T: Real>(&mut self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let shape = tape.shape(x).to_vec();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                if rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        tape.mul_const(x, &Tensor::new(shape, data)?)
    }
}

/// `E = E_T[w] + E_P[pos] + E_S[seg]`, one row per token.
pub fn embed<T: Real>(tape: &mut Tape<'_, T>, ctx: &TokenizedContext, p: &EncoderParams) -> Result<Var> {
    let tok = tape.param(p.tokens);
    let pos = tape.param(p.positions);
    let seg = tape.param(p.segments);
    let check = |what: &str, ids: &[usize], rows: usize| -> Result<()> {
        match ids.iter().find(|&&i| i >= rows) {
            Some(bad) => Err(Error::contract(format!(
                "{what} id {bad} out of range for a table of {rows} rows"
            ))),
            None => Ok(()),
        }
    };
    check("token", &ctx.token_ids, tape.value(tok).rows())?;
    check("position", &ctx.position_ids, tape.value(pos).rows())?;
    check("segment", &ctx.segment_ids, tape.value(seg).rows())?;
    let et = tape.gather(tok, &ctx.token_ids)?;
    let ep = tape.gather(pos, &ctx.position_ids)?;
    let es = tape.gather(seg, &ctx.segment_ids)?;
    let s = tape.add(et, ep)?;
    tape.add(s, es)
}

/// Output of [`multi_head_attention`]: the projected result and each head's
/// post-softmax weights.
pub struct Attention {
    pub out: Var,
    pub weights: Vec<Var>,
    pub valid: Vec<bool>,
}

/// `Concat_i(softmax(Q_i K_iᵀ/√d_k + mask) V_i) · W^O` with queries from `xq`
/// and keys/values from `xkv`. Rows with every key masked come out zero.
pub fn multi_head_attention<T: Real>(
    tape: &mut Tape<'_, T>,
    xq: Var,
    xkv: Var,
    mask: &Tensor<T>,
    p: &AttnParams,
    heads: usize,
) -> Result<Attention> {
    let d = tape.shape(xq)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("d = {d} is not divisible by {heads} heads")));
    }
    let dk = d / heads;
    let (wq, wk, wv, wo) = (tape.param(p.wq), tape.param(p.wk), tape.param(p.wv), tape.param(p.wo));
    let q = tape.matmul(xq, wq)?;
    let k = tape.matmul(xkv, wk)?;
    let v = tape.matmul(xkv, wv)?;
    let scale = T::from_f64(1.0 / (dk as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    let mut valid = Vec::new();
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let (a, ok) = tape.masked_softmax(s, mask)?;
        outs.push(tape.matmul(a, vh)?);
        weights.push(a);
        valid = ok;
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let out = tape.matmul(cat, wo)?;
    Ok(Attention { out, weights, valid })
}

/// `FFN(x) = ReLU(x W₁ + b₁) W₂ + b₂`.
pub fn feed_forward<T: Real>(tape: &mut Tape<'_, T>, x: Var, [w1, b1, w2, b2]: [ParamId; 4]) -> Result<Var> {
    let (w1, b1, w2, b2) = (tape.param(w1), tape.param(b1), tape.param(w2), tape.param(b2));
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.relu(h);
    tape.linear(h, w2, Some(b2))
}

/// Post-norm layer: `LN(FFN(LN(MHA(x) + x)) + LN(MHA(x) + x))`.
pub fn transformer_layer<T: Real>(
    tape: &mut Tape<'_, T>,
    x: Var,
    mask: &Tensor<T>,
    p: &LayerParams,
    heads: usize,
    drop: &mut Dropout<'_>,
) -> Result<(Var, Attention)> {
    let att = multi_head_attention(tape, x, x, mask, &p.attn, heads)?;
    let a = drop.apply(tape, att.out)?;
    let r = tape.add(a, x)?;
    let (g1, bt1) = (tape.param(p.ln1_g), tape.param(p.ln1_b));
    let h = tape.layer_norm(r, g1, bt1, LN_EPS)?;
    let f = feed_forward(tape, h, [p.w1, p.b1, p.w2, p.b2])?;
    let f = drop.apply(tape, f)?;
    let r2 = tape.add(f, h)?;
    let (g2, bt2) = (tape.param(p.ln2_g), tape.param(p.ln2_b));
    Ok((tape.layer_norm(r2, g2, bt2, LN_EPS)?, att))
}

/// Applies every encoder layer in order with the same `mask`.
pub fn encode<T: Real>(
    tape: &mut Tape<'_, T>,
    e: Var,
    p: &EncoderParams,
    mask: &Tensor<T>,
    heads: usize,
    drop: &mut Dropout<'_>,
) -> Result<Var> {
    if p.layers.is_empty() {
        return Err(Error::Config("the encoder needs at least one layer".into()));
    }
    let mut h = e;
    for layer in &p.layers {
        h = transformer_layer(tape, h, mask, layer, heads, drop)?.0;
    }
    Ok(h)
}
