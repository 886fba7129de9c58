//! Bidirectional information decoupling and Mixture-of-Experts fusion.
//!
//! Three independent masked transformer layers read the same `H` and each
//! sees one temporal slice of the dialogue. A per-token, per-feature softmax
//! gate over the three channels then mixes them back into `H_e`.

use rand_chacha::ChaCha8Rng;

use crate::encoder::{transformer_layer, Attention, Dropout, EncoderParams, LayerParams};
use crate::error::{Error, Result};
use crate::masking::{Channel, DecouplingMasks};
use crate::numkit::{ParamId, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BidmParams {
    /// Indexed by [`Channel::index`].
    pub layers: [LayerParams; 3],
}

impl BidmParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> Self {
        BidmParams {
            layers: Channel::ALL.map(|c| LayerParams::init(store, &format!("bidm.{}", c.name()), d, d_ff, rng)),
        }
    }

    pub fn layer(&self, c: Channel) -> &LayerParams {
        &self.layers[c.index()]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MoeParams {
    /// `4d×d` expert projections, by channel.
    pub w: [ParamId; 3],
    pub b: [ParamId; 3],
    /// Gate: one `3d×d` matrix per expert; together the `3d×d×3` tensor.
    pub wg: [ParamId; 3],
}

impl MoeParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, d: usize, rng: &mut ChaCha8Rng) -> Self {
        let names = Channel::ALL.map(Channel::name);
        MoeParams {
            w: names.map(|c| store.uniform(format!("moe.w_{c}"), [4 * d, d], rng)),
            b: names.map(|c| store.zeros(format!("moe.b_{c}"), [d])),
            wg: names.map(|c| store.uniform(format!("moe.wg_{c}"), [3 * d, d], rng)),
        }
    }
}

/// The three channel outputs (by [`Channel::index`]) and their attention.
pub struct Decoupled {
    pub channels: [Var; 3],
    pub attention: Vec<Attention>,
}

/// Runs each channel's masked layer over `h`. Rows invalid in a channel are
/// zero in its output.
pub fn decouple<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    masks: &DecouplingMasks<T>,
    p: &BidmParams,
    heads: usize,
    drop: &mut Dropout<'_>,
) -> Result<Decoupled> {
    if tape.shape(h)[0] != masks.n() {
        return Err(Error::Shape {
            op: "decouple",
            left: tape.shape(h).to_vec(),
            right: vec![masks.n(), masks.n()],
        });
    }
    let mut channels = Vec::with_capacity(3);
    let mut attention = Vec::with_capacity(3);
    for c in Channel::ALL {
        let (out, att) = transformer_layer(tape, h, masks.mask(c), p.layer(c), heads, drop)?;
        channels.push(tape.mask_rows(out, masks.valid(c))?);
        attention.push(att);
    }
    Ok(Decoupled {
        channels: [channels[0], channels[1], channels[2]],
        attention,
    })
}

/// `[X; Y; X−Y; X⊙Y]` along features.
pub fn heuristic_match<T: Real>(tape: &mut Tape<'_, T>, x: Var, y: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::Shape {
            op: "heuristic_match",
            left: tape.shape(x).to_vec(),
            right: tape.shape(y).to_vec(),
        });
    }
    let diff = tape.sub(x, y)?;
    let prod = tape.mul(x, y)?;
    tape.concat_cols(&[x, y, diff, prod])
}

/// Fusion result: `H_e` and the gate `G` as an `(n·d)×3` matrix.
pub struct Fused {
    pub h_e: Var,
    pub gate: Var,
}

/// Weighted sum over channels with an `(n·d)×3` weight matrix.
fn mix<T: Real>(tape: &mut Tape<'_, T>, channels: &[Var; 3], weights: Var) -> Result<Var> {
    let shape = tape.shape(channels[0]).to_vec();
    let stacked = tape.stack_last(channels)?;
    let stacked = tape.reshape(stacked, vec![shape[0] * shape[1], 3])?;
    let weighted = tape.mul(stacked, weights)?;
    let summed = tape.sum_last(weighted);
    tape.reshape(summed, shape)
}

/// `m_g` repeated over the `d` features of each token.
fn broadcast_fusion_mask<T: Real>(m_g: &Tensor<T>, d: usize) -> Tensor<T> {
    let n = m_g.rows();
    let mut data = Vec::with_capacity(n * d * 3);
    for i in 0..n {
        for _ in 0..d {
            data.extend_from_slice(m_g.row(i));
        }
    }
    Tensor::new(vec![n * d, 3], data).expect("n·d rows of 3")
}

/// `S_k = ReLU([H; H_k; H−H_k; H⊙H_k] W_k + b_k)`,
/// `G = softmax_k([S_f; S_c; S_p] W_g + M_g)`, `H_e = Σ_k G_k ⊙ H_k`.
pub fn moe_fuse<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    channels: &[Var; 3],
    m_g: &Tensor<T>,
    p: &MoeParams,
) -> Result<Fused> {
    let shape = tape.shape(h).to_vec();
    let (n, d) = (shape[0], shape[1]);
    let mut scores = Vec::with_capacity(3);
    for (k, &hk) in channels.iter().enumerate() {
        let m = heuristic_match(tape, h, hk)?;
        let (w, b) = (tape.param(p.w[k]), tape.param(p.b[k]));
        let s = tape.linear(m, w, Some(b))?;
        scores.push(tape.relu(s));
    }
    let s = tape.concat_cols(&scores)?;
    let mut logits = Vec::with_capacity(3);
    for &wg in &p.wg {
        let wg = tape.param(wg);
        logits.push(tape.matmul(s, wg)?);
    }
    let stacked = tape.stack_last(&logits)?;
    let flat = tape.reshape(stacked, vec![n * d, 3])?;
    let (gate, _) = tape.masked_softmax(flat, &broadcast_fusion_mask(m_g, d))?;
    let h_e = mix(tape, channels, gate)?;
    Ok(Fused { h_e, gate })
}

/// Ablation: `H_e` is the plain mean of the channels valid at each token.
pub fn mean_pool_fuse<T: Real>(
    tape: &mut Tape<'_, T>,
    channels: &[Var; 3],
    masks: &DecouplingMasks<T>,
) -> Result<Fused> {
    let d = tape.shape(channels[0])[1];
    let n = masks.n();
    let mut w = Vec::with_capacity(n * d * 3);
    for i in 0..n {
        let valid: Vec<bool> = Channel::ALL.iter().map(|&c| masks.valid(c)[i]).collect();
        let count = valid.iter().filter(|&&v| v).count();
        let row: Vec<T> = valid
            .iter()
            .map(|&v| {
                if v {
                    T::one() / T::from_f64(count as f64)
                } else {
                    T::zero()
                }
            })
            .collect();
        for _ in 0..d {
            w.extend_from_slice(&row);
        }
    }
    let gate = tape.constant(Tensor::new(vec![n * d, 3], w)?);
    let h_e = mix(tape, channels, gate)?;
    Ok(Fused { h_e, gate })
}

/// Copies the last encoder layer into all three decoupling layers.
pub fn init_copy_last_encoder_layer<T: Real>(
    store: &mut ParamStore<T>,
    enc: &EncoderParams,
    bidm: &BidmParams,
) -> Result<()> {
    let last = enc
        .layers
        .last()
        .ok_or_else(|| Error::Config("copy-and-reuse init needs an encoder layer".into()))?;
    for layer in &bidm.layers {
        for (src, dst) in last.ids().into_iter().zip(layer.ids()) {
            if store.get(src).shape() != store.get(dst).shape() {
                return Err(Error::Shape {
                    op: "init_copy_last_encoder_layer",
                    left: store.get(src).shape().to_vec(),
                    right: store.get(dst).shape().to_vec(),
                });
            }
            store.copy_tensor(src, dst);
        }
    }
    Ok(())
}
