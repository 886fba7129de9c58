//! Additive attention masks: the three decoupling channels, the fusion mask,
//! padding and the decoder's causal mask.
//!
//! Masks are additive: `0` keeps an entry, [`NEG_INF`] removes it. A row with
//! no kept entry is *invalid*; softmax over it yields zeros.

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use crate::numkit::{Real, Tensor, NEG_INF};

/// One of the three temporal channels. The discriminant is the column of the
/// fusion mask and the expert index of the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    /// Future-to-current: token `i` sees tokens of later utterances.
    F2c = 0,
    /// Current-to-current: token `i` sees its own utterance.
    C2c = 1,
    /// Past-to-current: token `i` sees tokens of earlier utterances.
    P2c = 2,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::F2c, Channel::C2c, Channel::P2c];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::F2c => "f2c",
            Channel::C2c => "c2c",
            Channel::P2c => "p2c",
        }
    }

    /// Whether query utterance `qi` may attend key utterance `kj`.
    pub fn admits(self, qi: usize, kj: usize) -> bool {
        match self {
            Channel::F2c => qi < kj,
            Channel::C2c => qi == kj,
            Channel::P2c => qi > kj,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecouplingMasks<T: Real = f64> {
    /// Indexed by [`Channel::index`]; each `n×n`.
    pub masks: [Tensor<T>; 3],
    /// `valid[c][i]`: row `i` of channel `c` keeps at least one entry.
    pub valid: [Vec<bool>; 3],
    /// `n×3`; `0` where the channel is valid for the token.
    pub m_g: Tensor<T>,
    /// Set by [`zero_masks`]: the partition invariant does not hold.
    pub ablation: bool,
}

impl<T: Real> DecouplingMasks<T> {
    pub fn n(&self) -> usize {
        self.m_g.rows()
    }

    pub fn mask(&self, c: Channel) -> &Tensor<T> {
        &self.masks[c.index()]
    }

    pub fn valid(&self, c: Channel) -> &[bool] {
        &self.valid[c.index()]
    }

    fn from_masks(masks: [Tensor<T>; 3], ablation: bool) -> Self {
        let n = masks[0].rows();
        let thr = T::from_f64(NEG_INF * 0.5);
        let valid: [Vec<bool>; 3] =
            std::array::from_fn(|c| (0..n).map(|i| masks[c].row(i).iter().any(|&v| v > thr)).collect());
        let mut m_g = Tensor::zeros(vec![n, 3]);
        for (c, v) in valid.iter().enumerate() {
            for i in 0..n {
                if !v[i] {
                    m_g.data_mut()[i * 3 + c] = T::from_f64(NEG_INF);
                }
            }
        }
        DecouplingMasks {
            masks,
            valid,
            m_g,
            ablation,
        }
    }
}

fn channel_mask<T: Real>(utt: &[usize], pad: Option<&[bool]>, c: Channel) -> Tensor<T> {
    let n = utt.len();
    let neg = T::from_f64(NEG_INF);
    let is_pad = |k: usize| pad.is_some_and(|p| p[k]);
    let mut m = Tensor::full(vec![n, n], neg);
    let data = m.data_mut();
    for i in 0..n {
        if is_pad(i) {
            continue;
        }
        for j in 0..n {
            if !is_pad(j) && c.admits(utt[i], utt[j]) {
                data[i * n + j] = T::zero();
            }
        }
    }
    m
}

/// Masks for an unpadded context with token→utterance map `utt`.
pub fn build_decoupling_masks<T: Real>(utt: &[usize]) -> DecouplingMasks<T> {
    DecouplingMasks::from_masks(Channel::ALL.map(|c| channel_mask(utt, None, c)), false)
}

/// As [`build_decoupling_masks`], with `pad[j]` tokens removed as keys and
/// invalid in every channel.
pub fn build_padded_masks<T: Real>(utt: &[usize], pad: &[bool]) -> DecouplingMasks<T> {
    assert_eq!(utt.len(), pad.len(), "pad flags must cover every token");
    DecouplingMasks::from_masks(Channel::ALL.map(|c| channel_mask(utt, Some(pad), c)), false)
}

/// The fully connected ablation: every channel sees every token.
pub fn zero_masks<T: Real>(n: usize) -> DecouplingMasks<T> {
    let z = Tensor::zeros(vec![n, n]);
    DecouplingMasks::from_masks([z.clone(), z.clone(), z], true)
}

/// [`zero_masks`] with pad keys removed and pad rows invalid.
pub fn zero_masks_padded<T: Real>(pad: &[bool]) -> DecouplingMasks<T> {
    let m = key_padding_mask(pad);
    DecouplingMasks::from_masks([m.clone(), m.clone(), m], true)
}

/// `0` on and below the diagonal, [`NEG_INF`] above.
pub fn build_causal_mask<T: Real>(m: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(vec![m, m]);
    for r in 0..m {
        for c in r + 1..m {
            out.data_mut()[r * m + c] = T::from_f64(NEG_INF);
        }
    }
    out
}

/// Full attention except pad keys; pad rows are fully masked.
pub fn key_padding_mask<T: Real>(pad: &[bool]) -> Tensor<T> {
    let n = pad.len();
    let mut out = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        for j in 0..n {
            if pad[i] || pad[j] {
                out.data_mut()[i * n + j] = T::from_f64(NEG_INF);
            }
        }
    }
    out
}

type CacheKey = (Vec<usize>, Vec<bool>, bool);

/// Read-mostly cache of decoupling masks keyed by the utterance map and pad
/// flags. Concurrent lookups share a read lock; the first builder wins.
#[derive(Default)]
pub struct MaskCache<T: Real = f64> {
    map: RwLock<HashMap<CacheKey, Arc<DecouplingMasks<T>>>>,
}

impl<T: Real> MaskCache<T> {
    pub fn new() -> Self {
        MaskCache {
            map: RwLock::new(HashMap::new()),
        }
    }

    pub fn get(&self, utt: &[usize], pad: &[bool], ablate: bool) -> Arc<DecouplingMasks<T>> {
        let key = (utt.to_vec(), pad.to_vec(), ablate);
        if let Some(m) = self.map.read().expect("mask cache poisoned").get(&key) {
            return Arc::clone(m);
        }
        let built = Arc::new(match (ablate, pad.iter().any(|&p| p)) {
            (true, _) => zero_masks_padded(pad),
            (false, true) => build_padded_masks(utt, pad),
            (false, false) => build_decoupling_masks(utt),
        });
        let mut map = self.map.write().expect("mask cache poisoned");
        Arc::clone(map.entry(key).or_insert(built))
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("mask cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
