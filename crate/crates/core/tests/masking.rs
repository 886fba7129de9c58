//! Decoupling, fusion and causal masks against independent recomputation.

use biden::masking::{
    build_causal_mask, build_decoupling_masks, build_padded_masks, zero_masks, Channel, DecouplingMasks, MaskCache,
};
use biden::numkit::{Tensor, NEG_INF};
use proptest::prelude::*;

fn kept(t: &Tensor, i: usize, j: usize) -> bool {
    t.at(i, j) == 0.0
}

fn pattern(t: &Tensor) -> Vec<Vec<bool>> {
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| kept(t, i, j)).collect())
        .collect()
}

/// Every entry is exactly 0 or NEG_INF.
fn well_formed(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == NEG_INF)
}

#[test]
fn two_utterance_example() {
    let m: DecouplingMasks = build_decoupling_masks(&[0, 0, 1]);
    let f = false;
    let t = true;
    assert_eq!(
        pattern(m.mask(Channel::P2c)),
        vec![vec![f, f, f], vec![f, f, f], vec![t, t, f]]
    );
    assert_eq!(m.valid(Channel::P2c), &[f, f, t]);
    assert_eq!(
        pattern(m.mask(Channel::F2c)),
        vec![vec![f, f, t], vec![f, f, t], vec![f, f, f]]
    );
    assert_eq!(m.valid(Channel::F2c), &[t, t, f]);
}

#[test]
fn single_utterance_keeps_only_c2c() {
    let m: DecouplingMasks = build_decoupling_masks(&[0, 0]);
    assert!(m.mask(Channel::C2c).data().iter().all(|&v| v == 0.0));
    assert!(m.mask(Channel::F2c).data().iter().all(|&v| v == NEG_INF));
    assert!(m.mask(Channel::P2c).data().iter().all(|&v| v == NEG_INF));
    for i in 0..2 {
        assert_eq!(m.m_g.row(i), &[NEG_INF, 0.0, NEG_INF]);
    }
    assert!(!m.ablation);
}

#[test]
fn zero_masks_are_all_open_and_flagged() {
    let m: DecouplingMasks = zero_masks(2);
    for c in Channel::ALL {
        assert_eq!(m.mask(c), &Tensor::zeros(vec![2, 2]));
        assert_eq!(m.valid(c), &[true, true]);
    }
    assert_eq!(m.m_g, Tensor::zeros(vec![2, 3]));
    assert!(m.ablation);
}

#[test]
fn causal_mask_examples() {
    let one: Tensor = build_causal_mask(1);
    assert_eq!(one, Tensor::zeros(vec![1, 1]));
    let three: Tensor = build_causal_mask(3);
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(kept(&three, i, j), j <= i);
        }
    }
}

#[test]
fn causal_row_r_keeps_r_plus_one_entries() {
    for m in 1..=64 {
        let t: Tensor = build_causal_mask(m);
        assert!(well_formed(&t));
        for r in 0..m {
            assert_eq!((0..m).filter(|&j| kept(&t, r, j)).count(), r + 1);
        }
    }
}

fn utterance_map() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=20, 1..=12).prop_map(|lens| {
        lens.iter()
            .enumerate()
            .flat_map(|(u, &l)| std::iter::repeat_n(u, l))
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn channels_partition_all_pairs(utt in utterance_map()) {
        let m: DecouplingMasks = build_decoupling_masks(&utt);
        let n = utt.len();
        let last = *utt.last().unwrap();
        for c in Channel::ALL {
            prop_assert!(well_formed(m.mask(c)));
        }
        for i in 0..n {
            for j in 0..n {
                let open: Vec<Channel> = Channel::ALL.into_iter().filter(|&c| kept(m.mask(c), i, j)).collect();
                prop_assert_eq!(open.len(), 1);
                let want = match utt[i].cmp(&utt[j]) {
                    std::cmp::Ordering::Less => Channel::F2c,
                    std::cmp::Ordering::Equal => Channel::C2c,
                    std::cmp::Ordering::Greater => Channel::P2c,
                };
                prop_assert_eq!(open[0], want);
                // p2c is the transpose pattern of f2c.
                prop_assert_eq!(kept(m.mask(Channel::P2c), i, j), kept(m.mask(Channel::F2c), j, i));
            }
            prop_assert!(m.valid(Channel::C2c)[i]);
            prop_assert_eq!(m.valid(Channel::P2c)[i], utt[i] != 0);
            prop_assert_eq!(m.valid(Channel::F2c)[i], utt[i] != last);
            for c in Channel::ALL {
                let recomputed = (0..n).any(|j| kept(m.mask(c), i, j));
                prop_assert_eq!(m.valid(c)[i], recomputed);
                prop_assert_eq!(m.m_g.at(i, c.index()) == 0.0, recomputed);
            }
        }
    }

    #[test]
    fn padding_disables_pad_rows_and_columns(utt in utterance_map(), extra in 0usize..5) {
        let last = *utt.last().unwrap();
        let mut full = utt.clone();
        full.extend(std::iter::repeat_n(last, extra));
        let pad: Vec<bool> = (0..full.len()).map(|i| i >= utt.len()).collect();
        let padded: DecouplingMasks = build_padded_masks(&full, &pad);
        let plain: DecouplingMasks = build_decoupling_masks(&utt);
        let n = utt.len();
        for c in Channel::ALL {
            for i in 0..full.len() {
                for j in 0..full.len() {
                    let want = i < n && j < n && kept(plain.mask(c), i, j);
                    prop_assert_eq!(kept(padded.mask(c), i, j), want);
                }
                prop_assert_eq!(padded.valid(c)[i], i < n && plain.valid(c)[i]);
            }
        }
    }
}

#[test]
fn cache_returns_shared_masks() {
    let cache: MaskCache = MaskCache::new();
    let utt = [0, 0, 1, 2];
    let pad = [false; 4];
    let a = cache.get(&utt, &pad, false);
    let b = cache.get(&utt, &pad, false);
    assert!(std::sync::Arc::ptr_eq(&a, &b));
    assert_eq!(*a, build_decoupling_masks(&utt));
    let z = cache.get(&utt, &pad, true);
    assert!(z.ablation);
    assert_eq!(cache.len(), 2);
}
