//! Brute-force oracles shared by the integration targets.

#![allow(dead_code)]

use std::cmp::Ordering;

/// Rank of `gold` after a stable sort by descending score.
pub fn rank(scores: &[f64], gold: usize) -> usize {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.iter().position(|&i| i == gold).unwrap() + 1
}

/// Multiset intersection size, by repeated removal.
pub fn overlap<T: PartialEq + Clone>(a: &[T], b: &[T]) -> usize {
    let mut pool = b.to_vec();
    let mut hits = 0;
    for x in a {
        if let Some(k) = pool.iter().position(|y| y == x) {
            pool.swap_remove(k);
            hits += 1;
        }
    }
    hits
}

pub fn harmonic(hits: usize, a: usize, b: usize) -> f64 {
    if hits == 0 {
        return 0.0;
    }
    let (p, r) = (hits as f64 / a as f64, hits as f64 / b as f64);
    2.0 * p * r / (p + r)
}

pub fn token_f1(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    harmonic(overlap(pred, gold), pred.len(), gold.len())
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

pub fn rouge_n(cand: &[String], refs: &[Vec<String>], n: usize) -> f64 {
    refs.iter()
        .map(|r| {
            let (c, g) = (grams(cand, n), grams(r, n));
            if c.is_empty() || g.is_empty() {
                0.0
            } else {
                harmonic(overlap(&c, &g), c.len(), g.len())
            }
        })
        .fold(0.0, f64::max)
}

fn is_subsequence(sub: &[&String], seq: &[String]) -> bool {
    let mut it = seq.iter();
    sub.iter().all(|x| it.any(|y| y == *x))
}

/// Longest common subsequence by enumerating every subset of `a`.
pub fn lcs(a: &[String], b: &[String]) -> usize {
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let sub: Vec<&String> = (0..a.len()).filter(|&i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
            is_subsequence(&sub, b).then_some(sub.len())
        })
        .max()
        .unwrap_or(0)
}

pub fn rouge_l(cand: &[String], refs: &[Vec<String>]) -> f64 {
    refs.iter()
        .map(|r| {
            if cand.is_empty() || r.is_empty() {
                0.0
            } else {
                harmonic(lcs(cand, r), cand.len(), r.len())
            }
        })
        .fold(0.0, f64::max)
}

/// Random words over a four-letter alphabet, so overlaps are common.
pub fn words<R: rand::Rng>(r: &mut R, max_len: usize) -> Vec<String> {
    use rand::RngExt;
    let len = r.random_range(0..=max_len);
    (0..len)
        .map(|_| ["a", "b", "c", "d"][r.random_range(0..4)].to_string())
        .collect()
}
