//! Caption metrics over token sequences.
//!
//! BLEU uses clipped n-gram precision, a geometric mean over orders and a
//! brevity penalty from the closest reference length (shorter wins ties).
//! Orders longer than the hypothesis are left out of the mean instead of
//! zeroing it, so a two-token exact match scores 1 at every order.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::model::{BOS, EOS, PAD};

pub const ROUGE_BETA: f64 = 1.2;

/// Word tokens of a decoder output: stops at [`EOS`], drops [`PAD`] and
/// [`BOS`].
pub fn words(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().take_while(|&t| t != EOS).filter(|&t| t != PAD && t != BOS).collect()
}

fn ngrams<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and hypothesis n-gram count for one order.
fn clipped<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> (usize, usize) {
    let counts = ngrams(hyp, n);
    let mut max_ref: HashMap<&[T], usize> = HashMap::new();
    for r in refs {
        for (g, c) in ngrams(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = counts.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1))
}

fn closest_ref_len<T>(hyp_len: usize, refs: &[&[T]]) -> usize {
    refs.iter().map(|r| r.len()).min_by_key(|&l| (l.abs_diff(hyp_len), l)).unwrap_or(0)
}

fn combine(matched: &[usize], total: &[usize], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(matched.len());
    for (&m, &t) in matched.iter().zip(total) {
        if t == 0 {
            continue;
        }
        if m == 0 {
            return 0.0;
        }
        precisions.push(m as f64 / t as f64);
    }
    let p = match precisions.as_slice() {
        [] => return 0.0,
        [only] => *only,
        _ if precisions.iter().all(|&p| p == 1.0) => 1.0,
        _ => (precisions.iter().map(|p| p.ln()).sum::<f64>() / precisions.len() as f64).exp(),
    };
    let bp = if hyp_len >= ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    bp * p
}

/// Sentence-level BLEU of order `n` (at least 1).
pub fn bleu_n<T: Eq + Hash>(hyp: &[T], refs: &[&[T]], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    if hyp.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let (matched, total): (Vec<_>, Vec<_>) = (1..=n).map(|k| clipped(hyp, refs, k)).unzip();
    combine(&matched, &total, hyp.len(), closest_ref_len(hyp.len(), refs))
}

/// Corpus-level BLEU: counts and lengths are summed over the corpus before
/// the precisions and brevity penalty are formed.
pub fn corpus_bleu<T: Eq + Hash>(hyps: &[Vec<T>], refs: &[Vec<Vec<T>>], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    assert_eq!(hyps.len(), refs.len(), "one reference set per hypothesis");
    let mut matched = vec![0; n];
    let mut total = vec![0; n];
    let (mut c, mut r) = (0, 0);
    for (h, rs) in hyps.iter().zip(refs) {
        let rs: Vec<&[T]> = rs.iter().map(Vec::as_slice).collect();
        for k in 1..=n {
            let (m, t) = clipped(h, &rs, k);
            matched[k - 1] += m;
            total[k - 1] += t;
        }
        c += h.len();
        r += closest_ref_len(h.len(), &rs);
    }
    combine(&matched, &total, c, r)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by `β = 1.2`, best over references.
pub fn rouge_l<T: Eq>(hyp: &[T], refs: &[&[T]]) -> f64 {
    if hyp.is_empty() {
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let l = lcs_len(hyp, r);
            if l == 0 {
                return 0.0;
            }
            if l == hyp.len() && l == r.len() {
                return 1.0;
            }
            let p = l as f64 / hyp.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Matching positions over reference length.
pub fn token_matches<T: Eq>(hyp: &[T], reference: &[T]) -> usize {
    hyp.iter().zip(reference).filter(|(a, b)| a == b).count()
}

/// Corpus scores for one evaluation pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge_l: f64,
    pub token_accuracy: f64,
}

impl Scores {
    pub const NAMES: [&'static str; 6] = ["bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "token_accuracy"];

    pub fn values(&self) -> [f64; 6] {
        [self.bleu_1, self.bleu_2, self.bleu_3, self.bleu_4, self.rouge_l, self.token_accuracy]
    }

    /// Corpus BLEU, mean sentence ROUGE-L and pooled token accuracy.
    pub fn compute(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Scores {
        assert_eq!(hyps.len(), refs.len());
        if hyps.is_empty() {
            return Scores::default();
        }
        let ref_sets: Vec<Vec<Vec<usize>>> = refs.iter().map(|r| vec![r.clone()]).collect();
        let rouge = hyps.iter().zip(refs).map(|(h, r)| rouge_l(h, &[r.as_slice()])).sum::<f64>() / hyps.len() as f64;
        let matched: usize = hyps.iter().zip(refs).map(|(h, r)| token_matches(h, r)).sum();
        let total: usize = refs.iter().map(Vec::len).sum();
        Scores {
            bleu_1: corpus_bleu(hyps, &ref_sets, 1),
            bleu_2: corpus_bleu(hyps, &ref_sets, 2),
            bleu_3: corpus_bleu(hyps, &ref_sets, 3),
            bleu_4: corpus_bleu(hyps, &ref_sets, 4),
            rouge_l: rouge,
            token_accuracy: if total == 0 { 0.0 } else { matched as f64 / total as f64 },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn identity_scores_one_at_every_order() {
        for s in ["a", "a b", "a b c d e f", "x x x"] {
            let h = toks(s);
            for n in 1..=4 {
                assert_eq!(bleu_n(&h, &[&h], n), 1.0, "{s} n={n}");
            }
            assert_eq!(rouge_l(&h, &[&h]), 1.0);
        }
    }

    #[test]
    fn disjoint_scores_zero() {
        let (h, r) = (toks("a b c"), toks("d e f g"));
        for n in 1..=4 {
            assert_eq!(bleu_n(&h, &[&r], n), 0.0);
        }
        assert_eq!(rouge_l(&h, &[&r]), 0.0);
    }

    #[test]
    fn unigram_overlap_three_of_four() {
        let (h, r) = (toks("a b c d"), toks("a b x d"));
        assert_eq!(bleu_n(&h, &[&r], 1), 0.75);
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let r = toks("a b");
        let e: Vec<&str> = vec![];
        assert_eq!(bleu_n(&e, &[&r], 1), 0.0);
        assert_eq!(rouge_l(&e, &[&r]), 0.0);
    }

    #[test]
    fn clipping_and_brevity_hand_counts() {
        // "the the the" vs "the cat": clipped unigram 1/3, c = 3 > r = 2
        let (h, r) = (toks("the the the"), toks("the cat"));
        assert_eq!(bleu_n(&h, &[&r], 1), 1.0 / 3.0);
        // "a b" vs "a b c d": precision 1, BP = exp(1 − 4/2)
        let (h, r) = (toks("a b"), toks("a b c d"));
        assert!((bleu_n(&h, &[&r], 2) - (-1.0f64).exp()).abs() < 1e-15);
        // bigram precision 1/3, unigram 3/4: sqrt(0.75 / 3)
        let (h, r) = (toks("a b x d"), toks("a b c d"));
        assert!((bleu_n(&h, &[&r], 2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn closest_reference_length_prefers_shorter_on_ties() {
        let h = toks("a b c");
        let (r2, r4) = (toks("a b"), toks("a b c d"));
        // r = 2 so no penalty
        assert_eq!(bleu_n(&h, &[&r4, &r2], 1), 1.0);
    }

    #[test]
    fn corpus_bleu_pools_counts() {
        let hyps = vec![toks("a b c d"), toks("e f")];
        let refs = vec![vec![toks("a b x d")], vec![toks("e f")]];
        assert_eq!(corpus_bleu(&hyps, &refs, 1), 5.0 / 6.0);
    }

    #[test]
    fn rouge_beta_formula() {
        let (h, r) = (toks("a c e"), toks("a b c d e"));
        assert_eq!(lcs_len(&h, &r), 3);
        let (p, rec, b2) = (1.0, 0.6, 1.44);
        let want = (1.0 + b2) * p * rec / (rec + b2 * p);
        assert!((rouge_l(&h, &[&r]) - want).abs() < 1e-15);
        assert!((want - 0.717_647_058_823_529_4).abs() < 1e-12);
    }

    #[test]
    fn lcs_matches_brute_force() {
        // all subsequences of the shorter side
        fn brute(a: &[u8], b: &[u8]) -> usize {
            let mut best = 0;
            for mask in 0u32..(1 << a.len()) {
                let sub: Vec<u8> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
                let mut it = b.iter();
                if sub.iter().all(|x| it.any(|y| y == x)) {
                    best = best.max(sub.len());
                }
            }
            best
        }
        let cases: [(&[u8], &[u8]); 4] = [(b"abcde", b"ace"), (b"abab", b"baba"), (b"xyz", b"abc"), (b"aaaa", b"aa")];
        for (a, b) in cases {
            assert_eq!(lcs_len(a, b), brute(a, b));
        }
    }

    #[test]
    fn words_strip_specials() {
        assert_eq!(words(&[BOS, 5, 6, EOS, 7]), vec![5, 6]);
        assert_eq!(words(&[PAD, 4]), vec![4]);
    }

    #[test]
    fn scores_on_perfect_and_empty_output() {
        let refs = vec![vec![3, 4, 5], vec![6, 7, 8]];
        let s = Scores::compute(&refs, &refs);
        assert!(s.values().iter().all(|&v| v == 1.0));
        let empty = vec![vec![], vec![]];
        assert!(Scores::compute(&empty, &refs).values().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn bleu_is_invariant_to_relabeling(
            h in prop::collection::vec(0usize..6, 1..10),
            r in prop::collection::vec(0usize..6, 1..10),
            shift in 1usize..100,
            n in 1usize..5,
        ) {
            let relabel = |s: &[usize]| s.iter().map(|t| (t * 7 + shift) % 1000).collect::<Vec<_>>();
            let (h2, r2) = (relabel(&h), relabel(&r));
            prop_assert_eq!(bleu_n(&h, &[&r], n), bleu_n(&h2, &[&r2], n));
            prop_assert_eq!(rouge_l(&h, &[&r]), rouge_l(&h2, &[&r2]));
        }

        #[test]
        fn scores_stay_in_unit_interval(
            h in prop::collection::vec(0usize..5, 0..8),
            r in prop::collection::vec(0usize..5, 1..8),
        ) {
            for n in 1..=4 {
                let b = bleu_n(&h, &[&r], n);
                prop_assert!((0.0..=1.0).contains(&b));
            }
            let l = rouge_l(&h, &[&r]);
            prop_assert!((0.0..=1.0).contains(&l));
        }
    }
}
