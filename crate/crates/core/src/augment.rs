//! Stochastic modality shuffling.
//!
//! With probability `p_mix` a batch has its visual streams re-paired by one
//! uniformly drawn permutation, producing audio/visual pairs that no longer
//! belong together. Audio and captions never move, so each caption still
//! describes its audio.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijection on `0..len`, with its fixed-point count cached.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
    fixed_points: usize,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation { mapping: (0..n).collect(), fixed_points: n }
    }

    /// Validates that `mapping` is a bijection on `0..mapping.len()`.
    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid(format!("{mapping:?} is not a permutation")));
            }
        }
        let fixed_points = mapping.iter().enumerate().filter(|(i, &m)| *i == m).count();
        Ok(Permutation { mapping, fixed_points })
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn fixed_points(&self) -> usize {
        self.fixed_points
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    /// Position `i` of the result receives `items[mapping[i]]`.
    pub fn apply<T: Clone>(&self, items: &[T]) -> Vec<T> {
        self.mapping.iter().map(|&j| items[j].clone()).collect()
    }
}

/// Uniform permutation of `0..b` by Fisher–Yates.
pub fn sample_permutation<R: Rng + ?Sized>(b: usize, rng: &mut R) -> Result<Permutation> {
    if b == 0 {
        return Err(Error::invalid("cannot permute an empty batch"));
    }
    let mut mapping: Vec<usize> = (0..b).collect();
    for i in (1..b).rev() {
        let j = rng.gen_range(0..=i);
        mapping.swap(i, j);
    }
    Permutation::from_mapping(mapping)
}

/// Aligned audio/visual/caption triples plus pairing bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub audio: Vec<Tensor>,
    pub visual: Vec<Tensor>,
    pub captions: Vec<Vec<usize>>,
    /// `mismatch_flags[i]` is true iff `visual[i]` is not audio `i`'s own
    /// partner.
    pub mismatch_flags: Vec<bool>,
    /// Original batch position of each visual stream.
    pub visual_source: Vec<usize>,
}

impl Batch {
    pub fn new(audio: Vec<Tensor>, visual: Vec<Tensor>, captions: Vec<Vec<usize>>) -> Result<Self> {
        let b = audio.len();
        if visual.len() != b || captions.len() != b {
            return Err(Error::invalid(format!(
                "batch lists differ in length: {b} audio, {} visual, {} captions",
                visual.len(),
                captions.len()
            )));
        }
        Ok(Batch { audio, visual, captions, mismatch_flags: vec![false; b], visual_source: (0..b).collect() })
    }

    pub fn len(&self) -> usize {
        self.audio.len()
    }

    pub fn is_empty(&self) -> bool {
        self.audio.is_empty()
    }

    pub fn mismatched(&self) -> usize {
        self.mismatch_flags.iter().filter(|&&f| f).count()
    }

    /// Re-pairs visual streams by `perm`; flags are recomputed from the
    /// original pairing, so repeated shuffles compose.
    pub fn repair(&self, perm: &Permutation) -> Result<Batch> {
        if perm.len() != self.len() {
            return Err(Error::invalid(format!("permutation of {} for batch of {}", perm.len(), self.len())));
        }
        let visual = perm.apply(&self.visual);
        let visual_source = perm.apply(&self.visual_source);
        let mismatch_flags = visual_source.iter().enumerate().map(|(i, &s)| s != i).collect();
        Ok(Batch { audio: self.audio.clone(), visual, captions: self.captions.clone(), mismatch_flags, visual_source })
    }
}

/// One draw of stochastic modality shuffling: a Bernoulli(`p_mix`) coin
/// decides whether the whole batch is re-paired by a fresh uniform
/// permutation. The identity permutation may be drawn, so a shuffled
/// batch can still be fully matched.
pub fn sms_apply<R: Rng + ?Sized>(batch: &Batch, p_mix: f64, rng: &mut R) -> Result<Batch> {
    if !(0.0..=1.0).contains(&p_mix) {
        return Err(Error::invalid(format!("shuffle probability {p_mix} outside [0, 1]")));
    }
    if batch.is_empty() {
        return Ok(batch.clone());
    }
    let shuffle = rng.gen::<f64>() < p_mix;
    if !shuffle {
        return Ok(batch.clone());
    }
    let perm = sample_permutation(batch.len(), rng)?;
    batch.repair(&perm)
}

/// Expected fraction of mismatched samples per batch, `p·(1 − 1/B)`.
pub fn expected_mismatch_rate(p_mix: f64, b: usize) -> f64 {
    p_mix * (1.0 - 1.0 / b as f64)
}

/// Standard deviation of the per-batch mismatched fraction. The displaced
/// count `D = B − fixed points` of a uniform permutation has mean `B − 1`
/// and variance 1, and the batch-level coin makes the fraction
/// `X = C·D/B` with `C ~ Bernoulli(p)`.
pub fn mismatch_rate_std(p_mix: f64, b: usize) -> f64 {
    let bf = b as f64;
    if b < 2 {
        return 0.0;
    }
    let mean_d = bf - 1.0;
    let second = p_mix * (1.0 + mean_d * mean_d) / (bf * bf);
    let mean = p_mix * mean_d / bf;
    (second - mean * mean).max(0.0).sqrt()
}
