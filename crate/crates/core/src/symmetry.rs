//! Approximate symmetry between strategies.
//!
//! Each step of a strategy becomes its KC embedding plus a sinusoidal
//! positional encoding. Two strategies are aligned with Smith-Waterman under
//! cosine similarity and a zero gap penalty; the symmetry score is the aligned
//! cosine mass over the longer length. Cluster coherence averages pairwise
//! symmetry inside every global cluster.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use thiserror::Error;

use crate::rng;

pub const DEFAULT_PAIR_CAP: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymmetryError {
    #[error("cannot align an empty strategy")]
    EmptyStrategy,
    #[error("step {step} has a zero-norm vector; cosine similarity is undefined")]
    ZeroNorm { step: usize },
    #[error("step vectors have dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
}

/// Frequency of dimension `k` out of `d`: `1 / 10000^(2k/d)`.
pub fn frequency(k: usize, d: usize) -> f64 {
    1.0 / libm::pow(10000.0, 2.0 * k as f64 / d as f64)
}

/// Positional encoding of 0-based position `t` in `d` dimensions: even
/// dimensions carry `sin(ω_k t)`, odd ones `cos(ω_k t)`.
pub fn positional_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let x = frequency(k, d) * t as f64;
            if k % 2 == 0 {
                libm::sin(x)
            } else {
                libm::cos(x)
            }
        })
        .collect()
}

/// Cached positional encodings for positions `0..max_len`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    dim: usize,
    table: Vec<Vec<f64>>,
}

impl PositionalEncoding {
    pub fn new(dim: usize, max_len: usize) -> Self {
        PositionalEncoding { dim, table: (0..max_len).map(|t| positional_encoding(t, dim)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cached row when available, direct evaluation otherwise.
    pub fn at(&self, t: usize) -> Vec<f64> {
        match self.table.get(t) {
            Some(row) => row.clone(),
            None => positional_encoding(t, self.dim),
        }
    }

    pub fn cached(&self, t: usize) -> Option<&[f64]> {
        self.table.get(t).map(Vec::as_slice)
    }
}

/// Step vectors `K_e + K_p` of one strategy.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalStrategy {
    steps: Vec<Vec<f64>>,
}

impl PositionalStrategy {
    /// Adds the positional encoding of each step to its KC embedding.
    pub fn new(kc_vectors: &[&[f64]], pe: &PositionalEncoding) -> Result<Self, SymmetryError> {
        let mut steps = Vec::with_capacity(kc_vectors.len());
        for (t, v) in kc_vectors.iter().enumerate() {
            if v.len() != pe.dim() {
                return Err(SymmetryError::Dimension { expected: pe.dim(), found: v.len() });
            }
            let p = pe.at(t);
            steps.push(v.iter().zip(&p).map(|(a, b)| a + b).collect());
        }
        Ok(PositionalStrategy { steps })
    }

    /// Uses the given vectors as-is.
    pub fn from_vectors(steps: Vec<Vec<f64>>) -> Self {
        PositionalStrategy { steps }
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    /// Aligned step pairs, strictly increasing in both coordinates.
    pub pairs: Vec<(usize, usize)>,
    pub score: f64,
}

fn norms(s: &PositionalStrategy) -> Result<Vec<f64>, SymmetryError> {
    if s.is_empty() {
        return Err(SymmetryError::EmptyStrategy);
    }
    s.steps
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let n = libm::sqrt(v.iter().map(|x| x * x).sum());
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(SymmetryError::ZeroNorm { step: i })
            }
        })
        .collect()
}

/// Cosine similarity matrix between the steps of `a` and `b`, clamped to
/// `[-1, 1]`.
pub fn similarity_matrix(a: &PositionalStrategy, b: &PositionalStrategy) -> Result<Vec<Vec<f64>>, SymmetryError> {
    let (na, nb) = (norms(a)?, norms(b)?);
    let d = a.steps[0].len();
    if let Some(v) = a.steps.iter().chain(&b.steps).find(|v| v.len() != d) {
        return Err(SymmetryError::Dimension { expected: d, found: v.len() });
    }
    Ok(a.steps
        .iter()
        .zip(&na)
        .map(|(x, nx)| {
            b.steps
                .iter()
                .zip(&nb)
                .map(|(y, ny)| {
                    let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                    (dot / (nx * ny)).clamp(-1.0, 1.0)
                })
                .collect()
        })
        .collect())
}

/// Smith-Waterman local alignment with cosine similarity and zero gap
/// penalty. Traceback starts at the first global maximum and prefers the
/// diagonal, then up, then left; a diagonal move is only taken for a strictly
/// positive similarity.
pub fn sw_align(a: &PositionalStrategy, b: &PositionalStrategy) -> Result<Alignment, SymmetryError> {
    let sim = similarity_matrix(a, b)?;
    Ok(align_scores(&sim))
}

pub(crate) fn align_scores(sim: &[Vec<f64>]) -> Alignment {
    let n = sim.len();
    let m = sim.first().map_or(0, Vec::len);
    let mut h = vec![vec![0.0f64; m + 1]; n + 1];
    let (mut best, mut bi, mut bj) = (0.0, 0, 0);
    for i in 1..=n {
        for j in 1..=m {
            let diag = h[i - 1][j - 1] + sim[i - 1][j - 1];
            let v = diag.max(h[i - 1][j]).max(h[i][j - 1]).max(0.0);
            h[i][j] = v;
            if v > best {
                best = v;
                bi = i;
                bj = j;
            }
        }
    }
    let mut pairs = Vec::new();
    let (mut i, mut j) = (bi, bj);
    while i > 0 && j > 0 && h[i][j] > 0.0 {
        let s = sim[i - 1][j - 1];
        if s > 0.0 && h[i][j] == h[i - 1][j - 1] + s {
            pairs.push((i - 1, j - 1));
            i -= 1;
            j -= 1;
        } else if h[i][j] == h[i - 1][j] {
            i -= 1;
        } else {
            j -= 1;
        }
    }
    pairs.reverse();
    Alignment { pairs, score: best }
}

/// Symmetry score: aligned cosine mass divided by the longer length.
pub fn symmetry_score(a: &PositionalStrategy, b: &PositionalStrategy) -> Result<f64, SymmetryError> {
    let al = sw_align(a, b)?;
    Ok(al.score / a.len().max(b.len()) as f64)
}

/// Mean over clusters of the mean pairwise symmetry score. Clusters with
/// fewer than two strategies score 1. Clusters with more than `pair_cap`
/// pairs are scored on `pair_cap` distinct pairs drawn uniformly under
/// `seed`.
pub fn cluster_coherence(
    clusters: &[Vec<usize>],
    strategies: &[PositionalStrategy],
    pair_cap: usize,
    seed: u64,
) -> Result<f64, SymmetryError> {
    if clusters.is_empty() {
        return Ok(1.0);
    }
    let mut total = 0.0;
    for (p, members) in clusters.iter().enumerate() {
        total += cluster_mean_symmetry(members, strategies, pair_cap, rng::mix64(seed ^ p as u64))?;
    }
    Ok(total / clusters.len() as f64)
}

fn cluster_mean_symmetry(
    members: &[usize],
    strategies: &[PositionalStrategy],
    pair_cap: usize,
    seed: u64,
) -> Result<f64, SymmetryError> {
    let n = members.len();
    if n < 2 {
        return Ok(1.0);
    }
    let n_pairs = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if n_pairs <= pair_cap.max(1) {
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect()
    } else {
        let mut rng = rng::stream(seed, "coherence-pairs");
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(pair_cap);
        while out.len() < pair_cap {
            let i = rng.gen_range(0..n);
            let j = rng.gen_range(0..n);
            if i == j {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                out.push(key);
            }
        }
        out
    };
    let mut sum = 0.0;
    for &(i, j) in &pairs {
        sum += symmetry_score(&strategies[members[i]], &strategies[members[j]])?;
    }
    Ok(sum / pairs.len() as f64)
}
