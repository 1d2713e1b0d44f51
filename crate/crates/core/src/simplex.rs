//! Probability-simplex arithmetic in nats.
//!
//! Conventions:
//! - `0 · ln 0 = 0`.
//! - A support violation in KL (`p_i > 0`, `q_i = 0`) yields `f64::INFINITY`
//!   unless [`ZeroMode::Floor`] is requested.
//! - Sums over the vocabulary run in ascending index order. Sums over
//!   ensemble members are taken over the sorted terms, which makes every
//!   ensemble reduction exactly invariant to member order.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Absolute tolerance on `Σ p_i = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Default floor for [`ZeroMode::Floor`].
pub const DEFAULT_FLOOR: f64 = 1e-12;

/// A distribution over a finite vocabulary of size `V >= 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(invalid(format!("vocabulary size {} < 2", probs.len())));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(invalid(format!("probability {p} at index {i}")));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(format!("probabilities sum to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(invalid(format!("vocabulary size {size} < 2")));
        }
        Ok(Self { probs: vec![1.0 / size as f64; size] })
    }

    pub fn point_mass(size: usize, index: usize) -> Result<Self> {
        if index >= size {
            return Err(invalid(format!("index {index} out of range for size {size}")));
        }
        let mut probs = vec![0.0; size];
        probs[index] = 1.0;
        Self::new(probs)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// Lowest index among the maximal entries.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

impl TryFrom<Vec<f64>> for Categorical {
    type Error = crate::Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Categorical> for Vec<f64> {
    fn from(c: Categorical) -> Self {
        c.probs
    }
}

/// Unnormalized scores, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(invalid(format!("non-finite logit at index {i}")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// How KL treats `q_i = 0` where `p_i > 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ZeroMode {
    /// Return `f64::INFINITY`.
    #[default]
    Infinite,
    /// Replace `q_i` by `max(q_i, floor)`.
    Floor(f64),
}

/// Max-subtracted softmax over raw scores. Does not validate finiteness.
pub(crate) fn softmax_raw(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    out
}

pub fn softmax_normalize(logits: &Logits) -> Result<Categorical> {
    Categorical::new(softmax_raw(logits.as_slice()))
}

pub fn entropy(p: &Categorical) -> f64 {
    let mut h = 0.0;
    for &pi in p.probs() {
        if pi > 0.0 {
            h -= pi * pi.ln();
        }
    }
    h
}

pub fn kl(p: &Categorical, q: &Categorical) -> Result<f64> {
    kl_with(p, q, ZeroMode::Infinite)
}

pub fn kl_with(p: &Categorical, q: &Categorical, mode: ZeroMode) -> Result<f64> {
    check_same_len(p, q)?;
    Ok(kl_slices(p.probs(), q.probs(), mode))
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64], mode: ZeroMode) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= 0.0 {
            continue;
        }
        let qi = match mode {
            ZeroMode::Infinite => {
                if qi <= 0.0 {
                    return f64::INFINITY;
                }
                qi
            }
            ZeroMode::Floor(floor) => qi.max(floor),
        };
        acc += pi * (pi / qi).ln();
    }
    acc
}

/// `-Σ p_i ln q_i`.
pub fn cross_entropy(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_same_len(p, q)?;
    let mut acc = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Ok(f64::INFINITY);
            }
            acc -= pi * qi.ln();
        }
    }
    Ok(acc)
}

pub fn total_variation(p: &Categorical, q: &Categorical) -> Result<f64> {
    check_same_len(p, q)?;
    let s: f64 = p.probs().iter().zip(q.probs()).map(|(a, b)| (a - b).abs()).sum();
    Ok(0.5 * s)
}

/// Order-independent sum: sorts the terms before accumulating.
pub(crate) fn sorted_sum(terms: &mut [f64]) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Convex combination of `members`; uniform weights when `weights` is `None`.
pub fn mixture(members: &[Categorical], weights: Option<&[f64]>) -> Result<Categorical> {
    let first = members.first().ok_or_else(|| invalid("mixture of zero members"))?;
    let v = first.len();
    if let Some(m) = members.iter().find(|m| m.len() != v) {
        return Err(invalid(format!("vocabulary mismatch: {} vs {}", v, m.len())));
    }
    let w = resolve_weights(members.len(), weights)?;
    let mut terms = vec![0.0; members.len()];
    let mut probs = Vec::with_capacity(v);
    for i in 0..v {
        for (k, m) in members.iter().enumerate() {
            terms[k] = w[k] * m.probs()[i];
        }
        probs.push(sorted_sum(&mut terms));
    }
    Categorical::new(probs)
}

/// Generalized Jensen-Shannon divergence: `Σ_k w_k KL(q_k || Σ_j w_j q_j)`.
pub fn jsd(members: &[Categorical], weights: Option<&[f64]>) -> Result<f64> {
    if members.len() < 2 {
        return Err(invalid(format!("jsd needs at least 2 members, got {}", members.len())));
    }
    let mix = mixture(members, weights)?;
    let w = resolve_weights(members.len(), weights)?;
    let mut terms: Vec<f64> = members
        .iter()
        .zip(&w)
        .filter(|(_, &wk)| wk > 0.0)
        .map(|(m, &wk)| wk * kl_slices(m.probs(), mix.probs(), ZeroMode::Infinite))
        .collect();
    Ok(sorted_sum(&mut terms).max(0.0))
}

fn resolve_weights(k: usize, weights: Option<&[f64]>) -> Result<Vec<f64>> {
    match weights {
        None => Ok(vec![1.0 / k as f64; k]),
        Some(w) => {
            if w.len() != k {
                return Err(invalid(format!("{} weights for {} members", w.len(), k)));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(invalid("weights must be finite and nonnegative"));
            }
            let s: f64 = w.iter().sum();
            if (s - 1.0).abs() > SIMPLEX_TOL {
                return Err(invalid(format!("weights sum to {s}")));
            }
            Ok(w.to_vec())
        }
    }
}

fn check_same_len(p: &Categorical, q: &Categorical) -> Result<()> {
    if p.len() != q.len() {
        return Err(invalid(format!("dimension mismatch: {} vs {}", p.len(), q.len())));
    }
    Ok(())
}
