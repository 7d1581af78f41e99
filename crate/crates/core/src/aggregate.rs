//! Bag-level fusion rules.
//!
//! Instance probabilities are stored as logits so the sharp rule, which is a
//! weighted logit sum, never loses precision near 0 or 1. Every reduction sums
//! its terms in a canonical (sorted) order, which makes all rules exactly
//! invariant to permuting the instances.

use std::cmp::Ordering;

use crate::diffcore::{log_sigmoid, sigmoid, Tensor};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking a logit.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregateError {
    #[error("a bag needs at least one instance")]
    Empty,
    #[error("probability {value} at index {index} is outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("weight at index {index} is negative")]
    NegativeWeight { index: usize },
}

/// Clamped logit `ln(p / (1 - p))`.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    p.ln() - (-p).ln_1p()
}

/// Per-instance fake probabilities of one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceProbs {
    logits: Vec<f64>,
}

impl InstanceProbs {
    pub fn from_probs(probs: &[f64]) -> Result<Self, AggregateError> {
        if probs.is_empty() {
            return Err(AggregateError::Empty);
        }
        let mut logits = Vec::with_capacity(probs.len());
        for (index, &value) in probs.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) {
                return Err(AggregateError::OutOfRange { index, value });
            }
            logits.push(logit(value));
        }
        Ok(Self { logits })
    }

    pub fn from_logits(logits: &[f64]) -> Result<Self, AggregateError> {
        if logits.is_empty() {
            return Err(AggregateError::Empty);
        }
        if let Some(index) = logits.iter().position(|z| !z.is_finite()) {
            return Err(AggregateError::NonFinite { index });
        }
        Ok(Self {
            logits: logits.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn prob(&self, j: usize) -> f64 {
        sigmoid(self.logits[j])
    }

    /// `1 - p^j`, computed without cancellation.
    pub fn complement(&self, j: usize) -> f64 {
        sigmoid(-self.logits[j])
    }

    pub fn probs(&self) -> Vec<f64> {
        self.logits.iter().map(|&z| sigmoid(z)).collect()
    }

    /// Same bag with instances reordered: `out[i] = self[order[i]]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            logits: order.iter().map(|&i| self.logits[i]).collect(),
        }
    }
}

/// Nonnegative per-instance exponents.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Vec<f64>);

impl Weights {
    pub fn new(alpha: Vec<f64>) -> Result<Self, AggregateError> {
        for (index, &a) in alpha.iter().enumerate() {
            if !a.is_finite() {
                return Err(AggregateError::NonFinite { index });
            }
            if a < 0.0 {
                return Err(AggregateError::NegativeWeight { index });
            }
        }
        Ok(Self(alpha))
    }

    /// All exponents equal to one: the unweighted sharp rule.
    pub fn unit(m: usize) -> Self {
        Self(vec![1.0; m])
    }

    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self(order.iter().map(|&i| self.0[i]).collect())
    }
}

/// `M x d` instance embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BagEmbeddings {
    h: Tensor,
}

impl BagEmbeddings {
    pub fn new(h: Tensor) -> Result<Self, AggregateError> {
        if h.rank() != 2 || h.rows() == 0 || h.cols() == 0 {
            return Err(AggregateError::Empty);
        }
        if let Some(index) = h.data().iter().position(|x| !x.is_finite()) {
            return Err(AggregateError::NonFinite { index });
        }
        Ok(Self { h })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AggregateError> {
        let d = rows.first().map(Vec::len).ok_or(AggregateError::Empty)?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(AggregateError::Length {
                    what: "embedding row",
                    expected: d,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(Tensor::matrix(rows.len(), d, data).map_err(|_| AggregateError::Empty)?)
    }

    pub fn m(&self) -> usize {
        self.h.rows()
    }

    pub fn d(&self) -> usize {
        self.h.cols()
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.h.row(j)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.h
    }
}

/// Attention vector `w` and classifier row `W` with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub attention: Vec<f64>,
    pub classifier: Vec<f64>,
    pub bias: f64,
}

impl AttentionParams {
    pub fn new(
        attention: Vec<f64>,
        classifier: Vec<f64>,
        bias: f64,
    ) -> Result<Self, AggregateError> {
        if attention.len() != classifier.len() {
            return Err(AggregateError::Length {
                what: "attention vector",
                expected: classifier.len(),
                got: attention.len(),
            });
        }
        let all = attention
            .iter()
            .chain(&classifier)
            .chain(std::iter::once(&bias));
        if let Some(index) = all.into_iter().position(|x| !x.is_finite()) {
            return Err(AggregateError::NonFinite { index });
        }
        Ok(Self {
            attention,
            classifier,
            bias,
        })
    }

    pub fn d(&self) -> usize {
        self.classifier.len()
    }

    fn check(&self, h: &BagEmbeddings) -> Result<(), AggregateError> {
        if h.d() != self.d() {
            return Err(AggregateError::Length {
                what: "embedding width",
                expected: self.d(),
                got: h.d(),
            });
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sorted(mut xs: Vec<f64>) -> Vec<f64> {
    xs.sort_by(f64::total_cmp);
    xs
}

/// Average frame fusion.
pub fn mean_pool(p: &InstanceProbs) -> f64 {
    sorted(p.probs()).iter().sum::<f64>() / p.len() as f64
}

/// Maximum frame fusion.
pub fn max_pool(p: &InstanceProbs) -> f64 {
    p.probs().into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// `prod_j (1 - p^j)`, the probability that a noisy-OR bag is negative.
pub fn noisy_or_complement(p: &InstanceProbs) -> f64 {
    let logs = sorted((0..p.len()).map(|j| log_sigmoid(-p.logits()[j])).collect());
    logs.iter().sum::<f64>().exp()
}

/// Traditional MIL bag probability `1 - prod_j (1 - p^j)`.
pub fn noisy_or(p: &InstanceProbs) -> f64 {
    1.0 - noisy_or_complement(p)
}

/// Bag logit of the sharp rule: `sum_j alpha_j * logit(p^j)`.
///
/// Equal to `logit(1 / (1 + prod_j (1/p^j - 1)^alpha_j))`; the product form is
/// never materialised.
pub fn smil_logit(p: &InstanceProbs, alpha: &Weights) -> Result<f64, AggregateError> {
    if alpha.len() != p.len() {
        return Err(AggregateError::Length {
            what: "weights",
            expected: p.len(),
            got: alpha.len(),
        });
    }
    let mut terms: Vec<(f64, f64)> = p
        .logits()
        .iter()
        .copied()
        .zip(alpha.as_slice().iter().copied())
        .collect();
    terms.sort_by(|a, b| match a.0.total_cmp(&b.0) {
        Ordering::Equal => a.1.total_cmp(&b.1),
        o => o,
    });
    Ok(terms.iter().map(|(z, a)| a * z).sum())
}

pub fn smil(p: &InstanceProbs, alpha: &Weights) -> Result<f64, AggregateError> {
    smil_logit(p, alpha).map(sigmoid)
}

/// Unweighted sharp rule `1 / (1 + prod_j (1/p^j - 1))`.
pub fn smil_unit(p: &InstanceProbs) -> f64 {
    sigmoid(smil_logit(p, &Weights::unit(p.len())).expect("lengths match"))
}

/// Raw attention scores `w . h^j`.
pub fn attention_scores(
    h: &BagEmbeddings,
    params: &AttentionParams,
) -> Result<Vec<f64>, AggregateError> {
    params.check(h)?;
    Ok((0..h.m())
        .map(|j| dot(&params.attention, h.row(j)))
        .collect())
}

/// Softmax over attention scores, computed with max subtraction.
pub fn attention_weights(
    h: &BagEmbeddings,
    params: &AttentionParams,
) -> Result<Weights, AggregateError> {
    Ok(Weights(softmax(&attention_scores(h, params)?)))
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|x| x / total).collect()
}

/// Per-instance logits `W . h^j + b`.
pub fn instance_logits(
    h: &BagEmbeddings,
    params: &AttentionParams,
) -> Result<Vec<f64>, AggregateError> {
    params.check(h)?;
    Ok((0..h.m())
        .map(|j| dot(&params.classifier, h.row(j)) + params.bias)
        .collect())
}

pub fn instance_probs(
    h: &BagEmbeddings,
    params: &AttentionParams,
) -> Result<InstanceProbs, AggregateError> {
    InstanceProbs::from_logits(&instance_logits(h, params)?)
}

/// Embedded-space bag logit `W . (sum_j alpha_j h^j) + b`.
///
/// Matches [`smil_logit`] on `instance_probs(h, params)` whenever the weights
/// sum to one or the bias is zero.
pub fn bag_logit_embedded(
    h: &BagEmbeddings,
    params: &AttentionParams,
    alpha: &Weights,
) -> Result<f64, AggregateError> {
    params.check(h)?;
    if alpha.len() != h.m() {
        return Err(AggregateError::Length {
            what: "weights",
            expected: h.m(),
            got: alpha.len(),
        });
    }
    let mut pooled = vec![0.0; h.d()];
    for (j, &a) in alpha.as_slice().iter().enumerate() {
        for (acc, x) in pooled.iter_mut().zip(h.row(j)) {
            *acc += a * x;
        }
    }
    Ok(dot(&params.classifier, &pooled) + params.bias)
}

pub fn bag_prob_embedded(
    h: &BagEmbeddings,
    params: &AttentionParams,
    alpha: &Weights,
) -> Result<f64, AggregateError> {
    bag_logit_embedded(h, params, alpha).map(sigmoid)
}
