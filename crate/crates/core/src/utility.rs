//! Utility calculus for answers made of atomic claims.
//!
//! A true claim is worth `+1`, a false claim costs `lambda`. Choosing a target
//! accuracy `rho_star` fixes `lambda = rho_star / (1 - rho_star)`, the penalty at
//! which an answer with exactly that accuracy is worth nothing. Abstaining is
//! always worth exactly zero.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UtilityError {
    #[error("target accuracy must lie strictly inside (0, 1), got {0}")]
    TargetOutOfRange(f64),
    #[error("false-claim penalty must be finite and non-negative, got {0}")]
    InvalidPenalty(f64),
    #[error("claim probability must lie in [0, 1], got {0}")]
    ProbabilityOutOfRange(f64),
    #[error("candidate pool must contain exactly one abstention, found {0}")]
    AbstentionCount(usize),
}

/// Penalty per false claim that makes `rho_star` the break-even accuracy.
pub fn lambda_for_target(rho_star: f64) -> Result<f64, UtilityError> {
    if !(rho_star > 0.0 && rho_star < 1.0) {
        return Err(UtilityError::TargetOutOfRange(rho_star));
    }
    Ok(rho_star / (1.0 - rho_star))
}

/// Target accuracy and the false-claim penalty derived from it.
///
/// `lambda` is stored rather than recomputed so a penalty can also be
/// configured directly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityParams {
    rho_star: f64,
    lambda: f64,
}

impl UtilityParams {
    pub fn from_target(rho_star: f64) -> Result<Self, UtilityError> {
        let lambda = lambda_for_target(rho_star)?;
        Ok(Self { rho_star, lambda })
    }

    /// Configure the penalty directly; the implied target is `lambda / (1 + lambda)`.
    pub fn from_lambda(lambda: f64) -> Result<Self, UtilityError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(UtilityError::InvalidPenalty(lambda));
        }
        Ok(Self {
            rho_star: lambda / (1.0 + lambda),
            lambda,
        })
    }

    pub fn rho_star(&self) -> f64 {
        self.rho_star
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

/// Estimated probability that a claim is true, averaged over `sample_count`
/// verbalized assessments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimProbability {
    value: f64,
    sample_count: u32,
}

impl ClaimProbability {
    /// Sentinel for a claim that has not been assessed yet.
    pub const UNASSESSED: ClaimProbability = ClaimProbability {
        value: 0.0,
        sample_count: 0,
    };

    pub fn new(value: f64, sample_count: u32) -> Result<Self, UtilityError> {
        if !(0.0..=1.0).contains(&value) {
            return Err(UtilityError::ProbabilityOutOfRange(value));
        }
        if sample_count == 0 {
            return Ok(Self::UNASSESSED);
        }
        Ok(Self {
            value,
            sample_count,
        })
    }

    /// A probability backed by a single assessment.
    pub fn assessed(value: f64) -> Result<Self, UtilityError> {
        Self::new(value, 1)
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn sample_count(&self) -> u32 {
        self.sample_count
    }

    pub fn is_assessed(&self) -> bool {
        self.sample_count > 0
    }
}

/// Expected utility of one answer together with the sums it was built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpectedUtility {
    pub value: f64,
    pub expected_true: f64,
    pub expected_false: f64,
    pub claim_count: usize,
    pub lambda: f64,
}

impl ExpectedUtility {
    pub fn abstention(params: &UtilityParams) -> Self {
        Self {
            value: 0.0,
            expected_true: 0.0,
            expected_false: 0.0,
            claim_count: 0,
            lambda: params.lambda,
        }
    }

    /// Expected fraction of true claims; `None` for an empty answer.
    pub fn expected_accuracy(&self) -> Option<f64> {
        (self.claim_count > 0).then(|| self.expected_true / self.claim_count as f64)
    }

    /// Re-evaluate the same claim sums under another penalty.
    pub fn with_params(&self, params: &UtilityParams) -> Self {
        Self {
            value: self.expected_true - params.lambda * self.expected_false,
            lambda: params.lambda,
            ..*self
        }
    }
}

/// Utility of an answer whose claims have known truth labels.
pub fn realized_utility(truth_labels: &[bool], params: &UtilityParams) -> f64 {
    let true_count = truth_labels.iter().filter(|&&t| t).count() as f64;
    let false_count = truth_labels.len() as f64 - true_count;
    true_count - params.lambda * false_count
}

/// Expected utility when each claim is true independently with its estimated
/// probability. Linear in every probability.
pub fn expected_utility(probs: &[ClaimProbability], params: &UtilityParams) -> ExpectedUtility {
    let mut expected_true = 0.0;
    let mut expected_false = 0.0;
    for p in probs {
        expected_true += p.value;
        expected_false += 1.0 - p.value;
    }
    ExpectedUtility {
        value: expected_true - params.lambda * expected_false,
        expected_true,
        expected_false,
        claim_count: probs.len(),
        lambda: params.lambda,
    }
}

/// Anything that can sit in a candidate pool and be ranked.
pub trait Candidate {
    fn expected_value(&self) -> f64;
    fn claim_count(&self) -> usize;
    fn iteration(&self) -> u32;
    fn sample_index(&self) -> u32;
    fn is_abstention(&self) -> bool;
}

/// Ranking key rounded to 1e-12 so ties are decided identically everywhere.
fn rounded(value: f64) -> i64 {
    (value * 1e12).round() as i64
}

/// Total order used for ranking: higher value first, then fewer claims, earlier
/// iteration, lower sample index, and finally the abstention ahead of an empty
/// generation.
pub fn rank_order<C: Candidate + ?Sized>(a: &C, b: &C) -> Ordering {
    rounded(b.expected_value())
        .cmp(&rounded(a.expected_value()))
        .then(a.claim_count().cmp(&b.claim_count()))
        .then(a.iteration().cmp(&b.iteration()))
        .then(a.sample_index().cmp(&b.sample_index()))
        .then(b.is_abstention().cmp(&a.is_abstention()))
}

/// Order a pool by descending expected utility. The pool must hold exactly one
/// abstention.
pub fn rank_pool<C: Candidate>(pool: &[C]) -> Result<Vec<&C>, UtilityError> {
    let abstentions = pool.iter().filter(|c| c.is_abstention()).count();
    if abstentions != 1 {
        return Err(UtilityError::AbstentionCount(abstentions));
    }
    let mut ranked: Vec<&C> = pool.iter().collect();
    ranked.sort_by(|a, b| rank_order(*a, *b));
    Ok(ranked)
}
