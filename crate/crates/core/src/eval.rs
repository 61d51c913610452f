//! Self-consistency evaluation of claims.
//!
//! A claim's probability of being true is the mean verbalized agreement score
//! (0-100) between the claim and several random subsets of previously
//! generated sentences, divided by 100.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, LanguageModel, RenderError, SamplingParams, TemplateSet};
use crate::claims::{SampleRef, Sentence};
use crate::derive_seed;
use crate::record::round_sig12;
use crate::seed::rng_from;
use crate::utility::ClaimProbability;

/// Score recorded for a sample whose reply had no usable number.
pub const NEUTRAL_SCORE: u8 = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Number of evidence subsets per claim.
    pub subsets: usize,
    /// Sentences per evidence subset.
    pub subset_size: usize,
    /// Leave out sentences of the claim's own sample when other samples exist.
    pub exclude_own_sample: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subsets: 3,
            subset_size: 8,
            exclude_own_sample: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no sentences available as evidence")]
    EmptyPool,
    #[error("no evidence subsets to assess against")]
    NoSubsets,
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceSubset {
    pub sentences: Vec<Sentence>,
    pub draw_seed: u64,
}

/// Draw `count` subsets of `min(size, |pool|)` distinct sentences each. The
/// sentences of a subset come out in random order.
pub fn sample_evidence_subsets(
    pool: &[Sentence],
    count: usize,
    size: usize,
    seed: u64,
) -> Result<Vec<EvidenceSubset>, EvalError> {
    if pool.is_empty() {
        return Err(EvalError::EmptyPool);
    }
    let amount = size.min(pool.len());
    Ok((0..count)
        .map(|k| {
            let draw_seed = derive_seed!(seed, k);
            let mut rng = rng_from(draw_seed);
            let sentences = index::sample(&mut rng, pool.len(), amount)
                .into_iter()
                .map(|i| pool[i].clone())
                .collect();
            EvidenceSubset {
                sentences,
                draw_seed,
            }
        })
        .collect())
}

/// Evidence pool for a claim from `source`: every sentence except those of the
/// claim's own sample, unless that would leave nothing or the pool has a
/// single sample.
pub fn evidence_pool(pool: &[Sentence], source: SampleRef, cfg: &EvalConfig) -> Vec<Sentence> {
    if cfg.exclude_own_sample {
        let samples: BTreeSet<SampleRef> = pool.iter().map(|s| s.source).collect();
        if samples.len() >= 2 {
            let others: Vec<Sentence> = pool
                .iter()
                .filter(|s| s.source != source)
                .cloned()
                .collect();
            if !others.is_empty() {
                return others;
            }
        }
    }
    pool.to_vec()
}

/// First number in `[0, 100]` in a verbalized reply. Plain integers are taken
/// as is; a decimal in `[0, 1]` is read as a probability and scaled.
pub fn parse_score(reply: &str) -> Option<u8> {
    let bytes = reply.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            let mut end = i;
            if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                end = i;
            }
            let token = &reply[start..end];
            if token.contains('.') {
                if let Ok(v) = token.parse::<f64>() {
                    if v <= 1.0 {
                        return Some((v * 100.0).round() as u8);
                    }
                    if v <= 100.0 {
                        return Some(v.round() as u8);
                    }
                }
            } else if let Ok(v) = token.parse::<u64>() {
                if v <= 100 {
                    return Some(v as u8);
                }
            }
        } else {
            i += 1;
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimAssessment {
    pub canonical_key: String,
    pub probability: ClaimProbability,
    pub raw_scores: Vec<u8>,
    pub subsets_used: usize,
    pub from_cache: bool,
    /// Samples that fell back to the neutral score after a failed retry.
    pub fallback_scores: u32,
}

impl ClaimAssessment {
    fn from_scores(canonical_key: &str, raw_scores: Vec<u8>, fallback_scores: u32) -> Self {
        let mean = raw_scores.iter().map(|&s| s as f64).sum::<f64>() / raw_scores.len() as f64;
        Self {
            canonical_key: canonical_key.to_string(),
            // Rounded to the precision records are written with, so a record
            // read back from disk ranks exactly like the in-memory one.
            probability: ClaimProbability::new(round_sig12(mean / 100.0), raw_scores.len() as u32)
                .expect("mean of scores in [0, 100]"),
            subsets_used: raw_scores.len(),
            raw_scores,
            from_cache: false,
            fallback_scores,
        }
    }
}

/// Backend usage of an evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCost {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl EvalCost {
    pub fn add(&mut self, other: &EvalCost) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

/// Score a claim against each evidence subset with the eval prompt. A reply
/// without a usable number is retried once, then recorded as
/// [`NEUTRAL_SCORE`].
pub fn assess_claim(
    entity: &str,
    claim_text: &str,
    subsets: &[EvidenceSubset],
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
    params: &SamplingParams,
) -> Result<(ClaimAssessment, EvalCost), EvalError> {
    if subsets.is_empty() {
        return Err(EvalError::NoSubsets);
    }
    let mut cost = EvalCost::default();
    let mut scores = Vec::with_capacity(subsets.len());
    let mut fallbacks = 0;
    for subset in subsets {
        let sources: Vec<&str> = subset.sentences.iter().map(|s| s.text.as_str()).collect();
        let prompt = templates.eval(entity, &sources, claim_text)?;
        let mut score = None;
        for attempt in 0..2u64 {
            let call = params
                .with_n(1)
                .with_seed(derive_seed!(subset.draw_seed, attempt));
            let completion = lm
                .generate(&prompt, &call)?
                .into_iter()
                .next()
                .ok_or_else(|| BackendError::Malformed("eval returned no completion".into()))?;
            cost.calls += 1;
            cost.prompt_tokens += completion.prompt_tokens;
            cost.completion_tokens += completion.completion_tokens;
            score = parse_score(&completion.text);
            if score.is_some() {
                break;
            }
        }
        scores.push(score.unwrap_or_else(|| {
            fallbacks += 1;
            log::warn!("unparseable eval reply for claim {claim_text:?}; using neutral score");
            NEUTRAL_SCORE
        }));
    }
    let key = crate::claims::normalize_claim(claim_text);
    Ok((ClaimAssessment::from_scores(&key, scores, fallbacks), cost))
}

/// Per-query memo of assessments keyed by canonical claim key. The first
/// insert for a key wins.
#[derive(Debug)]
pub struct EvalCache {
    scope: String,
    enabled: bool,
    entries: Mutex<HashMap<String, ClaimAssessment>>,
}

impl EvalCache {
    pub fn new(scope: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            enabled: true,
            entries: Mutex::new(HashMap::new()),
        }
    }

    /// A cache that never hits; every lookup re-assesses.
    pub fn disabled(scope: impl Into<String>) -> Self {
        Self {
            enabled: false,
            ..Self::new(scope)
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<ClaimAssessment> {
        if !self.enabled {
            return None;
        }
        self.entries
            .lock()
            .unwrap()
            .get(key)
            .map(|a| ClaimAssessment {
                from_cache: true,
                ..a.clone()
            })
    }

    /// Insert unless the key is already present; returns the stored entry.
    pub fn insert_once(&self, assessment: ClaimAssessment) -> ClaimAssessment {
        if !self.enabled {
            return assessment;
        }
        let mut entries = self.entries.lock().unwrap();
        entries
            .entry(assessment.canonical_key.clone())
            .or_insert(assessment)
            .clone()
    }
}

/// Everything needed to assess one claim: its first-seen surface form and
/// provenance, and the evidence pool as of its first appearance.
#[derive(Debug, Clone, Copy)]
pub struct AssessmentRequest<'a> {
    pub entity: &'a str,
    pub claim_text: &'a str,
    pub canonical_key: &'a str,
    pub source: SampleRef,
    pub pool: &'a [Sentence],
    /// Seed for the evidence draws; derive it from the run, query and key so
    /// it does not depend on scheduling.
    pub seed: u64,
}

/// Cache lookup, falling back to a fresh assessment that is then inserted.
pub fn cached_assess(
    request: &AssessmentRequest<'_>,
    cfg: &EvalConfig,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
    params: &SamplingParams,
    cache: &EvalCache,
) -> Result<(ClaimAssessment, EvalCost), EvalError> {
    if let Some(hit) = cache.get(request.canonical_key) {
        return Ok((hit, EvalCost::default()));
    }
    let pool = evidence_pool(request.pool, request.source, cfg);
    let subsets = sample_evidence_subsets(&pool, cfg.subsets, cfg.subset_size, request.seed)?;
    let (fresh, cost) = assess_claim(
        request.entity,
        request.claim_text,
        &subsets,
        lm,
        templates,
        params,
    )?;
    let stored = cache.insert_once(fresh.clone());
    // A concurrent insert may have won; its value is used but the work is
    // still charged.
    let winner = if stored == fresh { fresh } else { stored };
    Ok((winner, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ReplayBackend, TemplateId};

    fn pool(n: usize, samples: u32) -> Vec<Sentence> {
        (0..n)
            .map(|i| Sentence {
                text: format!("S{i}."),
                source: SampleRef {
                    iteration: 0,
                    sample_index: i as u32 % samples,
                },
                ordinal: i as u32 / samples,
            })
            .collect()
    }

    #[test]
    fn subset_sizes_clamp() {
        let s = sample_evidence_subsets(&pool(2, 1), 3, 5, 1).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|x| x.sentences.len() == 2));
    }

    #[test]
    fn subsets_are_distinct_and_deterministic() {
        let p = pool(40, 4);
        let a = sample_evidence_subsets(&p, 3, 8, 42).unwrap();
        let b = sample_evidence_subsets(&p, 3, 8, 42).unwrap();
        assert_eq!(a, b);
        for subset in &a {
            let texts: BTreeSet<_> = subset.sentences.iter().map(|s| &s.text).collect();
            assert_eq!(texts.len(), 8);
        }
        assert_ne!(a[0].sentences, a[1].sentences);
        assert_ne!(a, sample_evidence_subsets(&p, 3, 8, 43).unwrap());
    }

    #[test]
    fn empty_pool_errors() {
        assert!(matches!(
            sample_evidence_subsets(&[], 3, 8, 0),
            Err(EvalError::EmptyPool)
        ));
    }

    #[test]
    fn own_sample_excluded() {
        let p = pool(12, 3);
        let src = SampleRef {
            iteration: 0,
            sample_index: 1,
        };
        let cfg = EvalConfig::default();
        let ev = evidence_pool(&p, src, &cfg);
        assert_eq!(ev.len(), 8);
        assert!(ev.iter().all(|s| s.source != src));
        // Single sample: nothing to exclude against.
        assert_eq!(
            evidence_pool(&pool(4, 1), SampleRef::default(), &cfg).len(),
            4
        );
        let keep = EvalConfig {
            exclude_own_sample: false,
            ..cfg
        };
        assert_eq!(evidence_pool(&p, src, &keep).len(), 12);
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score("90"), Some(90));
        assert_eq!(parse_score("Probability: 85"), Some(85));
        assert_eq!(parse_score("about 150, say 80"), Some(80));
        assert_eq!(parse_score("0.85"), Some(85));
        assert_eq!(parse_score("100%"), Some(100));
        assert_eq!(parse_score("0"), Some(0));
        assert_eq!(parse_score("no idea"), None);
        assert_eq!(parse_score(""), None);
    }

    fn subsets(n: usize) -> Vec<EvidenceSubset> {
        sample_evidence_subsets(&pool(10, 2), n, 4, 9).unwrap()
    }

    #[test]
    fn averages_scores() {
        let lm =
            ReplayBackend::empty().with_keyed(TemplateId::Eval, "claim", "X is A.", ["90", "40"]);
        let (a, cost) = assess_claim(
            "X",
            "X is A.",
            &subsets(2),
            &lm,
            &TemplateSet::biography(),
            &SamplingParams::default(),
        )
        .unwrap();
        assert!((a.probability.value() - 0.65).abs() < 1e-12);
        assert_eq!(a.raw_scores, vec![90, 40]);
        assert_eq!(a.probability.sample_count(), 2);
        assert_eq!(cost.calls, 2);
        assert!(!a.from_cache);
    }

    #[test]
    fn verbalized_prefix() {
        let lm = ReplayBackend::empty().with_default(TemplateId::Eval, "Probability: 85");
        let (a, _) = assess_claim(
            "X",
            "X is A.",
            &subsets(1),
            &lm,
            &TemplateSet::biography(),
            &SamplingParams::default(),
        )
        .unwrap();
        assert!((a.probability.value() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn unparseable_retries_then_neutral() {
        let lm = ReplayBackend::empty().with_keyed(
            TemplateId::Eval,
            "claim",
            "X is A.",
            ["hmm", "still no", "70", "maybe", "80"],
        );
        let (a, cost) = assess_claim(
            "X",
            "X is A.",
            &subsets(3),
            &lm,
            &TemplateSet::biography(),
            &SamplingParams::default(),
        )
        .unwrap();
        // subset 0: two failures -> neutral; subset 1: 70; subset 2: retry -> 80
        assert_eq!(a.raw_scores, vec![50, 70, 80]);
        assert_eq!(a.fallback_scores, 1);
        assert_eq!(cost.calls, 5);
    }

    #[test]
    fn eval_prompt_uses_subset_sentences() {
        let lm = ReplayBackend::empty().with_default(TemplateId::Eval, "50");
        let subs = subsets(1);
        assess_claim(
            "X",
            "X is A.",
            &subs,
            &lm,
            &TemplateSet::biography(),
            &SamplingParams::default(),
        )
        .unwrap();
        let prompt = &lm.transcript()[0].prompt;
        for s in &subs[0].sentences {
            assert!(prompt.contains(&s.text));
        }
    }

    fn request<'a>(text: &'a str, key: &'a str, pool: &'a [Sentence]) -> AssessmentRequest<'a> {
        AssessmentRequest {
            entity: "X",
            claim_text: text,
            canonical_key: key,
            source: SampleRef::default(),
            pool,
            seed: 5,
        }
    }

    #[test]
    fn cache_hit_costs_nothing() {
        let lm = ReplayBackend::empty().with_default(TemplateId::Eval, "80");
        let p = pool(10, 2);
        let cache = EvalCache::new("q1");
        let cfg = EvalConfig::default();
        let t = TemplateSet::biography();
        let sp = SamplingParams::default();
        let (first, c1) =
            cached_assess(&request("X is A", "x is a", &p), &cfg, &lm, &t, &sp, &cache).unwrap();
        assert!(!first.from_cache);
        assert_eq!(c1.calls, 3);
        let (second, c2) = cached_assess(
            &request("x is a.", "x is a", &p),
            &cfg,
            &lm,
            &t,
            &sp,
            &cache,
        )
        .unwrap();
        assert!(second.from_cache);
        assert_eq!(c2, EvalCost::default());
        assert_eq!(second.probability, first.probability);
        assert_eq!(lm.calls(TemplateId::Eval), 3);
    }

    #[test]
    fn disabled_cache_always_assesses() {
        let lm = ReplayBackend::empty().with_default(TemplateId::Eval, "80");
        let p = pool(10, 2);
        let cache = EvalCache::disabled("q1");
        let cfg = EvalConfig::default();
        let t = TemplateSet::biography();
        let sp = SamplingParams::default();
        for _ in 0..2 {
            let (a, _) =
                cached_assess(&request("X is A", "x is a", &p), &cfg, &lm, &t, &sp, &cache)
                    .unwrap();
            assert!(!a.from_cache);
        }
        assert_eq!(lm.calls(TemplateId::Eval), 6);
        assert!(cache.is_empty());
    }

    #[test]
    fn insert_once_keeps_first() {
        let cache = EvalCache::new("q");
        let a = ClaimAssessment::from_scores("k", vec![10], 0);
        let b = ClaimAssessment::from_scores("k", vec![90], 0);
        assert_eq!(cache.insert_once(a.clone()), a);
        assert_eq!(cache.insert_once(b), a);
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn stored_value_matches_mean() {
        let a = ClaimAssessment::from_scores("k", vec![33, 34, 35], 0);
        assert!((a.probability.value() - 0.34).abs() < 1e-12);
    }
}
