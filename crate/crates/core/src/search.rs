//! The generate → assess → self-prompt loop, and the single-round wide
//! baseline.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{LanguageModel, SamplingParams, TemplateSet};
use crate::claims::{
    dedup_generation_claims, extract_claims, split_sentences, AtomicClaim, SampleRef, Sentence,
};
use crate::derive_seed;
use crate::error::Error;
use crate::eval::{cached_assess, AssessmentRequest, ClaimAssessment, EvalCache, EvalConfig};
use crate::query::Query;
use crate::record::{ScoredGeneration, SearchRecord, TokenLedger};
use crate::utility::{expected_utility, rank_pool, UtilityParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Iterative,
    Wide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppingRule {
    FixedIterations,
    ImprovementOrMax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Generations sampled per iteration.
    pub width: u32,
    pub max_iterations: u32,
    pub rho_star: f64,
    /// Probability a claim must exceed to be fed back into the rewrite
    /// prompt; `None` means `rho_star`.
    pub claim_threshold: Option<f64>,
    pub mode: SearchMode,
    pub stopping: StoppingRule,
    pub sampling: SamplingParams,
    pub eval: EvalConfig,
    /// Rank by expected accuracy and abstain below 50% instead of using
    /// expected utility. Affects [`select_best`] only.
    pub baseline_accuracy_objective: bool,
    /// Keep at most this many claims in a rewrite prompt.
    pub rewrite_fact_cap: Option<usize>,
    pub cache_enabled: bool,
    pub seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            width: 16,
            max_iterations: 3,
            rho_star: 0.5,
            claim_threshold: None,
            mode: SearchMode::Iterative,
            stopping: StoppingRule::ImprovementOrMax,
            sampling: SamplingParams::default(),
            eval: EvalConfig::default(),
            baseline_accuracy_objective: false,
            rewrite_fact_cap: None,
            cache_enabled: true,
            seed: 0,
        }
    }
}

impl SearchConfig {
    /// Single round of `width` samples with no rewrite.
    pub fn wide(width: u32) -> Self {
        Self {
            width,
            max_iterations: 1,
            mode: SearchMode::Wide,
            ..Self::default()
        }
    }

    pub fn threshold(&self) -> f64 {
        self.claim_threshold.unwrap_or(self.rho_star)
    }

    pub fn utility_params(&self) -> Result<UtilityParams, Error> {
        Ok(UtilityParams::from_target(self.rho_star)?)
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.width == 0 {
            return bad("width must be positive");
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be positive");
        }
        if self.mode == SearchMode::Wide && self.max_iterations != 1 {
            return bad("wide search runs exactly one iteration");
        }
        if !(0.0..=1.0).contains(&self.threshold()) {
            return bad("claim threshold must lie in [0, 1]");
        }
        if self.eval.subsets == 0 || self.eval.subset_size == 0 {
            return bad("eval needs at least one subset of at least one sentence");
        }
        self.utility_params()?;
        self.sampling.validate()?;
        Ok(())
    }
}

/// Short stable digest of everything that determines a record's content.
pub fn config_hash(config: &SearchConfig, templates: &TemplateSet) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    h.update(templates.task.as_bytes());
    for (id, digest) in templates.hashes() {
        h.update(id.as_bytes());
        h.update(digest.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search config: {0}")]
    Config(#[source] Error),
    /// The backend failed mid-run; `partial` holds everything finished so far
    /// and is flagged incomplete.
    #[error("search for query {} stopped early: {source}", partial.query_id)]
    Failed {
        #[source]
        source: Error,
        partial: Box<SearchRecord>,
    },
}

/// A claim chosen for the rewrite prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedClaim {
    pub text: String,
    pub canonical_key: String,
    pub probability: f64,
}

/// Unique claims with probability strictly above `threshold`, by descending
/// probability then key. The text is the first one seen in pool order.
pub fn select_claims_above_threshold(
    pool: &[ScoredGeneration],
    threshold: f64,
) -> Vec<SelectedClaim> {
    let mut seen: BTreeMap<&str, SelectedClaim> = BTreeMap::new();
    for claim in pool.iter().flat_map(|g| &g.claims) {
        if !claim.probability.is_assessed() || claim.probability.value() <= threshold {
            continue;
        }
        seen.entry(&claim.canonical_key)
            .or_insert_with(|| SelectedClaim {
                text: claim.text.clone(),
                canonical_key: claim.canonical_key.clone(),
                probability: claim.probability.value(),
            });
    }
    let mut out: Vec<SelectedClaim> = seen.into_values().collect();
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.canonical_key.cmp(&b.canonical_key))
    });
    out
}

/// Whether to stop after the iterations whose pool-best utilities are `bests`.
pub fn stopping_criterion(bests: &[f64], config: &SearchConfig) -> bool {
    if bests.len() >= config.max_iterations as usize {
        return true;
    }
    match config.stopping {
        StoppingRule::FixedIterations => false,
        StoppingRule::ImprovementOrMax => match bests {
            [.., prev, last] => last <= prev,
            _ => false,
        },
    }
}

/// The answer a search settles on.
///
/// Normally the rank-1 pool member. Under the accuracy objective the
/// non-empty candidate with the highest expected accuracy wins, unless that
/// accuracy is below one half, in which case the answer is the abstention.
pub fn select_best<'a>(record: &'a SearchRecord, config: &SearchConfig) -> &'a ScoredGeneration {
    if config.baseline_accuracy_objective {
        let best = record
            .generations()
            .filter_map(|g| g.expected.expected_accuracy().map(|a| (a, g)))
            .fold(None::<(f64, &ScoredGeneration)>, |acc, (a, g)| match acc {
                Some((b, _)) if b >= a => acc,
                _ => Some((a, g)),
            });
        return match best {
            Some((acc, g)) if acc >= 0.5 => g,
            _ => record.abstention(),
        };
    }
    rank_pool(&record.pool).expect("record pool holds one abstention")[0]
}

/// Where a claim key was first seen; fixes the inputs of its assessment.
#[derive(Debug, Clone)]
struct FirstSeen {
    text: String,
    source: SampleRef,
    /// Evidence pool prefix available at that point.
    pool_len: usize,
}

struct Run<'a> {
    query: &'a Query,
    config: &'a SearchConfig,
    lm: &'a dyn LanguageModel,
    templates: &'a TemplateSet,
    params: UtilityParams,
    cache: &'a EvalCache,
    record: SearchRecord,
    sentences: Vec<Sentence>,
    first_seen: HashMap<String, FirstSeen>,
}

impl Run<'_> {
    fn generate(&mut self, iteration: u32, facts: &[SelectedClaim]) -> Result<(), Error> {
        let entity = self.query.entity.as_str();
        let texts: Vec<&str> = facts.iter().map(|c| c.text.as_str()).collect();
        let prompt = self.templates.rewrite(entity, &texts)?;
        let call = self
            .config
            .sampling
            .with_n(self.config.width)
            .with_seed(derive_seed!(
                self.config.seed,
                &self.query.query_id,
                iteration
            ));
        let mut completions = self.lm.generate(&prompt, &call)?;
        completions.sort_by_key(|c| c.sample_index);
        let ledger = &mut self.record.ledger;
        ledger.generation_calls += completions.len() as u64;
        for c in &completions {
            ledger.generation_prompt_tokens += c.prompt_tokens;
            ledger.generation_completion_tokens += c.completion_tokens;
        }

        // Split every sample into sentences, then claims.
        let splitter = SamplingParams {
            temperature: 0.0,
            ..self.config.sampling.clone()
        };
        let mut generations = Vec::with_capacity(completions.len());
        let mut new_sentences = Vec::new();
        for c in &completions {
            let source = SampleRef {
                iteration,
                sample_index: c.sample_index,
            };
            let sentences = split_sentences(&c.text, source);
            let per_sentence: Vec<Vec<AtomicClaim>> = if self.lm.sentences_are_atomic() {
                sentences
                    .iter()
                    .map(|s| vec![AtomicClaim::new(&s.text, entity, source, s.ordinal)])
                    .collect()
            } else {
                let split: Result<Vec<_>, _> = sentences
                    .par_iter()
                    .map(|s| {
                        let seed = derive_seed!(
                            self.config.seed,
                            &self.query.query_id,
                            "split",
                            iteration,
                            c.sample_index,
                            s.ordinal
                        );
                        extract_claims(
                            entity,
                            s,
                            self.lm,
                            self.templates,
                            &splitter.with_seed(seed),
                        )
                    })
                    .collect();
                let split = split?;
                let ledger = &mut self.record.ledger;
                ledger.splitter_calls += split.len() as u64;
                ledger.splitter_tokens += split.iter().map(|s| s.tokens).sum::<u64>();
                split.into_iter().map(|s| s.claims).collect()
            };
            generations.push((
                c.text.clone(),
                c.sample_index,
                dedup_generation_claims(per_sentence),
            ));
            new_sentences.extend(sentences);
        }
        self.sentences.extend(new_sentences);

        // Evidence for keys first seen now is everything generated so far.
        for (_, _, claims) in &generations {
            for claim in claims {
                self.first_seen
                    .entry(claim.canonical_key.clone())
                    .or_insert_with(|| FirstSeen {
                        text: claim.text.clone(),
                        source: claim.source,
                        pool_len: self.sentences.len(),
                    });
            }
        }

        let assessed = self.assess(generations.iter().flat_map(|(_, _, c)| c))?;
        for (text, sample_index, mut claims) in generations {
            for claim in &mut claims {
                claim.probability = assessed[&claim.canonical_key].probability;
            }
            let probs: Vec<_> = claims.iter().map(|c| c.probability).collect();
            self.record.pool.push(ScoredGeneration {
                text,
                expected: expected_utility(&probs, &self.params),
                claims,
                iteration,
                sample_index,
                is_abstention: false,
            });
        }
        Ok(())
    }

    /// Probabilities for the given claim occurrences. With the cache on,
    /// each key is assessed at most once per query; with it off, every
    /// occurrence is assessed afresh from the same inputs.
    fn assess<'c>(
        &mut self,
        occurrences: impl Iterator<Item = &'c AtomicClaim>,
    ) -> Result<HashMap<String, ClaimAssessment>, Error> {
        let keys: Vec<&str> = occurrences.map(|c| c.canonical_key.as_str()).collect();
        let mut out = HashMap::new();
        let mut jobs: Vec<&str> = Vec::new();
        for &key in &keys {
            if self.cache.is_enabled() {
                if out.contains_key(key) {
                    continue;
                }
                match self.cache.get(key) {
                    Some(hit) => {
                        out.insert(key.to_string(), hit);
                    }
                    None => {
                        out.insert(key.to_string(), placeholder(key));
                        jobs.push(key);
                    }
                }
            } else {
                jobs.push(key);
            }
        }
        self.record.ledger.cache_hits += (keys.len() - jobs.len()) as u64;

        let run_seed = self.config.seed;
        let query_id = self.query.query_id.as_str();
        let entity = self.query.entity.as_str();
        let (lm, templates, cache, cfg) = (self.lm, self.templates, self.cache, &self.config.eval);
        let eval_params = self.config.sampling.clone();
        let (sentences, first_seen) = (&self.sentences, &self.first_seen);
        let results: Result<Vec<_>, _> = jobs
            .par_iter()
            .map(|&key| {
                let first = &first_seen[key];
                let request = AssessmentRequest {
                    entity,
                    claim_text: &first.text,
                    canonical_key: key,
                    source: first.source,
                    pool: &sentences[..first.pool_len],
                    seed: derive_seed!(run_seed, query_id, "eval", key),
                };
                cached_assess(&request, cfg, lm, templates, &eval_params, cache)
            })
            .collect();
        let ledger = &mut self.record.ledger;
        for (assessment, cost) in results? {
            ledger.assessments += 1;
            ledger.eval_calls += cost.calls;
            ledger.eval_prompt_tokens += cost.prompt_tokens;
            ledger.eval_completion_tokens += cost.completion_tokens;
            out.insert(assessment.canonical_key.clone(), assessment);
        }
        Ok(out)
    }
}

fn placeholder(key: &str) -> ClaimAssessment {
    ClaimAssessment {
        canonical_key: key.to_string(),
        probability: crate::utility::ClaimProbability::UNASSESSED,
        raw_scores: Vec::new(),
        subsets_used: 0,
        from_cache: false,
        fallback_scores: 0,
    }
}

/// Run the search described by `config` for one query.
///
/// The pool starts with the abstention. Each iteration samples `width`
/// answers (from the write prompt first, then from the rewrite prompt built
/// from the claims above the threshold), assesses their claims and adds
/// them to the pool.
pub fn run_search(
    query: &Query,
    config: &SearchConfig,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
    cache: &EvalCache,
) -> Result<SearchRecord, SearchError> {
    config.validate().map_err(SearchError::Config)?;
    let params = config.utility_params().map_err(SearchError::Config)?;
    let record = SearchRecord {
        query_id: query.query_id.clone(),
        entity: query.entity.clone(),
        task: query.task.clone(),
        config_hash: config_hash(config, templates),
        pool: vec![ScoredGeneration::abstention(&params)],
        selected_claims: Vec::new(),
        ledger: TokenLedger::default(),
        tier: query.tier,
        params,
        incomplete: false,
    };
    let mut run = Run {
        query,
        config,
        lm,
        templates,
        params,
        cache,
        record,
        sentences: Vec::new(),
        first_seen: HashMap::new(),
    };

    let mut facts: Vec<SelectedClaim> = Vec::new();
    let mut bests = Vec::new();
    for iteration in 0..config.max_iterations {
        if iteration > 0 {
            let mut chosen = select_claims_above_threshold(&run.record.pool, config.threshold());
            if let Some(cap) = config.rewrite_fact_cap {
                chosen.truncate(cap);
            }
            run.record
                .selected_claims
                .push(chosen.iter().map(|c| c.canonical_key.clone()).collect());
            facts = chosen;
        }
        if let Err(source) = run.generate(iteration, &facts) {
            let mut partial = run.record;
            partial.incomplete = true;
            return Err(SearchError::Failed {
                source,
                partial: Box::new(partial),
            });
        }
        bests.push(run.record.best_value());
        log::debug!(
            "{}: iteration {iteration} best expected utility {:.4}",
            query.query_id,
            run.record.best_value()
        );
        if stopping_criterion(&bests, config) {
            break;
        }
    }
    Ok(run.record)
}

/// Iterative search with a fresh per-query cache.
pub fn research_search(
    query: &Query,
    config: &SearchConfig,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
) -> Result<SearchRecord, SearchError> {
    if config.mode != SearchMode::Iterative {
        return Err(SearchError::Config(Error::Invalid(
            "research_search needs iterative mode".into(),
        )));
    }
    run_search(query, config, lm, templates, &new_cache(query, config))
}

/// One round of `width` samples from the write prompt.
pub fn wide_search(
    query: &Query,
    config: &SearchConfig,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
) -> Result<SearchRecord, SearchError> {
    if config.mode != SearchMode::Wide {
        return Err(SearchError::Config(Error::Invalid(
            "wide_search needs wide mode".into(),
        )));
    }
    run_search(query, config, lm, templates, &new_cache(query, config))
}

/// Dispatch on `config.mode`.
pub fn search(
    query: &Query,
    config: &SearchConfig,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
) -> Result<SearchRecord, SearchError> {
    match config.mode {
        SearchMode::Iterative => research_search(query, config, lm, templates),
        SearchMode::Wide => wide_search(query, config, lm, templates),
    }
}

fn new_cache(query: &Query, config: &SearchConfig) -> EvalCache {
    if config.cache_enabled {
        EvalCache::new(query.query_id.clone())
    } else {
        EvalCache::disabled(query.query_id.clone())
    }
}
