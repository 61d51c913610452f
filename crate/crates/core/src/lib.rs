//! Iterative self-reflection search for training data that knows when to
//! stop talking.
//!
//! A search samples answers, splits them into atomic claims, estimates each
//! claim's probability of being true from its agreement with other samples,
//! and scores answers by expected utility: +1 per true claim, −λ per false
//! one, with λ set by a target accuracy ρ*. An empty answer (the abstention)
//! is always a candidate, so when nothing clears the bar the search declines
//! to answer. High-probability claims are fed back into a rewrite prompt and
//! the loop repeats.
//!
//! Start with [`search::research_search`] or [`runner::run_batch`]; the
//! [`sim`] module provides an offline world to run against.

pub mod analysis;
pub mod backend;
pub mod claims;
pub mod emit;
pub mod error;
pub mod eval;
pub mod query;
pub mod record;
pub mod runner;
pub mod search;
pub mod seed;
pub mod sim;
pub mod utility;

pub use backend::{
    Completion, HttpBackend, HttpConfig, LanguageModel, Prompt, ReplayBackend, ReplayScript,
    SamplingParams, TemplateId, TemplateSet,
};
pub use claims::{normalize_claim, AtomicClaim, SampleRef, Sentence};
pub use error::{Error, Result};
pub use eval::{ClaimAssessment, EvalCache, EvalConfig};
pub use query::{Query, Tier};
pub use record::{ScoredGeneration, SearchRecord, TokenLedger};
pub use search::{
    research_search, search, wide_search, SearchConfig, SearchError, SearchMode, StoppingRule,
};
pub use utility::{
    expected_utility, rank_pool, realized_utility, ClaimProbability, ExpectedUtility, UtilityParams,
};
