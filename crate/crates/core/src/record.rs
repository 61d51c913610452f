//! Search records and their JSONL form.
//!
//! One record per line, fields in a fixed order, floats rounded to 12
//! significant digits so files are byte-stable across platforms.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::claims::{AtomicClaim, SampleRef};
use crate::error::Error;
use crate::query::Tier;
use crate::utility::{
    expected_utility, Candidate, ClaimProbability, ExpectedUtility, UtilityParams,
};

/// Round to 12 significant digits.
pub fn round_sig12(v: f64) -> f64 {
    if !v.is_finite() || v == 0.0 {
        return v;
    }
    format!("{v:.11e}").parse().unwrap_or(v)
}

pub(crate) fn ser_sig12<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(round_sig12(*v))
}

/// Backend usage of one query's search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    pub generation_prompt_tokens: u64,
    pub generation_completion_tokens: u64,
    pub eval_prompt_tokens: u64,
    pub eval_completion_tokens: u64,
    pub splitter_tokens: u64,
    pub eval_calls: u64,
    pub cache_hits: u64,
    #[serde(default)]
    pub generation_calls: u64,
    #[serde(default)]
    pub splitter_calls: u64,
    /// Claim lookups that missed the cache and were assessed.
    #[serde(default)]
    pub assessments: u64,
}

impl TokenLedger {
    pub fn eval_tokens(&self) -> u64 {
        self.eval_prompt_tokens + self.eval_completion_tokens
    }

    pub fn generation_tokens(&self) -> u64 {
        self.generation_prompt_tokens + self.generation_completion_tokens
    }

    pub fn total_tokens(&self) -> u64 {
        self.eval_tokens() + self.generation_tokens() + self.splitter_tokens
    }

    /// Fraction of claim lookups answered from the cache.
    pub fn cache_hit_rate(&self) -> f64 {
        let lookups = self.cache_hits + self.assessments;
        if lookups == 0 {
            0.0
        } else {
            self.cache_hits as f64 / lookups as f64
        }
    }

    pub fn add(&mut self, other: &TokenLedger) {
        self.generation_prompt_tokens += other.generation_prompt_tokens;
        self.generation_completion_tokens += other.generation_completion_tokens;
        self.eval_prompt_tokens += other.eval_prompt_tokens;
        self.eval_completion_tokens += other.eval_completion_tokens;
        self.splitter_tokens += other.splitter_tokens;
        self.eval_calls += other.eval_calls;
        self.cache_hits += other.cache_hits;
        self.generation_calls += other.generation_calls;
        self.splitter_calls += other.splitter_calls;
        self.assessments += other.assessments;
    }
}

/// A candidate answer with its claims and expected utility.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGeneration {
    pub text: String,
    pub claims: Vec<AtomicClaim>,
    pub expected: ExpectedUtility,
    pub iteration: u32,
    pub sample_index: u32,
    pub is_abstention: bool,
}

impl ScoredGeneration {
    pub fn abstention(params: &UtilityParams) -> Self {
        Self {
            text: String::new(),
            claims: Vec::new(),
            expected: ExpectedUtility::abstention(params),
            iteration: 0,
            sample_index: 0,
            is_abstention: true,
        }
    }

    pub fn probabilities(&self) -> Vec<ClaimProbability> {
        self.claims.iter().map(|c| c.probability).collect()
    }

    /// Expected utility of this answer under other utility parameters.
    pub fn rescored(&self, params: &UtilityParams) -> ExpectedUtility {
        if self.is_abstention {
            ExpectedUtility::abstention(params)
        } else {
            expected_utility(&self.probabilities(), params)
        }
    }

    pub fn sample_ref(&self) -> SampleRef {
        SampleRef {
            iteration: self.iteration,
            sample_index: self.sample_index,
        }
    }
}

impl Candidate for ScoredGeneration {
    fn expected_value(&self) -> f64 {
        self.expected.value
    }
    fn claim_count(&self) -> usize {
        self.claims.len()
    }
    fn iteration(&self) -> u32 {
        self.iteration
    }
    fn sample_index(&self) -> u32 {
        self.sample_index
    }
    fn is_abstention(&self) -> bool {
        self.is_abstention
    }
}

/// A candidate re-scored under different parameters, for re-ranking without
/// touching the stored pool.
#[derive(Debug, Clone, Copy)]
pub struct Rescored<'a> {
    pub generation: &'a ScoredGeneration,
    pub expected: ExpectedUtility,
}

impl Candidate for Rescored<'_> {
    fn expected_value(&self) -> f64 {
        self.expected.value
    }
    fn claim_count(&self) -> usize {
        self.generation.claims.len()
    }
    fn iteration(&self) -> u32 {
        self.generation.iteration
    }
    fn sample_index(&self) -> u32 {
        self.generation.sample_index
    }
    fn is_abstention(&self) -> bool {
        self.generation.is_abstention
    }
}

/// Output of one query's search: the full candidate pool with utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchRecord {
    pub query_id: String,
    pub entity: String,
    pub task: String,
    pub config_hash: String,
    pub pool: Vec<ScoredGeneration>,
    /// Claim keys used for each rewrite prompt, in prompt order.
    pub selected_claims: Vec<Vec<String>>,
    pub ledger: TokenLedger,
    pub tier: Option<Tier>,
    pub params: UtilityParams,
    /// Set when the search stopped on a backend failure.
    pub incomplete: bool,
}

impl SearchRecord {
    pub fn abstention(&self) -> &ScoredGeneration {
        self.pool
            .iter()
            .find(|g| g.is_abstention)
            .expect("record pool holds an abstention")
    }

    pub fn generations(&self) -> impl Iterator<Item = &ScoredGeneration> {
        self.pool.iter().filter(|g| !g.is_abstention)
    }

    pub fn best_value(&self) -> f64 {
        self.pool
            .iter()
            .map(|g| g.expected.value)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_json_line(&self) -> Result<String, Error> {
        Ok(serde_json::to_string(&RecordWire::from(self))?)
    }

    pub fn from_json_line(line: &str) -> Result<Self, Error> {
        let wire: RecordWire = serde_json::from_str(line)?;
        wire.into_record()
    }
}

#[derive(Serialize, Deserialize)]
struct ClaimWire {
    text: String,
    canonical_key: String,
    #[serde(serialize_with = "ser_sig12")]
    probability: f64,
    sample_count: u32,
}

#[derive(Serialize, Deserialize)]
struct GenerationWire {
    text: String,
    iteration: u32,
    sample_index: u32,
    is_abstention: bool,
    #[serde(serialize_with = "ser_sig12")]
    expected_utility: f64,
    claims: Vec<ClaimWire>,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    query_id: String,
    entity: String,
    task: String,
    config_hash: String,
    pool: Vec<GenerationWire>,
    selected_claims: Vec<Vec<String>>,
    ledger: TokenLedger,
    #[serde(default)]
    tier: Option<Tier>,
    #[serde(serialize_with = "ser_sig12")]
    lambda: f64,
    #[serde(default)]
    incomplete: bool,
}

impl From<&SearchRecord> for RecordWire {
    fn from(r: &SearchRecord) -> Self {
        RecordWire {
            query_id: r.query_id.clone(),
            entity: r.entity.clone(),
            task: r.task.clone(),
            config_hash: r.config_hash.clone(),
            pool: r
                .pool
                .iter()
                .map(|g| GenerationWire {
                    text: g.text.clone(),
                    iteration: g.iteration,
                    sample_index: g.sample_index,
                    is_abstention: g.is_abstention,
                    expected_utility: g.expected.value,
                    claims: g
                        .claims
                        .iter()
                        .map(|c| ClaimWire {
                            text: c.text.clone(),
                            canonical_key: c.canonical_key.clone(),
                            probability: c.probability.value(),
                            sample_count: c.probability.sample_count(),
                        })
                        .collect(),
                })
                .collect(),
            selected_claims: r.selected_claims.clone(),
            ledger: r.ledger,
            tier: r.tier,
            lambda: r.params.lambda(),
            incomplete: r.incomplete,
        }
    }
}

impl RecordWire {
    fn into_record(self) -> Result<SearchRecord, Error> {
        let params = UtilityParams::from_lambda(self.lambda)?;
        let entity = self.entity;
        let pool = self
            .pool
            .into_iter()
            .map(|g| {
                let source = SampleRef {
                    iteration: g.iteration,
                    sample_index: g.sample_index,
                };
                let claims = g
                    .claims
                    .into_iter()
                    .map(|c| {
                        Ok(AtomicClaim {
                            text: c.text,
                            canonical_key: c.canonical_key,
                            entity: entity.clone(),
                            source,
                            sentence: 0,
                            probability: ClaimProbability::new(c.probability, c.sample_count)?,
                        })
                    })
                    .collect::<Result<Vec<_>, Error>>()?;
                let mut generation = ScoredGeneration {
                    text: g.text,
                    claims,
                    expected: ExpectedUtility::abstention(&params),
                    iteration: g.iteration,
                    sample_index: g.sample_index,
                    is_abstention: g.is_abstention,
                };
                generation.expected = generation.rescored(&params);
                Ok(generation)
            })
            .collect::<Result<Vec<_>, Error>>()?;
        Ok(SearchRecord {
            query_id: self.query_id,
            entity,
            task: self.task,
            config_hash: self.config_hash,
            pool,
            selected_claims: self.selected_claims,
            ledger: self.ledger,
            tier: self.tier,
            params,
            incomplete: self.incomplete,
        })
    }
}

pub fn read_records(path: &Path) -> Result<Vec<SearchRecord>, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            SearchRecord::from_json_line(&line)
                .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Append records to a JSONL file, one line each, flushing after every record.
pub fn append_records<'a, I>(path: &Path, records: I) -> Result<(), Error>
where
    I: IntoIterator<Item = &'a SearchRecord>,
{
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(file, "{}", r.to_json_line()?).map_err(|e| Error::io(path, e))?;
        file.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
