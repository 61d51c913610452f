//! Reports computed from persisted records: Pareto sweeps over the target
//! accuracy, per-tier tables and cost comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::query::Tier;
use crate::record::{Rescored, ScoredGeneration, SearchRecord};
use crate::search::{select_best, SearchConfig};
use crate::sim::{oracle_truth, SimWorld};
use crate::utility::{rank_pool, UtilityParams};

/// Judges claims as true or false.
pub trait Oracle {
    fn truth(&self, entity: &str, claim: &str) -> Result<bool, Error>;
}

impl Oracle for SimWorld {
    fn truth(&self, entity: &str, claim: &str) -> Result<bool, Error> {
        oracle_truth(self, entity, claim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccuracyKind {
    /// Judged by an oracle.
    Realized,
    /// Mean claim probability; no oracle was available.
    Expected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMode {
    /// One pool per query, re-ranked under each target.
    Reranking,
    /// A separate search per target.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub rho_star: f64,
    pub mode: SweepMode,
    pub n_queries: usize,
    /// Abstentions count as zero claims.
    pub mean_claims_per_answer: f64,
    /// Over non-abstaining answers; absent when every query abstained.
    pub mean_accuracy: Option<f64>,
    pub accuracy_kind: AccuracyKind,
    pub abstention_rate: f64,
    /// Mean of expected true minus expected false claims.
    pub mean_utility_at_half: f64,
}

/// Accuracy of one non-abstaining answer.
fn answer_accuracy(
    record: &SearchRecord,
    answer: &ScoredGeneration,
    oracle: Option<&dyn Oracle>,
) -> Result<Option<f64>, Error> {
    if answer.is_abstention || answer.claims.is_empty() {
        return Ok(None);
    }
    match oracle {
        Some(o) => {
            let labels = truth_labels(record, answer, o)?;
            Ok(Some(
                labels.iter().filter(|&&t| t).count() as f64 / labels.len() as f64,
            ))
        }
        None => Ok(answer.expected.expected_accuracy()),
    }
}

fn truth_labels(
    record: &SearchRecord,
    answer: &ScoredGeneration,
    oracle: &dyn Oracle,
) -> Result<Vec<bool>, Error> {
    answer
        .claims
        .iter()
        .map(|c| oracle.truth(&record.entity, &c.text))
        .collect()
}

/// Aggregate one point from each query's chosen answer.
pub fn pareto_point(
    rho_star: f64,
    mode: SweepMode,
    chosen: &[(&SearchRecord, &ScoredGeneration)],
    oracle: Option<&dyn Oracle>,
) -> Result<ParetoPoint, Error> {
    let n = chosen.len();
    if n == 0 {
        return Err(Error::Invalid("no records to sweep".into()));
    }
    let half = UtilityParams::from_target(0.5)?;
    let mut claims = 0usize;
    let mut abstained = 0usize;
    let mut utility = 0.0;
    let mut accuracies = Vec::new();
    for (record, answer) in chosen {
        if answer.is_abstention {
            abstained += 1;
        }
        claims += answer.claims.len();
        utility += answer.rescored(&half).value;
        if let Some(a) = answer_accuracy(record, answer, oracle)? {
            accuracies.push(a);
        }
    }
    Ok(ParetoPoint {
        rho_star,
        mode,
        n_queries: n,
        mean_claims_per_answer: claims as f64 / n as f64,
        mean_accuracy: mean(&accuracies),
        accuracy_kind: if oracle.is_some() {
            AccuracyKind::Realized
        } else {
            AccuracyKind::Expected
        },
        abstention_rate: abstained as f64 / n as f64,
        mean_utility_at_half: utility / n as f64,
    })
}

/// Rank-1 member of a record's pool when re-scored at `rho_star`.
pub fn rerank_best(record: &SearchRecord, rho_star: f64) -> Result<&ScoredGeneration, Error> {
    let params = UtilityParams::from_target(rho_star)?;
    let rescored: Vec<Rescored<'_>> = record
        .pool
        .iter()
        .map(|g| Rescored {
            generation: g,
            expected: g.rescored(&params),
        })
        .collect();
    let best = rank_pool(&rescored)?[0];
    Ok(best.generation)
}

/// Pareto sweep over shared pools: generation happens once, only the
/// selection changes with the target.
pub fn pareto_rerank(
    records: &[SearchRecord],
    rho_values: &[f64],
    oracle: Option<&dyn Oracle>,
) -> Result<Vec<ParetoPoint>, Error> {
    if rho_values.len() < 2 {
        return Err(Error::Invalid("a sweep needs at least two targets".into()));
    }
    let complete: Vec<&SearchRecord> = records.iter().filter(|r| !r.incomplete).collect();
    rho_values
        .iter()
        .map(|&rho| {
            let chosen = complete
                .iter()
                .map(|r| Ok((*r, rerank_best(r, rho)?)))
                .collect::<Result<Vec<_>, Error>>()?;
            pareto_point(rho, SweepMode::Reranking, &chosen, oracle)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierReport {
    pub tier: Tier,
    pub n_queries: usize,
    /// Mean utility at a target of one half (true minus false claims);
    /// realized with an oracle, expected otherwise.
    pub mean_utility: f64,
    /// Mean per-answer accuracy over non-abstaining answers.
    pub accuracy: Option<f64>,
    pub accuracy_kind: AccuracyKind,
    pub abstention_rate: f64,
    pub claims_per_non_abstaining_answer: Option<f64>,
}

/// Per-tier aggregates of each record's selected answer. Records without a
/// tier and empty tiers are left out.
pub fn tier_report(
    records: &[SearchRecord],
    config: &SearchConfig,
    oracle: Option<&dyn Oracle>,
) -> Result<Vec<TierReport>, Error> {
    let half = UtilityParams::from_target(0.5)?;
    let mut by_tier: BTreeMap<Tier, Vec<&SearchRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.incomplete) {
        match r.tier {
            Some(t) => by_tier.entry(t).or_default().push(r),
            None => log::warn!(
                "record {} has no tier; left out of the tier report",
                r.query_id
            ),
        }
    }
    let mut out = Vec::new();
    for tier in Tier::ALL {
        let Some(rs) = by_tier.get(&tier) else {
            log::info!("no records in tier {tier}");
            continue;
        };
        let mut utility = 0.0;
        let mut abstained = 0;
        let mut accuracies = Vec::new();
        let mut claim_counts = Vec::new();
        for r in rs {
            let answer = select_best(r, config);
            if answer.is_abstention {
                abstained += 1;
                continue;
            }
            claim_counts.push(answer.claims.len() as f64);
            utility += match oracle {
                Some(o) => {
                    let labels = truth_labels(r, answer, o)?;
                    crate::utility::realized_utility(&labels, &half)
                }
                None => answer.rescored(&half).value,
            };
            if let Some(a) = answer_accuracy(r, answer, oracle)? {
                accuracies.push(a);
            }
        }
        let n = rs.len();
        out.push(TierReport {
            tier,
            n_queries: n,
            mean_utility: utility / n as f64,
            accuracy: mean(&accuracies),
            accuracy_kind: if oracle.is_some() {
                AccuracyKind::Realized
            } else {
                AccuracyKind::Expected
            },
            abstention_rate: abstained as f64 / n as f64,
            claims_per_non_abstaining_answer: mean(&claim_counts),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub query_id: String,
    pub eval_tokens_a: u64,
    pub eval_tokens_b: u64,
    pub generation_tokens_a: u64,
    pub generation_tokens_b: u64,
    pub eval_calls_a: u64,
    pub eval_calls_b: u64,
    pub cache_hit_rate_a: f64,
    pub cache_hit_rate_b: f64,
    pub best_utility_a: f64,
    pub best_utility_b: f64,
}

impl CostRow {
    pub fn eval_token_delta(&self) -> i64 {
        self.eval_tokens_a as i64 - self.eval_tokens_b as i64
    }

    pub fn best_utility_delta(&self) -> f64 {
        self.best_utility_a - self.best_utility_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostComparison {
    pub rows: Vec<CostRow>,
    pub total: CostRow,
}

/// Side-by-side ledgers of two runs over the same queries (`a` minus `b`
/// for deltas). The totals row sums tokens and calls, pools cache hits and
/// averages best utilities.
pub fn cost_compare(a: &[SearchRecord], b: &[SearchRecord]) -> Result<CostComparison, Error> {
    let index = |rs: &[SearchRecord]| -> BTreeMap<String, usize> {
        rs.iter()
            .enumerate()
            .map(|(i, r)| (r.query_id.clone(), i))
            .collect()
    };
    let (ia, ib) = (index(a), index(b));
    let only_a: Vec<&String> = ia.keys().filter(|k| !ib.contains_key(*k)).collect();
    let only_b: Vec<&String> = ib.keys().filter(|k| !ia.contains_key(*k)).collect();
    if !only_a.is_empty() || !only_b.is_empty() {
        return Err(Error::Invalid(format!(
            "query sets differ: only in first {only_a:?}, only in second {only_b:?}"
        )));
    }
    let mut rows = Vec::new();
    let (mut la, mut lb) = (
        crate::record::TokenLedger::default(),
        crate::record::TokenLedger::default(),
    );
    let (mut ua, mut ub) = (0.0, 0.0);
    for r in a {
        let other = &b[ib[&r.query_id]];
        la.add(&r.ledger);
        lb.add(&other.ledger);
        ua += r.best_value();
        ub += other.best_value();
        rows.push(CostRow {
            query_id: r.query_id.clone(),
            eval_tokens_a: r.ledger.eval_tokens(),
            eval_tokens_b: other.ledger.eval_tokens(),
            generation_tokens_a: r.ledger.generation_tokens(),
            generation_tokens_b: other.ledger.generation_tokens(),
            eval_calls_a: r.ledger.eval_calls,
            eval_calls_b: other.ledger.eval_calls,
            cache_hit_rate_a: r.ledger.cache_hit_rate(),
            cache_hit_rate_b: other.ledger.cache_hit_rate(),
            best_utility_a: r.best_value(),
            best_utility_b: other.best_value(),
        });
    }
    let n = a.len().max(1) as f64;
    let total = CostRow {
        query_id: "total".into(),
        eval_tokens_a: la.eval_tokens(),
        eval_tokens_b: lb.eval_tokens(),
        generation_tokens_a: la.generation_tokens(),
        generation_tokens_b: lb.generation_tokens(),
        eval_calls_a: la.eval_calls,
        eval_calls_b: lb.eval_calls,
        cache_hit_rate_a: la.cache_hit_rate(),
        cache_hit_rate_b: lb.cache_hit_rate(),
        best_utility_a: ua / n,
        best_utility_b: ub / n,
    };
    Ok(CostComparison { rows, total })
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Write rows as CSV with a leading `run_id` column. Absent values are
/// empty cells.
pub fn write_csv<T: Serialize>(path: &Path, run_id: &str, rows: &[T]) -> Result<(), Error> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header_done = false;
    for row in rows {
        let serde_json::Value::Object(map) = serde_json::to_value(row)? else {
            return Err(Error::Invalid("csv rows must be structs".into()));
        };
        if !header_done {
            let mut header = vec!["run_id".to_string()];
            header.extend(map.keys().cloned());
            w.write_record(&header).map_err(|e| csv_error(path, e))?;
            header_done = true;
        }
        let mut cells = vec![run_id.to_string()];
        cells.extend(map.values().map(|v| match v {
            serde_json::Value::Null => String::new(),
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        }));
        w.write_record(&cells).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Invalid(format!("{}: {e}", path.display()))
}

/// JSON report envelope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub run_id: String,
    pub kind: String,
    pub rows: Vec<T>,
}
