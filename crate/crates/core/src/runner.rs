//! Batch runner: searches many queries in parallel and streams records to a
//! JSONL file in query order, so an interrupted run can resume.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{LanguageModel, TemplateSet};
use crate::error::Error;
use crate::query::Query;
use crate::record::{append_records, SearchRecord, TokenLedger};
use crate::search::{config_hash, search, SearchConfig, SearchError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOptions {
    /// Worker threads; results do not depend on it.
    pub workers: usize,
    /// Queries searched between two writes.
    pub batch_size: usize,
    /// Keep existing records and skip their queries.
    pub resume: bool,
}

impl Default for BatchOptions {
    fn default() -> Self {
        Self {
            workers: 4,
            batch_size: 16,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub queries: usize,
    pub completed: usize,
    pub incomplete: usize,
    pub skipped: usize,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: SearchConfig,
    pub config_hash: String,
    pub seed: u64,
    pub task: String,
    pub template_hashes: std::collections::BTreeMap<String, String>,
    pub backend: serde_json::Value,
    pub counts: RunCounts,
    pub wall_clock_secs: f64,
    pub ledger: TokenLedger,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Stable id from the config hash and the query ids.
pub fn run_id(config: &SearchConfig, templates: &TemplateSet, queries: &[Query]) -> String {
    let mut h = Sha256::new();
    h.update(config_hash(config, templates).as_bytes());
    for q in queries {
        h.update(q.query_id.as_bytes());
        h.update([0]);
    }
    format!("run-{}", hex::encode(&h.finalize()[..6]))
}

/// Search every query with a pool of `workers` threads. Output order follows
/// the input. Backend failures yield incomplete records; config errors abort.
pub fn search_all(
    queries: &[Query],
    config: &SearchConfig,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
    workers: usize,
) -> Result<Vec<SearchRecord>, Error> {
    let pool = thread_pool(workers)?;
    pool.install(|| {
        queries
            .par_iter()
            .map(|q| match search(q, config, lm, templates) {
                Ok(r) => Ok(r),
                Err(SearchError::Failed { source, partial }) => {
                    log::error!("{}: {source}", q.query_id);
                    Ok(*partial)
                }
                Err(SearchError::Config(e)) => Err(e),
            })
            .collect()
    })
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

/// Ids already present in a record file. A trailing partial line (from a
/// crash mid-write) is cut off.
fn existing_ids(path: &Path) -> Result<HashSet<String>, Error> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(HashSet::new());
    };
    let mut ids = HashSet::new();
    let mut good = 0usize;
    for line in text.split_inclusive('\n') {
        if !line.ends_with('\n') {
            break;
        }
        if line.trim().is_empty() {
            good += line.len();
            continue;
        }
        match SearchRecord::from_json_line(line.trim_end()) {
            Ok(r) => {
                ids.insert(r.query_id);
                good += line.len();
            }
            Err(e) => {
                log::warn!("{}: dropping unreadable tail: {e}", path.display());
                break;
            }
        }
    }
    if good < text.len() {
        let file = std::fs::OpenOptions::new()
            .write(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.set_len(good as u64).map_err(|e| Error::io(path, e))?;
    }
    Ok(ids)
}

/// Run a batch into `records_path`, returning the manifest.
pub fn run_batch(
    queries: &[Query],
    config: &SearchConfig,
    lm: &dyn LanguageModel,
    templates: &TemplateSet,
    records_path: &Path,
    options: &BatchOptions,
) -> Result<RunManifest, Error> {
    config.validate()?;
    let started = Instant::now();
    let done = if options.resume {
        existing_ids(records_path)?
    } else {
        std::fs::write(records_path, "").map_err(|e| Error::io(records_path, e))?;
        HashSet::new()
    };
    let todo: Vec<Query> = queries
        .iter()
        .filter(|q| !done.contains(&q.query_id))
        .cloned()
        .collect();
    let mut counts = RunCounts {
        queries: queries.len(),
        skipped: queries.len() - todo.len(),
        ..RunCounts::default()
    };
    let mut ledger = TokenLedger::default();
    for chunk in todo.chunks(options.batch_size.max(1)) {
        let records = search_all(chunk, config, lm, templates, options.workers)?;
        append_records(records_path, &records)?;
        for r in &records {
            ledger.add(&r.ledger);
            if r.incomplete {
                counts.incomplete += 1;
            } else {
                counts.completed += 1;
            }
        }
        log::info!(
            "{} / {} queries done",
            counts.completed + counts.incomplete + counts.skipped,
            counts.queries
        );
    }
    Ok(RunManifest {
        run_id: run_id(config, templates, queries),
        config: config.clone(),
        config_hash: config_hash(config, templates),
        seed: config.seed,
        task: templates.task.clone(),
        template_hashes: templates.hashes(),
        backend: lm.describe(),
        counts,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        ledger,
    })
}
