//! Training artifacts built from search records: SFT targets, DPO pairs and
//! RLOO advantages.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::backend::TemplateSet;
use crate::error::Error;
use crate::record::{ScoredGeneration, SearchRecord};
use crate::search::{select_best, SearchConfig};
use crate::utility::rank_pool;

pub const DEFAULT_ABSTENTION: &str = "I am sorry, I am unable to provide {task_phrase}.";

/// How records are turned into prompt/completion text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmitOptions {
    /// Abstention text; `{task_phrase}` is replaced per query.
    pub abstention_template: String,
    /// Use the safe write prompt instead of the plain one.
    pub safe_prompt: bool,
}

impl Default for EmitOptions {
    fn default() -> Self {
        Self {
            abstention_template: DEFAULT_ABSTENTION.to_string(),
            safe_prompt: false,
        }
    }
}

/// "a biography of X", "a short history of X".
pub fn task_phrase(task: &str, entity: &str) -> String {
    match task {
        "biography" => format!("a biography of {entity}"),
        "history" => format!("a short history of {entity}"),
        other => format!("a {other} of {entity}"),
    }
}

impl EmitOptions {
    pub fn abstention_text(&self, task: &str, entity: &str) -> String {
        self.abstention_template
            .replace("{task_phrase}", &task_phrase(task, entity))
    }

    fn prompt(&self, record: &SearchRecord, templates: &TemplateSet) -> Result<String, Error> {
        let p = if self.safe_prompt {
            templates.safe_write(&record.entity)?
        } else {
            templates.write(&record.entity)?
        };
        Ok(p.rendered_text)
    }

    fn text(&self, record: &SearchRecord, g: &ScoredGeneration) -> String {
        if g.is_abstention {
            self.abstention_text(&record.task, &record.entity)
        } else {
            g.text.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub completion: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_utility: f64,
    pub rejected_utility: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlooExample {
    pub prompt: String,
    pub completion: String,
    pub raw_utility: f64,
    pub advantage: f64,
}

fn complete(record: &SearchRecord) -> bool {
    if record.incomplete {
        log::warn!("skipping incomplete record {}", record.query_id);
    }
    !record.incomplete
}

/// Best answer of the search, or the abstention text. `None` for an
/// incomplete record.
pub fn emit_sft(
    record: &SearchRecord,
    config: &SearchConfig,
    templates: &TemplateSet,
    options: &EmitOptions,
) -> Result<Option<SftExample>, Error> {
    if !complete(record) {
        return Ok(None);
    }
    let best = select_best(record, config);
    Ok(Some(SftExample {
        prompt: options.prompt(record, templates)?,
        completion: options.text(record, best),
    }))
}

/// Two best × two worst pool members, keeping only strictly ordered pairs.
/// Pools under four members yield every strictly ordered pair.
pub fn emit_dpo_pairs(
    record: &SearchRecord,
    templates: &TemplateSet,
    options: &EmitOptions,
) -> Result<Vec<PreferencePair>, Error> {
    if !complete(record) {
        return Ok(Vec::new());
    }
    let ranked = rank_pool(&record.pool)?;
    let n = ranked.len();
    let candidates: Vec<(usize, usize)> = if n >= 4 {
        (0..2)
            .flat_map(|i| (n - 2..n).map(move |j| (i, j)))
            .collect()
    } else {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect()
    };
    let prompt = options.prompt(record, templates)?;
    let pairs: Vec<PreferencePair> = candidates
        .into_iter()
        .filter(|&(i, j)| ranked[i].expected.value > ranked[j].expected.value)
        .map(|(i, j)| PreferencePair {
            prompt: prompt.clone(),
            chosen: options.text(record, ranked[i]),
            rejected: options.text(record, ranked[j]),
            chosen_utility: ranked[i].expected.value,
            rejected_utility: ranked[j].expected.value,
        })
        .collect();
    if pairs.is_empty() {
        log::warn!("{}: no strictly ordered pairs", record.query_id);
    }
    Ok(pairs)
}

/// Group-normalized advantages: `(u - mean) / sample_std`, or zeros when
/// the group is constant or has a single member.
pub fn advantages(utilities: &[f64]) -> Vec<f64> {
    let n = utilities.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let mean = utilities.iter().sum::<f64>() / n as f64;
    let var = utilities.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; n];
    }
    utilities.iter().map(|u| (u - mean) / std).collect()
}

/// One example per pool member, abstention included, in pool order.
pub fn emit_rloo(
    record: &SearchRecord,
    templates: &TemplateSet,
    options: &EmitOptions,
) -> Result<Vec<RlooExample>, Error> {
    if !complete(record) {
        return Ok(Vec::new());
    }
    let prompt = options.prompt(record, templates)?;
    let utilities: Vec<f64> = record.pool.iter().map(|g| g.expected.value).collect();
    Ok(record
        .pool
        .iter()
        .zip(advantages(&utilities))
        .map(|(g, advantage)| RlooExample {
            prompt: prompt.clone(),
            completion: options.text(record, g),
            raw_utility: g.expected.value,
            advantage,
        })
        .collect())
}

/// Sidecar describing an emitted file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmitManifest {
    pub kind: String,
    pub records: usize,
    pub skipped: usize,
    pub examples: usize,
    pub prompt_template: String,
    /// RLOO advantages are centered on the group mean before scaling.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_centered: Option<bool>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), Error> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
