use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Popularity tier of an entity; `Invented` entities do not exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Bottom,
    Middle,
    Top,
    Invented,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::Bottom, Tier::Middle, Tier::Top, Tier::Invented];

    pub fn as_str(&self) -> &'static str {
        match self {
            Tier::Bottom => "bottom",
            Tier::Middle => "middle",
            Tier::Top => "top",
            Tier::Invented => "invented",
        }
    }
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Tier::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown tier `{s}`")))
    }
}

/// One line of a query file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub query_id: String,
    pub entity: String,
    pub task: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
}

impl Query {
    pub fn new(
        query_id: impl Into<String>,
        entity: impl Into<String>,
        task: impl Into<String>,
    ) -> Self {
        Self {
            query_id: query_id.into(),
            entity: entity.into(),
            task: task.into(),
            tier: None,
        }
    }

    pub fn with_tier(mut self, tier: Tier) -> Self {
        self.tier = Some(tier);
        self
    }
}

pub fn read_queries(path: &Path) -> Result<Vec<Query>, Error> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line)
            .map_err(|e| Error::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(q);
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<(), Error> {
    let mut text = String::new();
    for q in queries {
        text.push_str(&serde_json::to_string(q)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
