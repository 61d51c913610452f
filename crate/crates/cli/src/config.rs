use std::path::Path;

use anyhow::{bail, Context};
use serde::Deserialize;

use restraint_core::sim::{SimConfig, WorldSpec};
use restraint_core::{HttpConfig, SearchConfig};

/// Config file contents: the search config at top level plus optional
/// backend sections.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default)]
pub struct FileConfig {
    #[serde(flatten)]
    pub search: SearchConfig,
    pub http: HttpConfig,
    pub sim: SimConfig,
    pub world: Option<WorldSpec>,
}

pub fn load(path: &Path) -> anyhow::Result<FileConfig> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let cfg = match ext {
        "toml" => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        "json" => {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        other => bail!("config must be .json or .toml, got `.{other}`"),
    };
    Ok(cfg)
}
