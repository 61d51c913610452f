//! Prompt templates with `{placeholder}` substitution.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Write,
    SafeWrite,
    Rewrite,
    Eval,
    Splitter,
}

impl TemplateId {
    pub const ALL: [TemplateId; 5] = [
        TemplateId::Write,
        TemplateId::SafeWrite,
        TemplateId::Rewrite,
        TemplateId::Eval,
        TemplateId::Splitter,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TemplateId::Write => "write",
            TemplateId::SafeWrite => "safe_write",
            TemplateId::Rewrite => "rewrite",
            TemplateId::Eval => "eval",
            TemplateId::Splitter => "splitter",
        }
    }

    pub fn required_variables(&self) -> &'static [&'static str] {
        match self {
            TemplateId::Write | TemplateId::SafeWrite => &["entity"],
            TemplateId::Rewrite => &["entity", "facts"],
            TemplateId::Eval => &["entity", "sources", "claim"],
            TemplateId::Splitter => &["entity", "sentence"],
        }
    }

    /// Whether completions for this template are answers to the user query.
    pub fn is_generation(&self) -> bool {
        matches!(
            self,
            TemplateId::Write | TemplateId::SafeWrite | TemplateId::Rewrite
        )
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TemplateId {
    type Err = RenderError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| RenderError::UnknownTemplate(s.to_string()))
    }
}

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("template `{template}` is missing variable `{name}`")]
    MissingVariable { template: TemplateId, name: String },
    #[error("template `{template}` has an unterminated placeholder")]
    Unterminated { template: TemplateId },
    #[error("unknown template id `{0}`")]
    UnknownTemplate(String),
    #[error("unknown task `{0}`; provide a template directory")]
    UnknownTask(String),
    #[error("reading template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A fully rendered prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub template_id: TemplateId,
    pub rendered_text: String,
    pub variables: BTreeMap<String, String>,
}

impl Prompt {
    pub fn variable(&self, name: &str) -> Option<&str> {
        self.variables.get(name).map(String::as_str)
    }

    /// Facts of a rewrite prompt, one per bullet line.
    pub fn facts(&self) -> Vec<&str> {
        self.variable("facts")
            .map(|f| {
                f.lines()
                    .filter_map(|l| l.strip_prefix("- "))
                    .filter(|l| !l.trim().is_empty())
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Source sentences of an eval prompt.
    pub fn sources(&self) -> Vec<&str> {
        self.variable("sources")
            .map(|s| s.lines().filter(|l| !l.trim().is_empty()).collect())
            .unwrap_or_default()
    }
}

/// Render a facts list as one bulleted line per claim, in the given order.
pub fn format_facts<S: AsRef<str>>(facts: &[S]) -> String {
    facts
        .iter()
        .map(|f| format!("- {}", f.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

fn substitute(
    id: TemplateId,
    template: &str,
    vars: &BTreeMap<String, String>,
) -> Result<String, RenderError> {
    let mut out = String::with_capacity(template.len() + 64);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after
            .find('}')
            .ok_or(RenderError::Unterminated { template: id })?;
        let name = &after[..close];
        let is_ident =
            !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
        if is_ident {
            let value = vars.get(name).ok_or_else(|| RenderError::MissingVariable {
                template: id,
                name: name.to_string(),
            })?;
            out.push_str(value);
        } else {
            // Not a placeholder, keep the brace literally.
            out.push('{');
            out.push_str(name);
            out.push('}');
        }
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

const BIOGRAPHY: [(TemplateId, &str); 5] = [
    (
        TemplateId::Write,
        include_str!("../../templates/biography/write.txt"),
    ),
    (
        TemplateId::SafeWrite,
        include_str!("../../templates/biography/safe_write.txt"),
    ),
    (
        TemplateId::Rewrite,
        include_str!("../../templates/biography/rewrite.txt"),
    ),
    (
        TemplateId::Eval,
        include_str!("../../templates/biography/eval.txt"),
    ),
    (
        TemplateId::Splitter,
        include_str!("../../templates/biography/splitter.txt"),
    ),
];

const BIOGRAPHY_PRELUDES: [(TemplateId, &str); 2] = [
    (
        TemplateId::Eval,
        include_str!("../../templates/biography/eval.prelude.txt"),
    ),
    (
        TemplateId::Splitter,
        include_str!("../../templates/biography/splitter.prelude.txt"),
    ),
];

const HISTORY: [(TemplateId, &str); 5] = [
    (
        TemplateId::Write,
        include_str!("../../templates/history/write.txt"),
    ),
    (
        TemplateId::SafeWrite,
        include_str!("../../templates/history/safe_write.txt"),
    ),
    (
        TemplateId::Rewrite,
        include_str!("../../templates/history/rewrite.txt"),
    ),
    (
        TemplateId::Eval,
        include_str!("../../templates/history/eval.txt"),
    ),
    (
        TemplateId::Splitter,
        include_str!("../../templates/history/splitter.txt"),
    ),
];

const HISTORY_PRELUDES: [(TemplateId, &str); 2] = [
    (
        TemplateId::Eval,
        include_str!("../../templates/history/eval.prelude.txt"),
    ),
    (
        TemplateId::Splitter,
        include_str!("../../templates/history/splitter.prelude.txt"),
    ),
];

/// The five prompt templates of one task, plus optional few-shot preludes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateSet {
    pub task: String,
    templates: BTreeMap<TemplateId, String>,
    preludes: BTreeMap<TemplateId, String>,
}

impl TemplateSet {
    pub fn biography() -> Self {
        Self::from_tables("biography", &BIOGRAPHY, &BIOGRAPHY_PRELUDES)
    }

    pub fn history() -> Self {
        Self::from_tables("history", &HISTORY, &HISTORY_PRELUDES)
    }

    fn from_tables(
        task: &str,
        bodies: &[(TemplateId, &str)],
        preludes: &[(TemplateId, &str)],
    ) -> Self {
        Self {
            task: task.to_string(),
            templates: bodies
                .iter()
                .map(|(id, t)| (*id, t.trim_end().to_string()))
                .collect(),
            preludes: preludes
                .iter()
                .map(|(id, t)| (*id, t.trim_end().to_string()))
                .collect(),
        }
    }

    /// Built-in templates for a known task name.
    pub fn builtin(task: &str) -> Result<Self, RenderError> {
        match task {
            "biography" | "bio" => Ok(Self::biography()),
            "history" => Ok(Self::history()),
            other => Err(RenderError::UnknownTask(other.to_string())),
        }
    }

    /// Load `<id>.txt` and `<id>.prelude.txt` files from `dir`, falling back to
    /// the built-in set for `task` (or biography) for anything missing.
    pub fn load_dir(task: &str, dir: &Path) -> Result<Self, RenderError> {
        let mut set = Self::builtin(task).unwrap_or_else(|_| Self::biography());
        set.task = task.to_string();
        for id in TemplateId::ALL {
            let body = dir.join(format!("{id}.txt"));
            if body.exists() {
                set.templates
                    .insert(id, read(&body)?.trim_end().to_string());
            }
            let prelude = dir.join(format!("{id}.prelude.txt"));
            if prelude.exists() {
                set.preludes
                    .insert(id, read(&prelude)?.trim_end().to_string());
            }
        }
        Ok(set)
    }

    pub fn without_preludes(mut self) -> Self {
        self.preludes.clear();
        self
    }

    pub fn set_template(&mut self, id: TemplateId, body: impl Into<String>) {
        self.templates.insert(id, body.into());
    }

    pub fn template(&self, id: TemplateId) -> &str {
        &self.templates[&id]
    }

    /// Hex SHA-256 of each template (prelude included) for run manifests.
    pub fn hashes(&self) -> BTreeMap<String, String> {
        TemplateId::ALL
            .iter()
            .map(|id| {
                let mut h = Sha256::new();
                if let Some(p) = self.preludes.get(id) {
                    h.update(p.as_bytes());
                    h.update(b"\n\n");
                }
                h.update(self.templates[id].as_bytes());
                (id.to_string(), hex::encode(h.finalize()))
            })
            .collect()
    }

    pub fn render(
        &self,
        id: TemplateId,
        variables: BTreeMap<String, String>,
    ) -> Result<Prompt, RenderError> {
        for name in id.required_variables() {
            if !variables.contains_key(*name) {
                return Err(RenderError::MissingVariable {
                    template: id,
                    name: name.to_string(),
                });
            }
        }
        let body = substitute(id, &self.templates[&id], &variables)?;
        let rendered_text = match self.preludes.get(&id) {
            Some(prelude) => format!("{}\n\n{}", substitute(id, prelude, &variables)?, body),
            None => body,
        };
        Ok(Prompt {
            template_id: id,
            rendered_text,
            variables,
        })
    }

    pub fn write(&self, entity: &str) -> Result<Prompt, RenderError> {
        self.render(TemplateId::Write, vars(&[("entity", entity)]))
    }

    pub fn safe_write(&self, entity: &str) -> Result<Prompt, RenderError> {
        self.render(TemplateId::SafeWrite, vars(&[("entity", entity)]))
    }

    /// Rewrite prompt with the facts in the given order. An empty list falls
    /// back to the plain write prompt.
    pub fn rewrite<S: AsRef<str>>(&self, entity: &str, facts: &[S]) -> Result<Prompt, RenderError> {
        if facts.is_empty() {
            return self.write(entity);
        }
        let facts = format_facts(facts);
        self.render(
            TemplateId::Rewrite,
            vars(&[("entity", entity), ("facts", &facts)]),
        )
    }

    pub fn eval<S: AsRef<str>>(
        &self,
        entity: &str,
        sources: &[S],
        claim: &str,
    ) -> Result<Prompt, RenderError> {
        let sources = sources
            .iter()
            .map(|s| s.as_ref())
            .collect::<Vec<_>>()
            .join("\n");
        self.render(
            TemplateId::Eval,
            vars(&[("entity", entity), ("sources", &sources), ("claim", claim)]),
        )
    }

    pub fn splitter(&self, entity: &str, sentence: &str) -> Result<Prompt, RenderError> {
        self.render(
            TemplateId::Splitter,
            vars(&[("entity", entity), ("sentence", sentence)]),
        )
    }
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::biography()
    }
}

fn read(path: &Path) -> Result<String, RenderError> {
    std::fs::read_to_string(path).map_err(|source| RenderError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn vars(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}
