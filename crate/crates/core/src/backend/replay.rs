use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{
    whitespace_tokens, BackendError, Completion, LanguageModel, Prompt, SamplingParams, TemplateId,
};

/// Responses selected by the value of one prompt variable (e.g. `claim`).
/// Each key's list is consumed in order; the last entry repeats once the list
/// is exhausted.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KeyedResponses {
    pub variable: String,
    pub responses: BTreeMap<String, Vec<String>>,
}

/// Declarative script for [`ReplayBackend`]. Lookup order for each sample:
/// `exact` rendered prompt, `keyed` variable value, programmatic responders,
/// per-template `queues`, then `defaults`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayScript {
    /// Rendered prompt text to responses; sample `i` gets entry `i % len`.
    pub exact: BTreeMap<String, Vec<String>>,
    pub keyed: BTreeMap<TemplateId, KeyedResponses>,
    /// FIFO queues. Consumption order follows call order, so prefer `exact` or
    /// `keyed` entries when calls may run concurrently.
    pub queues: BTreeMap<TemplateId, Vec<String>>,
    pub defaults: BTreeMap<TemplateId, String>,
}

impl ReplayScript {
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Malformed(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Malformed(format!("{}: {e}", path.display())))
    }
}

type Responder = Arc<dyn Fn(&Prompt, u32) -> Option<String> + Send + Sync>;

/// A recorded backend call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayCall {
    pub template_id: TemplateId,
    pub prompt: String,
    pub responses: Vec<String>,
}

/// Scripted backend for tests and transcript replays.
pub struct ReplayBackend {
    id: String,
    script: ReplayScript,
    responders: Vec<(TemplateId, Responder)>,
    keyed_cursor: Mutex<HashMap<(TemplateId, String), usize>>,
    queues: Mutex<BTreeMap<TemplateId, VecDeque<String>>>,
    transcript: Mutex<Vec<ReplayCall>>,
}

impl ReplayBackend {
    pub fn new(script: ReplayScript) -> Self {
        let queues = script
            .queues
            .iter()
            .map(|(k, v)| (*k, v.iter().cloned().collect()))
            .collect();
        Self {
            id: "replay".to_string(),
            script,
            responders: Vec::new(),
            keyed_cursor: Mutex::new(HashMap::new()),
            queues: Mutex::new(queues),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn empty() -> Self {
        Self::new(ReplayScript::default())
    }

    pub fn with_queue<I, S>(mut self, template: TemplateId, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let items: Vec<String> = responses.into_iter().map(Into::into).collect();
        self.queues
            .get_mut()
            .unwrap()
            .entry(template)
            .or_default()
            .extend(items.iter().cloned());
        self.script
            .queues
            .entry(template)
            .or_default()
            .extend(items);
        self
    }

    pub fn with_default(mut self, template: TemplateId, response: impl Into<String>) -> Self {
        self.script.defaults.insert(template, response.into());
        self
    }

    pub fn with_exact<I, S>(mut self, prompt: impl Into<String>, responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.script.exact.insert(
            prompt.into(),
            responses.into_iter().map(Into::into).collect(),
        );
        self
    }

    /// Respond to `template` prompts by the value of `variable`.
    pub fn with_keyed<I, S>(
        mut self,
        template: TemplateId,
        variable: &str,
        key: impl Into<String>,
        responses: I,
    ) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entry = self
            .script
            .keyed
            .entry(template)
            .or_insert_with(|| KeyedResponses {
                variable: variable.to_string(),
                responses: BTreeMap::new(),
            });
        entry.variable = variable.to_string();
        entry
            .responses
            .insert(key.into(), responses.into_iter().map(Into::into).collect());
        self
    }

    pub fn with_responder<F>(mut self, template: TemplateId, f: F) -> Self
    where
        F: Fn(&Prompt, u32) -> Option<String> + Send + Sync + 'static,
    {
        self.responders.push((template, Arc::new(f)));
        self
    }

    pub fn script(&self) -> &ReplayScript {
        &self.script
    }

    /// Number of `generate` calls made for a template.
    pub fn calls(&self, template: TemplateId) -> usize {
        self.transcript
            .lock()
            .unwrap()
            .iter()
            .filter(|c| c.template_id == template)
            .count()
    }

    pub fn transcript(&self) -> Vec<ReplayCall> {
        self.transcript.lock().unwrap().clone()
    }

    fn respond(&self, prompt: &Prompt, sample: u32) -> Option<String> {
        let id = prompt.template_id;
        if let Some(list) = self.script.exact.get(&prompt.rendered_text) {
            if !list.is_empty() {
                return Some(list[sample as usize % list.len()].clone());
            }
        }
        if let Some(keyed) = self.script.keyed.get(&id) {
            if let Some(value) = prompt.variable(&keyed.variable) {
                if let Some(list) = keyed.responses.get(value).filter(|l| !l.is_empty()) {
                    let mut cursors = self.keyed_cursor.lock().unwrap();
                    let cursor = cursors.entry((id, value.to_string())).or_insert(0);
                    let response = list[(*cursor).min(list.len() - 1)].clone();
                    *cursor += 1;
                    return Some(response);
                }
            }
        }
        for (template, responder) in &self.responders {
            if *template == id {
                if let Some(r) = responder(prompt, sample) {
                    return Some(r);
                }
            }
        }
        if let Some(queue) = self.queues.lock().unwrap().get_mut(&id) {
            if let Some(r) = queue.pop_front() {
                return Some(r);
            }
        }
        self.script.defaults.get(&id).cloned()
    }
}

impl LanguageModel for ReplayBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(
        &self,
        prompt: &Prompt,
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, BackendError> {
        params.validate()?;
        let prompt_tokens = whitespace_tokens(&prompt.rendered_text);
        let mut out = Vec::with_capacity(params.n as usize);
        for sample in 0..params.n {
            let text =
                self.respond(prompt, sample)
                    .ok_or_else(|| BackendError::ScriptExhausted {
                        template: prompt.template_id,
                        prompt: prompt.rendered_text.chars().take(120).collect(),
                    })?;
            let tokens = whitespace_tokens(&text);
            out.push(Completion::new(
                text,
                prompt_tokens,
                tokens,
                &self.id,
                sample,
            ));
        }
        self.transcript.lock().unwrap().push(ReplayCall {
            template_id: prompt.template_id,
            prompt: prompt.rendered_text.clone(),
            responses: out.iter().map(|c| c.text.clone()).collect(),
        });
        Ok(out)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "id": self.id, "script": self.script })
    }
}
