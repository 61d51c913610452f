use std::collections::BTreeSet;
use std::sync::Arc;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::world::{Attribute, Entity, SimWorld};
use crate::backend::{
    whitespace_tokens, BackendError, Completion, LanguageModel, Prompt, SamplingParams, TemplateId,
};
use crate::claims::normalize_claim;
use crate::derive_seed;
use crate::seed::rng_from;

/// What the simulated model says under the safe prompt when it gives up.
pub const REFUSAL: &str = "I do not know enough to answer that.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Half-width of the uniform integer noise added to eval scores.
    pub eval_noise: u8,
    pub min_sentences: usize,
    pub max_sentences: usize,
    /// Added to the recall probability for attributes not listed in a rewrite.
    pub rewrite_boost: f64,
    /// At most this many listed facts are copied into a rewrite.
    pub max_rewrite_facts: usize,
    /// Entities with knowledge below this refuse the safe prompt.
    pub safe_refusal_below: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            eval_noise: 5,
            min_sentences: 2,
            max_sentences: 4,
            rewrite_boost: 0.15,
            max_rewrite_facts: 4,
            safe_refusal_below: 0.25,
        }
    }
}

impl SimConfig {
    pub fn noiseless() -> Self {
        Self {
            eval_noise: 0,
            ..Self::default()
        }
    }
}

/// Backend answering every template from a [`SimWorld`].
#[derive(Debug, Clone)]
pub struct SimBackend {
    world: Arc<SimWorld>,
    config: SimConfig,
    id: String,
}

impl SimBackend {
    pub fn new(world: Arc<SimWorld>, config: SimConfig) -> Self {
        let id = format!("sim-{}", world.spec.seed);
        Self { world, config, id }
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    fn entity(&self, prompt: &Prompt) -> Result<Option<&Entity>, BackendError> {
        let name = prompt
            .variable("entity")
            .ok_or_else(|| BackendError::Unsupported("prompt has no entity".into()))?;
        Ok(self.world.entity(name))
    }

    /// One generated text for `entity`.
    fn sim_generate(&self, entity: Option<&Entity>, prompt: &Prompt, seed: u64) -> String {
        let mut rng = rng_from(seed);
        let Some(entity) = entity else {
            return format!(
                "{} is not someone I can say much about.",
                prompt.variable("entity").unwrap_or("That")
            );
        };
        if prompt.template_id == TemplateId::SafeWrite
            && entity.knowledge < self.config.safe_refusal_below
        {
            return REFUSAL.to_string();
        }
        let lo = self.config.min_sentences.max(1);
        let hi = self.config.max_sentences.max(lo);
        let target = rng.random_range(lo..=hi);

        let mut sentences = Vec::new();
        let mut covered = BTreeSet::new();
        let mut knowledge = entity.knowledge;
        if prompt.template_id == TemplateId::Rewrite {
            for fact in prompt
                .facts()
                .into_iter()
                .take(self.config.max_rewrite_facts)
            {
                if let Some(info) = self.world.statement(fact) {
                    if !covered.insert(info.attribute) {
                        continue;
                    }
                }
                sentences.push(fact.trim().to_string());
            }
            knowledge = (knowledge + self.config.rewrite_boost).min(1.0);
        }
        let mut free: Vec<Attribute> = entity
            .attributes()
            .into_iter()
            .filter(|a| !covered.contains(a))
            .collect();
        free.shuffle(&mut rng);
        for attribute in free {
            if sentences.len() >= target.max(covered.len()) {
                break;
            }
            let recall = rng.random_bool(knowledge.clamp(0.0, 1.0));
            let fact = match entity.true_fact(attribute) {
                Some(t) if recall => t,
                _ => {
                    let wrong: Vec<_> = entity.distractors(attribute).collect();
                    match wrong.choose(&mut rng) {
                        Some(f) => *f,
                        None => continue,
                    }
                }
            };
            sentences.push(fact.statement.clone());
        }
        sentences.join(" ")
    }

    /// Verbalized agreement of the sources with the claim.
    ///
    /// Only sources about the same entity and attribute count: the score is
    /// the share of those that state the claim, plus seeded noise.
    fn sim_eval(&self, prompt: &Prompt, seed: u64) -> Result<u8, BackendError> {
        let claim = prompt
            .variable("claim")
            .ok_or_else(|| BackendError::Unsupported("eval prompt has no claim".into()))?;
        let entity = self
            .world
            .entity_index(prompt.variable("entity").unwrap_or_default());
        let key = normalize_claim(claim);
        let base = match (entity, self.world.statement(claim)) {
            (Some(e), Some(info)) if info.entity == e => {
                let mut relevant = 0usize;
                let mut agree = 0usize;
                for source in prompt.sources() {
                    if let Some(s) = self.world.statement(source) {
                        if s.entity == e && s.attribute == info.attribute {
                            relevant += 1;
                            if normalize_claim(source) == key {
                                agree += 1;
                            }
                        }
                    }
                }
                if relevant == 0 {
                    0
                } else {
                    (100.0 * agree as f64 / relevant as f64).round() as i32
                }
            }
            _ => 0,
        };
        let noise = i32::from(self.config.eval_noise);
        let jitter = if noise > 0 {
            rng_from(seed).random_range(-noise..=noise)
        } else {
            0
        };
        Ok((base + jitter).clamp(0, 100) as u8)
    }
}

impl LanguageModel for SimBackend {
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
        let call_seed = derive_seed!(
            params.seed.unwrap_or(0),
            "sim",
            prompt.rendered_text.as_str()
        );
        let mut out = Vec::with_capacity(params.n as usize);
        for i in 0..params.n {
            let seed = derive_seed!(call_seed, i);
            let text = match prompt.template_id {
                TemplateId::Write | TemplateId::SafeWrite | TemplateId::Rewrite => {
                    let entity = self.entity(prompt)?;
                    self.sim_generate(entity, prompt, seed)
                }
                TemplateId::Eval => self.sim_eval(prompt, seed)?.to_string(),
                TemplateId::Splitter => {
                    format!(
                        "- {}",
                        prompt.variable("sentence").unwrap_or_default().trim()
                    )
                }
            };
            let completion_tokens = whitespace_tokens(&text);
            let charged = if i == 0 { prompt_tokens } else { 0 };
            out.push(Completion::new(
                text,
                charged,
                completion_tokens,
                &self.id,
                i,
            ));
        }
        Ok(out)
    }

    fn sentences_are_atomic(&self) -> bool {
        true
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "world": self.world.spec,
            "config": self.config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::TemplateSet;
    use crate::claims::{split_sentence_texts, SampleRef};
    use crate::query::Tier;
    use crate::sim::{make_world, oracle_truth, WorldSpec};

    fn backend(noise: bool) -> SimBackend {
        let world = make_world(&WorldSpec {
            seed: 11,
            ..WorldSpec::default()
        })
        .unwrap();
        let cfg = if noise {
            SimConfig::default()
        } else {
            SimConfig::noiseless()
        };
        SimBackend::new(Arc::new(world), cfg)
    }

    fn first(sim: &SimBackend, tier: Tier) -> Entity {
        sim.world()
            .entities
            .iter()
            .find(|e| e.tier == tier)
            .unwrap()
            .clone()
    }

    #[test]
    fn generation_is_seeded_and_splits_cleanly() {
        let sim = backend(true);
        let t = TemplateSet::biography();
        let e = first(&sim, Tier::Middle);
        let p = t.write(&e.name).unwrap();
        let params = SamplingParams::default().with_n(6).with_seed(9);
        let a = sim.generate(&p, &params).unwrap();
        let b = sim.generate(&p, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for c in &a {
            let sentences = split_sentence_texts(&c.text);
            assert!((2..=4).contains(&sentences.len()), "{:?}", c.text);
            for s in sentences {
                assert!(sim.world().statement(&s).is_some(), "{s}");
            }
        }
        assert!(a[0].prompt_tokens > 0 && a[1].prompt_tokens == 0);
        let _ = SampleRef {
            iteration: 0,
            sample_index: 0,
        };
    }

    #[test]
    fn recall_tracks_knowledge() {
        let sim = backend(true);
        let t = TemplateSet::biography();
        let rate = |e: &Entity| {
            let p = t.write(&e.name).unwrap();
            let out = sim
                .generate(&p, &SamplingParams::default().with_n(200).with_seed(1))
                .unwrap();
            let (mut tr, mut all) = (0, 0);
            for c in out {
                for s in split_sentence_texts(&c.text) {
                    all += 1;
                    if oracle_truth(sim.world(), &e.name, &s).unwrap() {
                        tr += 1;
                    }
                }
            }
            tr as f64 / all as f64
        };
        let e = first(&sim, Tier::Top);
        assert!((rate(&e) - e.knowledge).abs() < 0.08);
        assert_eq!(rate(&first(&sim, Tier::Invented)), 0.0);
    }

    #[test]
    fn rewrite_copies_listed_facts() {
        let sim = backend(true);
        let t = TemplateSet::biography();
        let e = first(&sim, Tier::Bottom);
        let facts: Vec<String> = e.attributes()[..2]
            .iter()
            .map(|a| e.true_fact(*a).unwrap().statement.clone())
            .collect();
        let p = t.rewrite(&e.name, &facts).unwrap();
        for c in sim
            .generate(&p, &SamplingParams::default().with_n(5).with_seed(2))
            .unwrap()
        {
            assert!(
                c.text.starts_with(&format!("{} {}", facts[0], facts[1])),
                "{}",
                c.text
            );
        }
    }

    #[test]
    fn eval_scores_relevant_agreement() {
        let sim = backend(false);
        let t = TemplateSet::biography();
        let e = first(&sim, Tier::Top);
        let a = e.attributes()[0];
        let b = e.attributes()[1];
        let truth = e.true_fact(a).unwrap().statement.clone();
        let wrong = e.distractors(a).next().unwrap().statement.clone();
        let other = e.true_fact(b).unwrap().statement.clone();
        let sources = vec![truth.clone(), truth.clone(), wrong.clone(), other.clone()];
        let score = |claim: &str, sources: &[String]| {
            let p = t.eval(&e.name, sources, claim).unwrap();
            sim.generate(&p, &SamplingParams::default().with_seed(3))
                .unwrap()[0]
                .text
                .clone()
        };
        assert_eq!(score(&truth, &sources), "67");
        assert_eq!(score(&wrong, &sources), "33");
        assert_eq!(score(&other, &sources), "100");
        assert_eq!(score(&other, &sources[..3]), "0");
        assert_eq!(score("Unrelated words.", &sources), "0");
    }

    #[test]
    fn eval_noise_is_bounded() {
        let sim = backend(true);
        let t = TemplateSet::biography();
        let e = first(&sim, Tier::Top);
        let a = e.attributes()[0];
        let truth = e.true_fact(a).unwrap().statement.clone();
        let wrong = e.distractors(a).next().unwrap().statement.clone();
        let sources = vec![truth.clone(), wrong];
        for seed in 0..50 {
            let p = t.eval(&e.name, &sources, &truth).unwrap();
            let s: i32 = sim
                .generate(&p, &SamplingParams::default().with_seed(seed))
                .unwrap()[0]
                .text
                .parse()
                .unwrap();
            assert!((45..=55).contains(&s));
        }
    }

    #[test]
    fn safe_prompt_refuses_when_ignorant() {
        let sim = backend(true);
        let t = TemplateSet::biography();
        let e = first(&sim, Tier::Invented);
        let out = sim
            .generate(&t.safe_write(&e.name).unwrap(), &SamplingParams::default())
            .unwrap();
        assert_eq!(out[0].text, REFUSAL);
    }
}
