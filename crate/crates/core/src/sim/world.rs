//! Seeded synthetic universe of entities and templated facts.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::claims::normalize_claim;
use crate::derive_seed;
use crate::error::Error;
use crate::query::{Query, Tier};
use crate::seed::rng_from;

/// Attributes an entity can have; each renders one sentence template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    BirthYear,
    Birthplace,
    Profession,
    School,
    Award,
    Citizenship,
    Spouse,
    Founded,
    Book,
    DeathYear,
    Field,
    Residence,
}

impl Attribute {
    pub const ALL: [Attribute; 12] = [
        Attribute::BirthYear,
        Attribute::Birthplace,
        Attribute::Profession,
        Attribute::School,
        Attribute::Award,
        Attribute::Citizenship,
        Attribute::Spouse,
        Attribute::Founded,
        Attribute::Book,
        Attribute::DeathYear,
        Attribute::Field,
        Attribute::Residence,
    ];

    fn sentence(&self, name: &str, value: &str) -> String {
        match self {
            Attribute::BirthYear => format!("{name} was born in {value}."),
            Attribute::Birthplace => format!("{name} was born in the city of {value}."),
            Attribute::Profession => format!("{name} worked as a {value}."),
            Attribute::School => format!("{name} studied at {value}."),
            Attribute::Award => format!("{name} received the {value}."),
            Attribute::Citizenship => format!("{name} was a citizen of {value}."),
            Attribute::Spouse => format!("{name} was married to {value}."),
            Attribute::Founded => format!("{name} founded {value}."),
            Attribute::Book => format!("{name} wrote the book {value}."),
            Attribute::DeathYear => format!("{name} died in {value}."),
            Attribute::Field => format!("{name} is known for work in {value}."),
            Attribute::Residence => format!("{name} lived for many years in {value}."),
        }
    }

    fn value<R: Rng>(&self, rng: &mut R) -> String {
        let pick = |rng: &mut R, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
        match self {
            Attribute::BirthYear => rng.random_range(1800..1960).to_string(),
            Attribute::DeathYear => rng.random_range(1870..2020).to_string(),
            Attribute::Birthplace | Attribute::Residence => place(rng),
            Attribute::Citizenship => format!(
                "{}{}",
                pick(rng, PLACE_HEADS),
                pick(rng, &["ia", "land", "ovia", "istan", "ara", "mark"])
            ),
            Attribute::Profession => {
                format!("{} {}", pick(rng, QUALIFIERS), pick(rng, PROFESSIONS))
            }
            Attribute::Field => format!(
                "{} {}",
                pick(rng, QUALIFIERS).to_lowercase(),
                pick(rng, FIELDS)
            ),
            Attribute::School => format!("the University of {}", place(rng)),
            Attribute::Award => format!(
                "{} {} Prize",
                pick(rng, SURNAMES),
                pick(rng, &["Memorial", "Gold", "Royal", "National", "Founders"])
            ),
            Attribute::Spouse => person_name(rng),
            Attribute::Founded => format!(
                "the {} {}",
                pick(rng, SURNAMES),
                pick(
                    rng,
                    &[
                        "Institute",
                        "Company",
                        "Society",
                        "Foundation",
                        "Laboratory",
                        "Review"
                    ]
                )
            ),
            Attribute::Book => format!("\"The {} {}\"", pick(rng, ADJECTIVES), pick(rng, NOUNS)),
        }
    }
}

const FIRST_NAMES: &[&str] = &[
    "Alora", "Bastien", "Corin", "Delphine", "Evander", "Fiora", "Gideon", "Halcy", "Isolde",
    "Jarek", "Kestrel", "Liora", "Maren", "Niall", "Odile", "Perrin", "Quillon", "Rosalind",
    "Soren", "Tamsin", "Ulric", "Vesna", "Wendel", "Xanthe", "Yorick", "Zelie", "Anselm", "Brisa",
    "Caspian", "Dagny",
];

const SURNAMES: &[&str] = &[
    "Ashgrove",
    "Brannock",
    "Castellane",
    "Dunmore",
    "Everleigh",
    "Fairholt",
    "Greywell",
    "Harrowgate",
    "Ingleby",
    "Jessamy",
    "Kettering",
    "Lindqvist",
    "Marchbanks",
    "Norcroft",
    "Oakenshaw",
    "Pemberly",
    "Quenneville",
    "Ravensworth",
    "Stavely",
    "Thornbury",
    "Underhill",
    "Vantongeren",
    "Whitlock",
    "Yarborough",
    "Zeller",
    "Albrecht",
    "Bellamy",
    "Cordray",
    "Drummond",
    "Estrada",
];

const PLACE_HEADS: &[&str] = &[
    "Alder", "Bram", "Cor", "Dun", "Elm", "Fen", "Gar", "Hol", "Ister", "Kel", "Lorn", "Mar",
    "Nor", "Ost", "Pell", "Rav", "Sel", "Tor", "Ulm", "Vel", "Wyn", "Zar",
];

const PLACE_TAILS: &[&str] = &[
    "bridge", "haven", "mouth", "ford", "holm", "stead", "wick", "borough", "gate", "field",
    "port", "dale", "moor", "ton",
];

const QUALIFIERS: &[&str] = &[
    "Civil",
    "Marine",
    "Theoretical",
    "Applied",
    "Industrial",
    "Naval",
    "Agricultural",
    "Structural",
    "Experimental",
    "Political",
    "Mechanical",
    "Botanical",
];

const PROFESSIONS: &[&str] = &[
    "engineer",
    "chemist",
    "architect",
    "economist",
    "surveyor",
    "geologist",
    "physician",
    "cartographer",
    "historian",
    "mathematician",
    "astronomer",
    "diplomat",
];

const FIELDS: &[&str] = &[
    "optics",
    "hydraulics",
    "linguistics",
    "metallurgy",
    "acoustics",
    "genetics",
    "cryptography",
    "navigation",
    "thermodynamics",
    "ecology",
    "statistics",
    "seismology",
];

const ADJECTIVES: &[&str] = &[
    "Silent", "Distant", "Hollow", "Crimson", "Patient", "Northern", "Broken", "Golden", "Quiet",
    "Restless", "Hidden", "Final",
];

const NOUNS: &[&str] = &[
    "Harbor", "Meridian", "Orchard", "Lantern", "Archive", "Frontier", "Compass", "Tide", "Engine",
    "Garden", "Ledger", "Horizon",
];

fn place<R: Rng>(rng: &mut R) -> String {
    format!(
        "{}{}",
        PLACE_HEADS[rng.random_range(0..PLACE_HEADS.len())],
        PLACE_TAILS[rng.random_range(0..PLACE_TAILS.len())]
    )
}

fn person_name<R: Rng>(rng: &mut R) -> String {
    format!(
        "{} {}",
        FIRST_NAMES[rng.random_range(0..FIRST_NAMES.len())],
        SURNAMES[rng.random_range(0..SURNAMES.len())]
    )
}

/// Inclusive knowledge range drawn for each tier.
pub fn knowledge_range(tier: Tier) -> (f64, f64) {
    match tier {
        Tier::Top => (0.7, 0.95),
        Tier::Middle => (0.4, 0.7),
        Tier::Bottom => (0.1, 0.4),
        Tier::Invented => (0.0, 0.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub statement: String,
    pub is_true: bool,
    pub attribute: Attribute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub name: String,
    pub tier: Tier,
    /// Probability that the simulated model recalls a true fact.
    pub knowledge: f64,
    /// True facts and the entity's shared distractors.
    pub facts: Vec<Fact>,
}

impl Entity {
    pub fn attributes(&self) -> Vec<Attribute> {
        let set: BTreeSet<Attribute> = self.facts.iter().map(|f| f.attribute).collect();
        set.into_iter().collect()
    }

    pub fn true_fact(&self, attribute: Attribute) -> Option<&Fact> {
        self.facts
            .iter()
            .find(|f| f.attribute == attribute && f.is_true)
    }

    pub fn distractors(&self, attribute: Attribute) -> impl Iterator<Item = &Fact> {
        self.facts
            .iter()
            .filter(move |f| f.attribute == attribute && !f.is_true)
    }
}

/// Fractions of entities per tier; they must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TierMix {
    pub bottom: f64,
    pub middle: f64,
    pub top: f64,
    pub invented: f64,
}

impl TierMix {
    /// Equal bottom/middle/top shares with `invented` set aside.
    pub fn even(invented: f64) -> Self {
        let rest = (1.0 - invented) / 3.0;
        Self {
            bottom: rest,
            middle: rest,
            top: rest,
            invented,
        }
    }

    fn shares(&self) -> [(Tier, f64); 4] {
        [
            (Tier::Bottom, self.bottom),
            (Tier::Middle, self.middle),
            (Tier::Top, self.top),
            (Tier::Invented, self.invented),
        ]
    }

    /// Entity counts per tier by largest remainder.
    pub fn counts(&self, n: usize) -> Result<Vec<(Tier, usize)>, Error> {
        let shares = self.shares();
        if shares.iter().any(|(_, f)| !(f.is_finite() && *f >= 0.0)) {
            return Err(Error::Invalid("tier fractions must be non-negative".into()));
        }
        let total: f64 = shares.iter().map(|(_, f)| f).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "tier fractions sum to {total}, not 1"
            )));
        }
        let exact: Vec<f64> = shares.iter().map(|(_, f)| f * n as f64).collect();
        let mut counts: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| {
            let ra = exact[a] - exact[a].floor();
            let rb = exact[b] - exact[b].floor();
            rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
        });
        let mut missing = n - counts.iter().sum::<usize>();
        for i in order {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        Ok(shares
            .iter()
            .zip(counts)
            .map(|((t, _), c)| (*t, c))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_entities: usize,
    pub tier_mix: TierMix,
    pub facts_per_entity: usize,
    /// Shared false alternatives per attribute for real entities.
    pub distractors_per_fact: usize,
    /// False alternatives per attribute for invented entities. Kept large:
    /// a model that knows nothing invents freely, so its guesses rarely agree.
    pub invented_distractors: usize,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_entities: 100,
            tier_mix: TierMix::even(0.1),
            facts_per_entity: 6,
            distractors_per_fact: 8,
            invented_distractors: 120,
        }
    }
}

/// Where a statement comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatementInfo {
    pub entity: usize,
    pub attribute: Attribute,
    pub is_true: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub spec: WorldSpec,
    pub entities: Vec<Entity>,
    #[serde(skip)]
    index: HashMap<String, StatementInfo>,
    #[serde(skip)]
    by_name: HashMap<String, usize>,
}

pub fn make_world(spec: &WorldSpec) -> Result<SimWorld, Error> {
    if spec.facts_per_entity == 0 || spec.facts_per_entity > Attribute::ALL.len() {
        return Err(Error::Invalid(format!(
            "facts_per_entity must be in 1..={}",
            Attribute::ALL.len()
        )));
    }
    let counts = spec.tier_mix.counts(spec.n_entities)?;
    let mut rng = rng_from(derive_seed!(spec.seed, "world"));
    let mut tiers: Vec<Tier> = counts
        .iter()
        .flat_map(|(t, c)| std::iter::repeat_n(*t, *c))
        .collect();
    tiers.shuffle(&mut rng);

    let mut used_names = BTreeSet::new();
    let mut entities = Vec::with_capacity(tiers.len());
    for (i, tier) in tiers.into_iter().enumerate() {
        let mut name = person_name(&mut rng);
        if !used_names.insert(name.clone()) {
            name = format!("{name} {}", roman(i + 2));
            used_names.insert(name.clone());
        }
        let (lo, hi) = knowledge_range(tier);
        let knowledge = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let mut attrs = Attribute::ALL.to_vec();
        attrs.shuffle(&mut rng);
        attrs.truncate(spec.facts_per_entity);
        attrs.sort();
        let n_distractors = if tier == Tier::Invented {
            spec.invented_distractors
        } else {
            spec.distractors_per_fact
        };
        let mut facts = Vec::new();
        for attribute in attrs {
            let mut values = BTreeSet::new();
            let mut ordered = Vec::new();
            let mut guard = 0;
            while ordered.len() < n_distractors + 1 && guard < 10_000 {
                let v = attribute.value(&mut rng);
                if values.insert(v.clone()) {
                    ordered.push(v);
                }
                guard += 1;
            }
            for (k, v) in ordered.into_iter().enumerate() {
                // An invented entity has no true facts.
                let is_true = k == 0 && tier != Tier::Invented;
                if k == 0 && tier == Tier::Invented {
                    continue;
                }
                facts.push(Fact {
                    statement: attribute.sentence(&name, &v),
                    is_true,
                    attribute,
                });
            }
        }
        entities.push(Entity {
            name,
            tier,
            knowledge,
            facts,
        });
    }
    let mut world = SimWorld {
        spec: spec.clone(),
        entities,
        index: HashMap::new(),
        by_name: HashMap::new(),
    };
    world.rebuild_index();
    Ok(world)
}

fn roman(mut n: usize) -> String {
    const TABLE: [(usize, &str); 9] = [
        (100, "C"),
        (90, "XC"),
        (50, "L"),
        (40, "XL"),
        (10, "X"),
        (9, "IX"),
        (5, "V"),
        (4, "IV"),
        (1, "I"),
    ];
    let mut s = String::new();
    for (v, r) in TABLE {
        while n >= v {
            s.push_str(r);
            n -= v;
        }
    }
    s
}

impl SimWorld {
    fn rebuild_index(&mut self) {
        self.index.clear();
        self.by_name.clear();
        for (i, e) in self.entities.iter().enumerate() {
            self.by_name.insert(e.name.clone(), i);
            for f in &e.facts {
                self.index.insert(
                    normalize_claim(&f.statement),
                    StatementInfo {
                        entity: i,
                        attribute: f.attribute,
                        is_true: f.is_true,
                    },
                );
            }
        }
    }

    pub fn entity(&self, name: &str) -> Option<&Entity> {
        self.by_name.get(name).map(|&i| &self.entities[i])
    }

    pub fn entity_index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Look up a statement by its canonical key.
    pub fn statement(&self, text: &str) -> Option<StatementInfo> {
        self.index.get(&normalize_claim(text)).copied()
    }

    /// Queries for every entity, in world order.
    pub fn queries(&self, task: &str) -> Vec<Query> {
        self.entities
            .iter()
            .enumerate()
            .map(|(i, e)| Query::new(format!("sim-{:05}", i), &e.name, task).with_tier(e.tier))
            .collect()
    }

    pub fn mean_knowledge(&self, tier: Tier) -> Option<f64> {
        let ks: Vec<f64> = self
            .entities
            .iter()
            .filter(|e| e.tier == tier)
            .map(|e| e.knowledge)
            .collect();
        (!ks.is_empty()).then(|| ks.iter().sum::<f64>() / ks.len() as f64)
    }

    pub fn to_json(&self) -> Result<String, Error> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let mut world: SimWorld = serde_json::from_str(text)?;
        world.rebuild_index();
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Whether `claim` is a true fact about `entity`. Unknown statements are false.
pub fn oracle_truth(world: &SimWorld, entity: &str, claim: &str) -> Result<bool, Error> {
    let index = world
        .entity_index(entity)
        .ok_or_else(|| Error::Invalid(format!("unknown entity `{entity}`")))?;
    Ok(world
        .statement(claim)
        .is_some_and(|info| info.entity == index && info.is_true))
}
