//! Synthetic held-out-entity question answering.
//!
//! Every entity gets one value per attribute, stated in the corpus as
//! `"ent7 has color red"`. Questions ask `"which color does ent7 have"` with
//! options drawn from the same attribute's values. Train and dev questions
//! concern disjoint entities, so dev answers can only come from the corpus.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::numeric::{derive_seed, seeded_rng};
use crate::retrieval::{build_index, Corpus, DEFAULT_B, DEFAULT_K1};
use crate::text::{tokenize, Vocab};

const ATTRIBUTES: [(&str, [&str; 6]); 5] = [
    ("color", ["red", "blue", "green", "yellow", "black", "white"]),
    ("size", ["tiny", "small", "medium", "large", "huge", "giant"]),
    ("shape", ["round", "square", "flat", "long", "curved", "pointed"]),
    ("material", ["wood", "stone", "metal", "glass", "cloth", "paper"]),
    ("taste", ["sweet", "sour", "bitter", "salty", "spicy", "bland"]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskConfig {
    pub n_entities: usize,
    pub n_attributes: usize,
    /// Values available per attribute.
    pub n_values: usize,
    pub n_options: usize,
    /// Share of entities held out for dev.
    pub dev_fraction: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        Self {
            n_entities: 80,
            n_attributes: 5,
            n_values: 6,
            n_options: 3,
            dev_fraction: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HarnessError::Config(m));
        if self.n_attributes == 0 || self.n_attributes > ATTRIBUTES.len() {
            return err(format!("task.n_attributes must lie in 1..={}", ATTRIBUTES.len()));
        }
        if self.n_values < 2 || self.n_values > ATTRIBUTES[0].1.len() {
            return err(format!("task.n_values must lie in 2..={}", ATTRIBUTES[0].1.len()));
        }
        if self.n_options < 2 {
            return err("task.n_options must be at least 2".into());
        }
        if self.n_options > self.n_values {
            return err(format!(
                "task.n_options ({}) exceeds the {} values of each attribute",
                self.n_options, self.n_values
            ));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return err("task.dev_fraction must lie strictly between 0 and 1".into());
        }
        let n_dev = self.n_dev_entities();
        if n_dev == 0 || n_dev == self.n_entities {
            return err("task.n_entities is too small to split into train and dev".into());
        }
        Ok(())
    }

    fn n_dev_entities(&self) -> usize {
        (self.n_entities as f64 * self.dev_fraction).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McqExample {
    pub question: String,
    pub options: Vec<String>,
    pub answer: usize,
    pub gold_fact_id: usize,
}

impl McqExample {
    pub fn validate(&self) -> Result<()> {
        if self.answer >= self.options.len() {
            return Err(HarnessError::Data(format!(
                "answer {} out of range for {} options",
                self.answer,
                self.options.len()
            )));
        }
        let distinct: BTreeSet<&String> = self.options.iter().collect();
        if distinct.len() != self.options.len() {
            return Err(HarnessError::Data(format!(
                "duplicate options in {:?}",
                self.question
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Vec<McqExample>,
    pub dev: Vec<McqExample>,
    pub corpus: Corpus,
    pub vocab: Vocab,
    pub train_entities: BTreeSet<usize>,
    pub dev_entities: BTreeSet<usize>,
}

pub fn entity_name(e: usize) -> String {
    format!("ent{e}")
}

/// Corpus doc id of the fact about `(entity, attribute)`.
pub fn fact_id(cfg: &SyntheticTaskConfig, entity: usize, attribute: usize) -> usize {
    entity * cfg.n_attributes + attribute
}

/// Builds the corpus and the train/dev questions, then checks that BM25
/// finds every dev question's gold fact in its top five.
pub fn generate_dataset(cfg: &SyntheticTaskConfig) -> Result<TaskData> {
    cfg.validate()?;
    let mut rng = seeded_rng(derive_seed(cfg.seed, 10));

    let values: Vec<Vec<usize>> = (0..cfg.n_entities)
        .map(|_| {
            (0..cfg.n_attributes)
                .map(|_| rng.random_range(0..cfg.n_values))
                .collect()
        })
        .collect();
    let mut texts = Vec::with_capacity(cfg.n_entities * cfg.n_attributes);
    for (e, vals) in values.iter().enumerate() {
        for (a, &v) in vals.iter().enumerate() {
            let (attr, words) = ATTRIBUTES[a];
            texts.push(format!("{} has {attr} {}", entity_name(e), words[v]));
        }
    }
    let corpus = Corpus::from_texts(&texts)?;

    let mut entities: Vec<usize> = (0..cfg.n_entities).collect();
    entities.shuffle(&mut rng);
    let n_dev = cfg.n_dev_entities();
    let dev_entities: BTreeSet<usize> = entities[..n_dev].iter().copied().collect();
    let train_entities: BTreeSet<usize> = entities[n_dev..].iter().copied().collect();

    let mut make = |ents: &BTreeSet<usize>| -> Vec<McqExample> {
        let mut out = Vec::new();
        for &e in ents {
            for a in 0..cfg.n_attributes {
                let (attr, words) = ATTRIBUTES[a];
                let gold = values[e][a];
                let others: Vec<usize> = (0..cfg.n_values).filter(|&v| v != gold).collect();
                let mut opts: Vec<usize> = others
                    .choose_multiple(&mut rng, cfg.n_options - 1)
                    .copied()
                    .collect();
                let answer = rng.random_range(0..cfg.n_options);
                opts.insert(answer, gold);
                out.push(McqExample {
                    question: format!("which {attr} does {} have", entity_name(e)),
                    options: opts.iter().map(|&v| words[v].to_string()).collect(),
                    answer,
                    gold_fact_id: fact_id(cfg, e, a),
                });
            }
        }
        out
    };
    let train = make(&train_entities);
    let dev = make(&dev_entities);

    let index = build_index(&corpus, DEFAULT_K1, DEFAULT_B)?;
    for ex in &dev {
        let top = index.sparse_retrieve(&tokenize(&ex.question), 5);
        if !top.iter().any(|c| c.doc_id == ex.gold_fact_id) {
            return Err(HarnessError::Data(format!(
                "gold fact {} is not in the BM25 top 5 for {:?}",
                ex.gold_fact_id, ex.question
            )));
        }
    }

    let vocab = Vocab::build(
        corpus
            .documents()
            .iter()
            .map(|d| d.text.as_str())
            .chain(train.iter().chain(&dev).flat_map(|ex| {
                std::iter::once(ex.question.as_str()).chain(ex.options.iter().map(String::as_str))
            })),
    );

    Ok(TaskData {
        train,
        dev,
        corpus,
        vocab,
        train_entities,
        dev_entities,
    })
}
