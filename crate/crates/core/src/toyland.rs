//! Seeded synthetic corpus for desk-scale experiments.
//!
//! Every entity gets a 2–3 word label, a handful of topic words and a description
//! that contains the label. Mentions sit in their own short documents surrounded
//! by topic and filler words; a fraction carry an inflectional suffix. About one
//! entity in ten shares its label with another one, so labels alone cannot
//! resolve every mention.

use std::collections::HashSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::Result;
use crate::kb::{extract_mentions, load_kb, Entity, Mention, Qid};
use crate::tokenizer::{Vocabulary, DEFAULT_VOCAB_SIZE};

const SUFFIXES: &[&str] = &["'da", "'nin", "'e", "s", "in", "'s"];
const ONSETS: &[&str] = &[
    "b", "c", "d", "f", "g", "h", "j", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "dr", "kr", "st", "tr",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "l", "s", "k"];

/// First qid used for documents, far above any entity qid.
pub const DOC_QID_BASE: u64 = 100_000;

#[derive(Debug, Clone)]
pub struct ToylandConfig {
    pub entities: usize,
    pub mentions_per_entity: usize,
    pub eval_per_entity: usize,
    pub topics_per_entity: usize,
    /// Size of the shared pool of uninformative words.
    pub filler_words: usize,
    pub homonym_fraction: f64,
    pub inflected_fraction: f64,
    /// Share of topic words among description tokens.
    pub description_topic_rate: f64,
    /// Share of topic words among context tokens.
    pub context_topic_rate: f64,
    pub language: String,
    pub seed: u64,
}

impl Default for ToylandConfig {
    fn default() -> Self {
        ToylandConfig {
            entities: 200,
            mentions_per_entity: 20,
            eval_per_entity: 5,
            topics_per_entity: 6,
            filler_words: 120,
            homonym_fraction: 0.1,
            inflected_fraction: 0.1,
            description_topic_rate: 0.2,
            context_topic_rate: 0.1,
            language: "tl".into(),
            seed: 7,
        }
    }
}

/// Generated corpus: entity records plus one document per mention.
#[derive(Debug, Clone)]
pub struct Toyland {
    pub entities: Vec<Entity>,
    pub train: Vec<Mention>,
    pub eval: Vec<Mention>,
    /// Serialized inputs, in the ingestion format.
    pub kb_jsonl: String,
    pub train_docs_jsonl: String,
    pub eval_docs_jsonl: String,
}

impl Toyland {
    /// Evaluation mentions whose surface differs from the entity label.
    pub fn inflected_eval(&self) -> Vec<Mention> {
        self.eval
            .iter()
            .filter(|m| {
                self.entities
                    .binary_search_by_key(&m.gold_qid, |e| e.qid)
                    .map(|i| self.entities[i].label != m.surface)
                    .unwrap_or(false)
            })
            .cloned()
            .collect()
    }

    pub fn write_files(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in [
            ("kb.jsonl", &self.kb_jsonl),
            ("train_docs.jsonl", &self.train_docs_jsonl),
            ("eval_docs.jsonl", &self.eval_docs_jsonl),
        ] {
            let mut f = std::fs::File::create(dir.join(name))?;
            f.write_all(body.as_bytes())?;
        }
        Ok(())
    }
}

fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
        w.push_str(CODAS.choose(rng).unwrap());
    }
    w
}

/// Words whose hashed ids under the default vocabulary are unused so far, so no
/// filler shares a token id with a label or topic word.
fn distinct_words(rng: &mut ChaCha8Rng, n: usize, syllables: usize, taken: &mut HashSet<u32>) -> Vec<String> {
    let vocab = Vocabulary::new(DEFAULT_VOCAB_SIZE).expect("default vocabulary");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w = word(rng, syllables);
        let capital = capitalize(&w);
        let ids = [vocab.token_id(&w), vocab.token_id(&capital)];
        if !taken.contains(&ids[0]) && !taken.contains(&ids[1]) && ids[0] != ids[1] {
            taken.extend(ids);
            out.push(w);
        }
    }
    out
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn filler_text(rng: &mut ChaCha8Rng, n: usize, topics: &[String], fillers: &[String], rate: f64) -> Vec<String> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(rate) {
                topics.choose(rng).unwrap().clone()
            } else {
                fillers.choose(rng).unwrap().clone()
            }
        })
        .collect()
}

pub fn generate(cfg: &ToylandConfig) -> Result<Toyland> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = HashSet::new();
    let fillers = distinct_words(&mut rng, cfg.filler_words, 1 + cfg.filler_words / 400, &mut taken);
    let name_words = distinct_words(&mut rng, cfg.entities * 3, 2, &mut taken);
    let topic_pool = distinct_words(&mut rng, cfg.entities * cfg.topics_per_entity / 2 + 1, 3, &mut taken);

    let mut labels: Vec<String> = (0..cfg.entities)
        .map(|i| {
            let n = rng.gen_range(2..=3);
            name_words[i * 3..i * 3 + n].iter().map(|w| capitalize(w)).collect::<Vec<_>>().join(" ")
        })
        .collect();
    let homonyms = (cfg.entities as f64 * cfg.homonym_fraction / 2.0).round() as usize;
    let mut order: Vec<usize> = (0..cfg.entities).collect();
    order.shuffle(&mut rng);
    for pair in order.chunks_exact(2).take(homonyms) {
        labels[pair[1]] = labels[pair[0]].clone();
    }
    let topics: Vec<Vec<String>> = (0..cfg.entities)
        .map(|_| topic_pool.choose_multiple(&mut rng, cfg.topics_per_entity).cloned().collect())
        .collect();

    let mut kb_jsonl = String::new();
    for i in 0..cfg.entities {
        let len = rng.gen_range(40..=80usize);
        let label_len = labels[i].split(' ').count();
        let mut words = vec![labels[i].clone()];
        words.extend(filler_text(
            &mut rng,
            len - label_len,
            &topics[i],
            &fillers,
            cfg.description_topic_rate,
        ));
        let text = words.join(" ");
        let record = json!({
            "qid": format!("Q{}", i + 1),
            "label": labels[i],
            "description": text,
        });
        kb_jsonl.push_str(&record.to_string());
        kb_jsonl.push('\n');
    }

    let mut train_docs = String::new();
    let mut eval_docs = String::new();
    let mut doc = DOC_QID_BASE;
    for i in 0..cfg.entities {
        for j in 0..cfg.mentions_per_entity {
            let mut surface = labels[i].clone();
            if rng.gen_bool(cfg.inflected_fraction) {
                surface.push_str(SUFFIXES.choose(&mut rng).unwrap());
            }
            let len = rng.gen_range(60..=120usize);
            let surface_len = surface.split(' ').count();
            let rest = filler_text(&mut rng, len - surface_len, &topics[i], &fillers, cfg.context_topic_rate);
            let at = rng.gen_range(0..=rest.len());
            let before = rest[..at].join(" ");
            let after = rest[at..].join(" ");
            let start = if before.is_empty() { 0 } else { before.chars().count() + 1 };
            let end = start + surface.chars().count();
            let text = [before, surface, after]
                .into_iter()
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            doc += 1;
            let record = json!({
                "qid": format!("Q{doc}"),
                "label": format!("Document {doc}"),
                "wiki": {"text": text, "links": [{"start": start, "end": end, "qid": format!("Q{}", i + 1)}]},
            });
            let out = if j < cfg.mentions_per_entity - cfg.eval_per_entity {
                &mut train_docs
            } else {
                &mut eval_docs
            };
            out.push_str(&record.to_string());
            out.push('\n');
        }
    }

    let entities = load_kb(kb_jsonl.as_bytes(), &cfg.language)?
        .partition
        .entities
        .into_values()
        .collect();
    let train = extract_mentions(train_docs.as_bytes(), &cfg.language)?.mentions;
    let eval = extract_mentions(eval_docs.as_bytes(), &cfg.language)?.mentions;
    Ok(Toyland {
        entities,
        train,
        eval,
        kb_jsonl,
        train_docs_jsonl: train_docs,
        eval_docs_jsonl: eval_docs,
    })
}

/// Qid of the `i`-th generated entity (zero-based).
pub fn entity_qid(i: usize) -> Qid {
    Qid::new(i as u64 + 1).expect("positive")
}
