//! Knowledge-base data model, JSONL ingestion and coverage analyses.
//!
//! Input records follow the DaMuEL-style layout, one entity per line:
//!
//! ```json
//! {"qid":"Q62","label":"San Francisco","description":"...","wiki":{"title":"...","text":"...","links":[{"start":0,"end":5,"qid":"Q90"}]}}
//! ```
//!
//! Link spans are character offsets (Unicode scalar values) into `wiki.text`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};

/// Wikidata-style entity identifier. Rendered as `Q<n>` at every I/O boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Qid(u64);

impl Qid {
    pub fn new(id: u64) -> Result<Self> {
        if id == 0 {
            return Err(Error::argument("qid must be positive"));
        }
        Ok(Qid(id))
    }

    pub fn get(self) -> u64 {
        self.0
    }
}

impl fmt::Display for Qid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q{}", self.0)
    }
}

impl FromStr for Qid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('Q')
            .ok_or_else(|| Error::format(format!("qid {s:?} lacks the Q prefix")))?;
        let id = digits
            .parse::<u64>()
            .map_err(|_| Error::format(format!("qid {s:?} is not Q<digits>")))?;
        Qid::new(id).map_err(|_| Error::format(format!("qid {s:?} must be positive")))
    }
}

impl Serialize for Qid {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Qid {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let value = Value::deserialize(deserializer)?;
        qid_from_value(&value).map_err(serde::de::Error::custom)
    }
}

/// Accepts `"Q62"` or a bare positive integer.
fn qid_from_value(value: &Value) -> Result<Qid> {
    match value {
        Value::String(s) => s.parse(),
        Value::Number(n) => n
            .as_u64()
            .ok_or_else(|| Error::format(format!("qid {n} is not a positive integer")))
            .and_then(|id| Qid::new(id).map_err(|e| Error::format(e.to_string()))),
        other => Err(Error::format(format!("qid has unsupported type: {other}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub qid: Qid,
    pub label: String,
    pub description: Option<String>,
    pub wiki_title: Option<String>,
    pub wiki_text: Option<String>,
    pub language: String,
}

impl Entity {
    /// Text that follows the label in the entity's description input.
    /// Wikipedia pages win over short descriptions.
    pub fn description_body(&self) -> &str {
        self.wiki_text
            .as_deref()
            .or(self.description.as_deref())
            .unwrap_or("")
    }

    /// One JSONL line in the ingestion schema (without links).
    pub fn to_json_line(&self) -> String {
        let mut obj = serde_json::Map::new();
        obj.insert("qid".into(), Value::String(self.qid.to_string()));
        obj.insert("label".into(), Value::String(self.label.clone()));
        if let Some(d) = &self.description {
            obj.insert("description".into(), Value::String(d.clone()));
        }
        if self.wiki_title.is_some() || self.wiki_text.is_some() {
            let mut wiki = serde_json::Map::new();
            if let Some(t) = &self.wiki_title {
                wiki.insert("title".into(), Value::String(t.clone()));
            }
            if let Some(t) = &self.wiki_text {
                wiki.insert("text".into(), Value::String(t.clone()));
            }
            obj.insert("wiki".into(), Value::Object(wiki));
        }
        Value::Object(obj).to_string()
    }
}

/// A gold-linked span inside a context document. Offsets count characters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mention {
    pub doc_id: String,
    pub surface: String,
    pub start: usize,
    pub end: usize,
    pub context_text: String,
    pub gold_qid: Qid,
    pub language: String,
}

impl Mention {
    /// Builds a mention from a character span, checking slice consistency.
    pub fn from_span(
        doc_id: impl Into<String>,
        context_text: impl Into<String>,
        start: usize,
        end: usize,
        gold_qid: Qid,
        language: impl Into<String>,
    ) -> Result<Self> {
        let context_text = context_text.into();
        let surface = char_slice(&context_text, start, end)
            .ok_or_else(|| Error::argument(format!("span [{start},{end}) outside context")))?
            .to_string();
        if surface.is_empty() {
            return Err(Error::argument("mention surface is empty"));
        }
        Ok(Mention {
            doc_id: doc_id.into(),
            surface,
            start,
            end,
            context_text,
            gold_qid,
            language: language.into(),
        })
    }

    /// Checks the span/surface invariants; records read back from a store go through this.
    pub fn validate(&self) -> Result<()> {
        match char_slice(&self.context_text, self.start, self.end) {
            Some(s) if !s.is_empty() && s == self.surface => Ok(()),
            Some(_) => Err(Error::format(format!(
                "mention in {} at [{},{}) does not match its surface {:?}",
                self.doc_id, self.start, self.end, self.surface
            ))),
            None => Err(Error::format(format!(
                "mention in {} has span [{},{}) outside its context",
                self.doc_id, self.start, self.end
            ))),
        }
    }
}

/// Slices `text` by character offsets; `None` when the span is out of bounds or inverted.
pub fn char_slice(text: &str, start: usize, end: usize) -> Option<&str> {
    if start > end {
        return None;
    }
    let mut boundaries = text
        .char_indices()
        .map(|(b, _)| b)
        .chain(std::iter::once(text.len()));
    let from = boundaries.nth(start)?;
    let to = if end == start {
        from
    } else {
        boundaries.nth(end - start - 1)?
    };
    Some(&text[from..to])
}

/// Entities of one language.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KbPartition {
    pub language: String,
    pub entities: BTreeMap<Qid, Entity>,
}

impl KbPartition {
    pub fn new(language: impl Into<String>) -> Self {
        KbPartition {
            language: language.into(),
            entities: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn get(&self, qid: Qid) -> Option<&Entity> {
        self.entities.get(&qid)
    }

    pub fn qids(&self) -> HashSet<Qid> {
        self.entities.keys().copied().collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for entity in self.entities.values() {
            writeln!(out, "{}", entity.to_json_line())?;
        }
        Ok(())
    }
}

/// Per-language partitions plus mention totals.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    partitions: BTreeMap<String, KbPartition>,
    mention_totals: BTreeMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a partition under its own language key, replacing an earlier one.
    pub fn insert_partition(&mut self, partition: KbPartition) {
        self.partitions.insert(partition.language.clone(), partition);
    }

    pub fn record_mentions(&mut self, language: &str, count: usize) {
        *self.mention_totals.entry(language.to_string()).or_default() += count;
    }

    pub fn partition(&self, language: &str) -> Option<&KbPartition> {
        self.partitions.get(language)
    }

    pub fn partitions(&self) -> impl Iterator<Item = &KbPartition> {
        self.partitions.values()
    }

    pub fn entity_count(&self, language: &str) -> usize {
        self.partitions.get(language).map_or(0, KbPartition::len)
    }

    pub fn mention_count(&self, language: &str) -> usize {
        self.mention_totals.get(language).copied().unwrap_or(0)
    }

    /// Qids across every partition ("all parts" coverage).
    pub fn all_qids(&self) -> HashSet<Qid> {
        self.partitions
            .values()
            .flat_map(|p| p.entities.keys().copied())
            .collect()
    }
}

#[derive(Debug, Default, Deserialize)]
struct RawRecord {
    qid: Option<Value>,
    label: Option<String>,
    description: Option<String>,
    wiki: Option<RawWiki>,
}

#[derive(Debug, Default, Deserialize)]
struct RawWiki {
    title: Option<String>,
    text: Option<String>,
    #[serde(default)]
    links: Vec<Value>,
}

#[derive(Debug, Deserialize)]
struct RawLink {
    start: usize,
    end: usize,
    qid: Value,
}

#[derive(Debug)]
pub struct LoadReport {
    pub partition: KbPartition,
    /// Lines that failed the schema (bad JSON, missing qid/label, duplicate qid).
    pub skipped: usize,
}

/// Reads one language partition from JSONL. Bad lines are counted, not fatal.
pub fn load_kb<R: BufRead>(input: R, language: &str) -> Result<LoadReport> {
    let mut partition = KbPartition::new(language);
    let mut skipped = 0;
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_entity(&line, language) {
            Ok(entity) => {
                if let std::collections::btree_map::Entry::Vacant(e) = partition.entities.entry(entity.qid) {
                    e.insert(entity);
                } else {
                    log::warn!("line {}: duplicate {}", lineno + 1, entity.qid);
                    skipped += 1;
                }
            }
            Err(e) => {
                log::warn!("line {}: {e}", lineno + 1);
                skipped += 1;
            }
        }
    }
    Ok(LoadReport { partition, skipped })
}

fn parse_entity(line: &str, language: &str) -> Result<Entity> {
    let raw: RawRecord =
        serde_json::from_str(line).map_err(|e| Error::format(format!("bad record: {e}")))?;
    let qid = qid_from_value(raw.qid.as_ref().ok_or_else(|| Error::format("missing qid"))?)?;
    let label = raw
        .label
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::format("missing or empty label"))?;
    let (wiki_title, wiki_text) = raw.wiki.map_or((None, None), |w| (w.title, w.text));
    Ok(Entity {
        qid,
        label,
        description: raw.description,
        wiki_title,
        wiki_text,
        language: language.to_string(),
    })
}

#[derive(Debug, Default)]
pub struct MentionExtraction {
    pub mentions: Vec<Mention>,
    /// Links whose span selects the empty string.
    pub dropped_empty: usize,
    /// Links that are malformed or point outside the page text.
    pub skipped_links: usize,
    /// Lines that are not valid records at all.
    pub skipped_records: usize,
}

impl MentionExtraction {
    pub fn warnings(&self) -> usize {
        self.dropped_empty + self.skipped_links + self.skipped_records
    }
}

/// Turns every `wiki.links` entry into a [`Mention`] over the page text.
pub fn extract_mentions<R: BufRead>(input: R, language: &str) -> Result<MentionExtraction> {
    let mut out = MentionExtraction::default();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("line {}: bad record: {e}", lineno + 1);
                out.skipped_records += 1;
                continue;
            }
        };
        let Some(wiki) = raw.wiki else { continue };
        if wiki.links.is_empty() {
            continue;
        }
        let text = wiki.text.unwrap_or_default();
        let doc_id = match raw.qid.as_ref().map(qid_from_value) {
            Some(Ok(q)) => q.to_string(),
            _ => format!("line{}", lineno + 1),
        };
        // Byte offset of every character boundary, including the end.
        let bounds: Vec<usize> = text
            .char_indices()
            .map(|(b, _)| b)
            .chain(std::iter::once(text.len()))
            .collect();
        let n_chars = bounds.len() - 1;
        for link in wiki.links {
            let link: RawLink = match serde_json::from_value(link) {
                Ok(l) => l,
                Err(e) => {
                    log::warn!("line {}: bad link: {e}", lineno + 1);
                    out.skipped_links += 1;
                    continue;
                }
            };
            let gold = match qid_from_value(&link.qid) {
                Ok(q) => q,
                Err(e) => {
                    log::warn!("line {}: {e}", lineno + 1);
                    out.skipped_links += 1;
                    continue;
                }
            };
            if link.start > link.end || link.end > n_chars {
                log::warn!(
                    "line {}: link [{},{}) outside text of {} chars",
                    lineno + 1,
                    link.start,
                    link.end,
                    n_chars
                );
                out.skipped_links += 1;
                continue;
            }
            if link.start == link.end {
                out.dropped_empty += 1;
                continue;
            }
            let surface = &text[bounds[link.start]..bounds[link.end]];
            out.mentions.push(Mention {
                doc_id: doc_id.clone(),
                surface: surface.to_string(),
                start: link.start,
                end: link.end,
                context_text: text.clone(),
                gold_qid: gold,
                language: language.to_string(),
            });
        }
    }
    Ok(out)
}

/// Opens a possibly compressed text file (`.gz` or `.xz` by extension).
pub fn open_text(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    Ok(match ext {
        "gz" => Box::new(BufReader::new(flate2::read::MultiGzDecoder::new(file))),
        "xz" => Box::new(BufReader::new(xz2::read::XzDecoder::new_multi_decoder(file))),
        _ => Box::new(BufReader::new(file)),
    })
}

pub fn write_mentions_jsonl<W: Write>(mentions: &[Mention], mut out: W) -> Result<()> {
    for m in mentions {
        serde_json::to_writer(&mut out, m).map_err(|e| Error::format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_mentions_jsonl<R: BufRead>(input: R) -> Result<Vec<Mention>> {
    let mut mentions = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: Mention = serde_json::from_str(&line)
            .map_err(|e| Error::format(format!("mention line {}: {e}", lineno + 1)))?;
        m.validate()?;
        mentions.push(m);
    }
    Ok(mentions)
}

/// Fraction of mention occurrences whose gold entity exists in `kb`.
pub fn recall_upper_bound(mentions: &[Mention], kb: &HashSet<Qid>) -> Result<f64> {
    if mentions.is_empty() {
        return Err(Error::Domain("upper bound over zero mentions".into()));
    }
    let covered = mentions.iter().filter(|m| kb.contains(&m.gold_qid)).count();
    Ok(covered as f64 / mentions.len() as f64)
}

/// Fraction of distinct evaluation entities present in `kb`.
pub fn entity_set_intersection(eval: &HashSet<Qid>, kb: &HashSet<Qid>) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Domain("intersection over an empty entity set".into()));
    }
    Ok(eval.intersection(kb).count() as f64 / eval.len() as f64)
}

/// Mention counts per (entity, language) and per language.
#[derive(Debug, Clone, Default)]
pub struct MentionCounts {
    per_entity: HashMap<(Qid, String), u64>,
    per_language: HashMap<String, u64>,
}

impl MentionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_mentions<'a>(mentions: impl IntoIterator<Item = &'a Mention>) -> Self {
        let mut counts = Self::new();
        for m in mentions {
            counts.add(m.gold_qid, &m.language, 1);
        }
        counts
    }

    pub fn add(&mut self, qid: Qid, language: &str, n: u64) {
        *self
            .per_entity
            .entry((qid, language.to_string()))
            .or_default() += n;
        *self.per_language.entry(language.to_string()).or_default() += n;
    }

    pub fn entity(&self, qid: Qid, language: &str) -> u64 {
        self.per_entity
            .get(&(qid, language.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn language(&self, language: &str) -> u64 {
        self.per_language.get(language).copied().unwrap_or(0)
    }
}

/// Picks the language whose description should represent `qid`: most mentions of
/// the entity, then most mentions overall, then the smallest language code.
pub fn select_description_language(
    qid: Qid,
    counts: &MentionCounts,
    available: &BTreeSet<String>,
) -> Result<String> {
    available
        .iter()
        .max_by_key(|lang| {
            (
                counts.entity(qid, lang),
                counts.language(lang),
                Reverse(lang.as_str()),
            )
        })
        .cloned()
        .ok_or_else(|| Error::argument("no candidate languages"))
}

/// Writes `name<TAB>value` lines.
pub fn write_metrics<W: Write>(mut out: W, metrics: &[(&str, f64)]) -> io::Result<()> {
    for (name, value) in metrics {
        writeln!(out, "{name}\t{value}")?;
    }
    Ok(())
}
