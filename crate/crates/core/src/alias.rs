//! Exact-match alias tables.
//!
//! A table maps every alias seen in training to at most `K` entities, ranked by how
//! often the alias linked to each of them. Ties go to the smaller qid.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::kb::Qid;

/// Locale-independent lowercase fold used by uncased tables.
///
/// Per-character lowercase mapping, except that U+0130 (capital dotted I) folds to a
/// plain `i` so that Turkish surfaces meet their ASCII spellings.
pub fn fold_case(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if c == '\u{130}' {
            out.push('i');
        } else {
            out.extend(c.to_lowercase());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasTable {
    entries: HashMap<String, Vec<(Qid, u32)>>,
    k: usize,
    cased: bool,
}

impl AliasTable {
    /// Counts alias/entity pairs and keeps the `k` most frequent entities per alias.
    pub fn build<'a, I>(pairs: I, k: usize, cased: bool) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, Qid)>,
    {
        if k < 1 {
            return Err(Error::argument("alias table needs K >= 1"));
        }
        let mut counts: HashMap<String, HashMap<Qid, u32>> = HashMap::new();
        for (alias, qid) in pairs {
            if alias.is_empty() {
                return Err(Error::argument("empty alias"));
            }
            let key = if cased {
                alias.to_string()
            } else {
                fold_case(alias)
            };
            *counts.entry(key).or_default().entry(qid).or_default() += 1;
        }
        let entries = counts
            .into_iter()
            .map(|(alias, per_qid)| {
                let mut ranked: Vec<(Qid, u32)> = per_qid.into_iter().collect();
                ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
                ranked.truncate(k);
                (alias, ranked)
            })
            .collect();
        Ok(AliasTable { entries, k, cased })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn is_cased(&self) -> bool {
        self.cased
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Key under which `mention` is looked up.
    pub fn normalize<'a>(&self, mention: &'a str) -> std::borrow::Cow<'a, str> {
        if self.cased {
            mention.into()
        } else {
            fold_case(mention).into()
        }
    }

    /// Ranked entries for an already-normalized alias.
    pub fn entry(&self, alias: &str) -> Option<&[(Qid, u32)]> {
        self.entries.get(alias).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[(Qid, u32)])> {
        self.entries.iter().map(|(a, v)| (a.as_str(), v.as_slice()))
    }

    /// Ranked candidates for a mention; empty when the alias is unknown (NIL).
    pub fn link(&self, mention: &str) -> Vec<Qid> {
        self.entry(&self.normalize(mention))
            .map(|ranked| ranked.iter().map(|&(q, _)| q).collect())
            .unwrap_or_default()
    }

    /// Writes `alias<TAB>Qn:count,...` lines sorted by alias.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        let sorted: BTreeMap<_, _> = self.entries.iter().collect();
        for (alias, ranked) in sorted {
            if alias.contains(['\t', '\n', '\r']) {
                return Err(Error::format(format!(
                    "alias {alias:?} contains a tab or newline"
                )));
            }
            let cells: Vec<String> = ranked.iter().map(|(q, c)| format!("{q}:{c}")).collect();
            writeln!(out, "{alias}\t{}", cells.join(","))?;
        }
        Ok(())
    }

    /// Reads a table written by [`AliasTable::write_tsv`]. `k` becomes the longest list.
    pub fn read_tsv<R: BufRead>(input: R, cased: bool) -> Result<Self> {
        let mut entries = HashMap::new();
        let mut k = 1;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let bad = |what: &str| Error::format(format!("alias table line {}: {what}", lineno + 1));
            let (alias, list) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            if alias.is_empty() {
                return Err(bad("empty alias"));
            }
            let mut ranked = Vec::new();
            for cell in list.split(',') {
                let (q, c) = cell.split_once(':').ok_or_else(|| bad("cell lacks ':'"))?;
                let count = c.parse::<u32>().map_err(|_| bad("bad count"))?;
                ranked.push((q.parse::<Qid>()?, count));
            }
            if ranked.windows(2).any(|w| w[0].1 < w[1].1) {
                return Err(bad("counts not ranked"));
            }
            k = k.max(ranked.len());
            entries.insert(alias.to_string(), ranked);
        }
        Ok(AliasTable { entries, k, cased })
    }
}
