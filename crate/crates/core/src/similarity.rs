//! Normalized Indel distance and the similarity fallback linker.
//!
//! Distances work on Unicode scalar values. The LCS kernel is the bit-parallel
//! recurrence `V' = (V + U) | (V & !U)` with `U = V & PM[c]`, processed in 64-bit
//! blocks so patterns of any length are supported.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::alias::AliasTable;
use crate::error::{Error, Result};
use crate::kb::Qid;

/// Length of the longest common subsequence of two character sequences.
pub fn lcs_len(a: &[char], b: &[char]) -> usize {
    let (pattern, text) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if pattern.is_empty() {
        return 0;
    }
    let words = pattern.len().div_ceil(64);
    let mut masks: HashMap<char, Vec<u64>> = HashMap::new();
    for (i, &c) in pattern.iter().enumerate() {
        masks.entry(c).or_insert_with(|| vec![0; words])[i / 64] |= 1 << (i % 64);
    }
    let mut v = vec![u64::MAX; words];
    for c in text {
        let Some(pm) = masks.get(c) else { continue };
        let mut carry = 0u64;
        for w in 0..words {
            let u = v[w] & pm[w];
            let (s1, c1) = v[w].overflowing_add(u);
            let (s2, c2) = s1.overflowing_add(carry);
            carry = u64::from(c1 || c2);
            v[w] = s2 | (v[w] & !u);
        }
    }
    let tail = pattern.len() % 64;
    let ones: usize = v
        .iter()
        .enumerate()
        .map(|(w, &bits)| {
            let bits = if w == words - 1 && tail != 0 {
                bits & ((1u64 << tail) - 1)
            } else {
                bits
            };
            bits.count_ones() as usize
        })
        .sum();
    pattern.len() - ones
}

/// Minimum number of single-character insertions and deletions turning `s1` into `s2`.
pub fn indel_distance(s1: &str, s2: &str) -> usize {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    a.len() + b.len() - 2 * lcs_len(&a, &b)
}

/// Indel distance as an exact fraction `(distance, len1 + len2)`.
fn indel_fraction(a: &[char], b: &[char]) -> (u64, u64) {
    let total = (a.len() + b.len()) as u64;
    (total - 2 * lcs_len(a, b) as u64, total)
}

/// Indel distance divided by the combined length; 0 when both strings are empty.
pub fn normalized_indel(s1: &str, s2: &str) -> f64 {
    let a: Vec<char> = s1.chars().collect();
    let b: Vec<char> = s2.chars().collect();
    let (d, total) = indel_fraction(&a, &b);
    if total == 0 {
        0.0
    } else {
        d as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHit {
    pub alias: String,
    pub qid: Qid,
    /// Normalized Indel distance between the query and `alias`, in `[0, 1]`.
    pub distance: f64,
}

fn cmp_fraction(a: (u64, u64), b: (u64, u64)) -> Ordering {
    (u128::from(a.0) * u128::from(b.1)).cmp(&(u128::from(b.0) * u128::from(a.1)))
}

/// Every alias of the table ranked by ascending distance to `mention`, ties by alias.
/// Each alias contributes its stored entities in table order.
pub fn nearest_aliases(table: &AliasTable, mention: &str) -> Vec<SimilarityHit> {
    let query: Vec<char> = table.normalize(mention).chars().collect();
    let aliases: Vec<(&str, &[(Qid, u32)])> = table.iter().collect();
    let mut scored: Vec<((u64, u64), &str, &[(Qid, u32)])> = aliases
        .par_iter()
        .map(|&(alias, ranked)| {
            let chars: Vec<char> = alias.chars().collect();
            (indel_fraction(&query, &chars), alias, ranked)
        })
        .collect();
    scored.sort_by(|a, b| cmp_fraction(a.0, b.0).then_with(|| a.1.cmp(b.1)));
    scored
        .into_iter()
        .flat_map(|(frac, alias, ranked)| {
            let distance = if frac.1 == 0 {
                0.0
            } else {
                frac.0 as f64 / frac.1 as f64
            };
            ranked.iter().map(move |&(qid, _)| SimilarityHit {
                alias: alias.to_string(),
                qid,
                distance,
            })
        })
        .collect()
}

/// Exact alias lookup, falling back to the nearest aliases by normalized Indel
/// distance until `k` distinct entities are gathered.
pub fn link_by_similarity(table: &AliasTable, mention: &str, k: usize) -> Result<Vec<Qid>> {
    if k < 1 {
        return Err(Error::argument("similarity linking needs K >= 1"));
    }
    if table.is_empty() {
        return Err(Error::argument("similarity linking over an empty alias table"));
    }
    if table.entry(&table.normalize(mention)).is_some() {
        return Ok(table.link(mention));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(k);
    for hit in nearest_aliases(table, mention) {
        if seen.insert(hit.qid) {
            out.push(hit.qid);
            if out.len() == k {
                break;
            }
        }
    }
    Ok(out)
}
