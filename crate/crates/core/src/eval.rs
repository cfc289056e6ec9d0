//! R@K and end-to-end evaluation of the dense linker.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::encoder::{EmbeddingMatrix, EncoderParams};
use crate::error::{Error, Result};
use crate::index::{IndexConfig, SearchIndex};
use crate::kb::{Entity, Mention, Qid};
use crate::tokenizer::{
    compose_description, extract_mention_window, tokenize, MentionWindow, TokenBlock, Vocabulary,
};

/// Which items populate the evaluation index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KbMode {
    Descriptions,
    Contexts,
    Both,
}

impl fmt::Display for KbMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KbMode::Descriptions => "descriptions",
            KbMode::Contexts => "contexts",
            KbMode::Both => "both",
        })
    }
}

impl FromStr for KbMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "descriptions" => Ok(KbMode::Descriptions),
            "contexts" => Ok(KbMode::Contexts),
            "both" => Ok(KbMode::Both),
            other => Err(Error::argument(format!("unknown kb mode {other:?}"))),
        }
    }
}

/// Fraction of mentions whose gold is among the first `k` distinct qids of its list.
pub fn recall_at_k(ranked: &[Vec<Qid>], golds: &[Qid], k: usize) -> Result<f64> {
    if ranked.len() != golds.len() {
        return Err(Error::argument(format!(
            "{} ranked lists for {} golds",
            ranked.len(),
            golds.len()
        )));
    }
    if k < 1 {
        return Err(Error::argument("R@K needs K >= 1"));
    }
    if golds.is_empty() {
        return Err(Error::Domain("R@K over zero mentions".into()));
    }
    let hits = ranked
        .iter()
        .zip(golds)
        .filter(|(list, gold)| first_distinct(list, k).contains(gold))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

/// First `k` distinct qids of `list`, in order.
pub fn first_distinct(list: &[Qid], k: usize) -> Vec<Qid> {
    let mut seen = HashSet::new();
    list.iter()
        .copied()
        .filter(|q| seen.insert(*q))
        .take(k)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub language: String,
    pub kb_mode: KbMode,
    pub kb_size: usize,
    pub n_mentions: usize,
    pub recalls: BTreeMap<usize, f64>,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.get(&k).copied()
    }

    /// `language<TAB>kb_mode<TAB>K<TAB>recall<TAB>n_mentions`, one line per K.
    pub fn write_tsv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (k, r) in &self.recalls {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                self.language, self.kb_mode, k, r, self.n_mentions
            )?;
        }
        Ok(())
    }

    pub fn from_ranked(
        language: &str,
        kb_mode: KbMode,
        kb_size: usize,
        ranked: &[Vec<Qid>],
        golds: &[Qid],
        ks: &[usize],
    ) -> Result<Self> {
        if ks.is_empty() {
            return Err(Error::argument("no K values requested"));
        }
        let recalls = ks
            .iter()
            .map(|&k| Ok((k, recall_at_k(ranked, golds, k)?)))
            .collect::<Result<_>>()?;
        Ok(EvalReport {
            language: language.to_string(),
            kb_mode,
            kb_size,
            n_mentions: golds.len(),
            recalls,
        })
    }
}

/// Context window for one mention; `None` if its span covers no token.
pub fn mention_window(mention: &Mention, width: usize, vocab: Vocabulary) -> Result<Option<MentionWindow>> {
    let doc = tokenize(&mention.context_text, vocab);
    if doc.token_range(mention.start, mention.end).is_none() {
        return Ok(None);
    }
    extract_mention_window(&doc, (mention.start, mention.end), width).map(Some)
}

/// Description input of every entity, in the given order.
pub fn description_block(entities: &[&Entity], width: usize, vocab: Vocabulary) -> Result<(Vec<Qid>, TokenBlock)> {
    let rows: Vec<Vec<u32>> = entities
        .par_iter()
        .map(|e| compose_description(&e.label, e.description_body(), width, vocab))
        .collect::<Result<_>>()?;
    Ok((
        entities.iter().map(|e| e.qid).collect(),
        TokenBlock::from_rows(width, rows)?,
    ))
}

/// Windows of the mentions that have one, labeled with their gold qids.
/// Mentions whose span covers no token are left out.
pub fn context_block(mentions: &[Mention], width: usize, vocab: Vocabulary) -> Result<(Vec<Qid>, TokenBlock)> {
    let windows: Vec<Option<MentionWindow>> = mentions
        .par_iter()
        .map(|m| mention_window(m, width, vocab))
        .collect::<Result<_>>()?;
    let mut qids = Vec::new();
    let mut block = TokenBlock::new(width);
    for (m, w) in mentions.iter().zip(windows) {
        if let Some(w) = w {
            qids.push(m.gold_qid);
            block.push(&w.ids)?;
        }
    }
    Ok((qids, block))
}

/// Ranked distinct qids per query, at least `depth` of them when the index has that many.
///
/// Fetches `4 · depth` rows and doubles on shortfall, so that several rows of one
/// entity never crowd others out of the cutoff.
pub fn rank_entities(
    index: &SearchIndex,
    queries: &EmbeddingMatrix,
    depth: usize,
    probes: Option<usize>,
) -> Result<Vec<Vec<Qid>>> {
    let n = index.len();
    let distinct = index.distinct_qids();
    (0..queries.len())
        .into_par_iter()
        .map(|i| {
            let mut fetch = 4 * depth;
            loop {
                let hits = index.search(queries.row(i), fetch.min(n), probes)?;
                let qids: Vec<Qid> = hits.iter().map(|h| h.qid).collect();
                let got = first_distinct(&qids, depth);
                if got.len() >= depth.min(distinct) || fetch >= n {
                    return Ok(got);
                }
                fetch *= 2;
            }
        })
        .collect()
}

/// Evaluation inputs that do not depend on the encoder.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub language: String,
    pub kb_mode: KbMode,
    pub population_qids: Vec<Qid>,
    pub population: TokenBlock,
    pub golds: Vec<Qid>,
    /// Windows of evaluation mentions; `None` for mentions without tokens (always a miss).
    pub queries: Vec<Option<Vec<u32>>>,
    pub width: usize,
}

impl EvalSet {
    /// Builds the index population for `kb_mode` and tokenizes the evaluation mentions.
    /// Contexts come from `train_mentions`, required for `contexts` and `both`.
    pub fn prepare(
        entities: &[&Entity],
        eval_mentions: &[Mention],
        train_mentions: Option<&[Mention]>,
        kb_mode: KbMode,
        width: usize,
        vocab: Vocabulary,
    ) -> Result<Self> {
        let mut population_qids = Vec::new();
        let mut population = TokenBlock::new(width);
        if matches!(kb_mode, KbMode::Descriptions | KbMode::Both) {
            let (qids, block) = description_block(entities, width, vocab)?;
            population_qids.extend(qids);
            for row in block.iter() {
                population.push(row)?;
            }
        }
        if matches!(kb_mode, KbMode::Contexts | KbMode::Both) {
            let train = train_mentions
                .ok_or_else(|| Error::argument(format!("{kb_mode} mode needs training mentions")))?;
            let (qids, block) = context_block(train, width, vocab)?;
            population_qids.extend(qids);
            for row in block.iter() {
                population.push(row)?;
            }
        }
        if population_qids.is_empty() {
            return Err(Error::argument("evaluation KB population is empty"));
        }
        let queries = eval_mentions
            .par_iter()
            .map(|m| Ok(mention_window(m, width, vocab)?.map(|w| w.ids)))
            .collect::<Result<Vec<_>>>()?;
        let language = eval_mentions
            .first()
            .map(|m| m.language.clone())
            .unwrap_or_default();
        Ok(EvalSet {
            language,
            kb_mode,
            population_qids,
            population,
            golds: eval_mentions.iter().map(|m| m.gold_qid).collect(),
            queries,
            width,
        })
    }

    /// Embeds population and queries with `params`, searches and scores every K.
    pub fn evaluate(&self, params: &EncoderParams, ks: &[usize], index_cfg: IndexConfig) -> Result<EvalReport> {
        let kb = params.embed(&self.population)?;
        let index = SearchIndex::build(kb, self.population_qids.clone(), None, index_cfg)?;
        let present: Vec<&[u32]> = self.queries.iter().flatten().map(Vec::as_slice).collect();
        let block = TokenBlock::from_rows(self.width, present)?;
        let embedded = params.embed(&block)?;
        let depth = ks.iter().copied().max().unwrap_or(1);
        let mut found = rank_entities(&index, &embedded, depth, None)?.into_iter();
        let ranked: Vec<Vec<Qid>> = self
            .queries
            .iter()
            .map(|q| match q {
                Some(_) => found.next().expect("one result per query"),
                None => Vec::new(),
            })
            .collect();
        EvalReport::from_ranked(&self.language, self.kb_mode, index.len(), &ranked, &self.golds, ks)
    }
}

/// Evaluates precomputed embeddings: KB rows labeled by qid against mention rows
/// aligned with `golds`.
pub fn evaluate_embeddings(
    kb: EmbeddingMatrix,
    kb_qids: Vec<Qid>,
    mentions: &EmbeddingMatrix,
    golds: &[Qid],
    ks: &[usize],
    index_cfg: IndexConfig,
    language: &str,
    kb_mode: KbMode,
) -> Result<EvalReport> {
    if mentions.len() != golds.len() {
        return Err(Error::argument("one gold per mention embedding required"));
    }
    if kb.dim() != mentions.dim() {
        return Err(Error::argument("KB and mention embeddings differ in dimension"));
    }
    let index = SearchIndex::build(kb, kb_qids, None, index_cfg)?;
    let depth = ks.iter().copied().max().unwrap_or(1);
    let ranked = rank_entities(&index, mentions, depth, None)?;
    EvalReport::from_ranked(language, kb_mode, index.len(), &ranked, golds, ks)
}
