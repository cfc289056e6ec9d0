//! Maximum-inner-product index over unit vectors.
//!
//! Rows are grouped into `P` partitions by a seeded spherical k-means. A search
//! scans the `probes` partitions whose centroids score highest against the query;
//! with `probes == P` every row is scanned and the result is exact.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{dot, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::kb::Qid;
use crate::tokenizer::TokenBlock;

const KMEANS_ITERATIONS: usize = 10;
const QUERY_NORM_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_RETRIEVAL_K: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexConfig {
    pub partitions: usize,
    pub default_probes: usize,
    pub seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            partitions: 1,
            default_probes: 1,
            seed: 0,
        }
    }
}

impl IndexConfig {
    /// Exact configuration: a single partition.
    pub fn exact(seed: u64) -> Self {
        IndexConfig {
            partitions: 1,
            default_probes: 1,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchHit {
    pub row: usize,
    pub qid: Qid,
    pub score: f64,
}

/// Descending score, ascending row on ties.
fn hit_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone)]
pub struct SearchIndex {
    vectors: EmbeddingMatrix,
    row_qid: Vec<Qid>,
    row_tokens: Option<TokenBlock>,
    centroids: Array2<f64>,
    assignment: Vec<usize>,
    lists: Vec<Vec<usize>>,
    default_probes: usize,
    first_row: HashMap<Qid, usize>,
}

impl SearchIndex {
    pub fn build(
        vectors: EmbeddingMatrix,
        row_qid: Vec<Qid>,
        row_tokens: Option<TokenBlock>,
        cfg: IndexConfig,
    ) -> Result<Self> {
        let n = vectors.len();
        if row_qid.len() != n {
            return Err(Error::argument("one qid per index row required"));
        }
        if let Some(tokens) = &row_tokens {
            if tokens.rows() != n {
                return Err(Error::argument("one token row per index row required"));
            }
        }
        if n == 0 {
            return Err(Error::argument("cannot index zero rows"));
        }
        let p = cfg.partitions;
        if p == 0 || p > n {
            return Err(Error::argument(format!("{p} partitions for {n} rows")));
        }
        if cfg.default_probes == 0 || cfg.default_probes > p {
            return Err(Error::argument(format!(
                "default probes {} outside 1..={p}",
                cfg.default_probes
            )));
        }
        let centroids = kmeans(&vectors, p, cfg.seed);
        let assignment: Vec<usize> = (0..n)
            .map(|i| nearest_centroid(&centroids, vectors.row(i)))
            .collect();
        let mut lists = vec![Vec::new(); p];
        for (row, &c) in assignment.iter().enumerate() {
            lists[c].push(row);
        }
        let mut first_row = HashMap::new();
        for (row, &q) in row_qid.iter().enumerate() {
            first_row.entry(q).or_insert(row);
        }
        Ok(SearchIndex {
            vectors,
            row_qid,
            row_tokens,
            centroids,
            assignment,
            lists,
            default_probes: cfg.default_probes,
            first_row,
        })
    }

    pub fn len(&self) -> usize {
        self.row_qid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_qid.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim()
    }

    pub fn partitions(&self) -> usize {
        self.lists.len()
    }

    pub fn default_probes(&self) -> usize {
        self.default_probes
    }

    pub fn centroids(&self) -> &Array2<f64> {
        &self.centroids
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn partition_sizes(&self) -> Vec<usize> {
        self.lists.iter().map(Vec::len).collect()
    }

    pub fn vectors(&self) -> &EmbeddingMatrix {
        &self.vectors
    }

    pub fn qid(&self, row: usize) -> Qid {
        self.row_qid[row]
    }

    pub fn qids(&self) -> &[Qid] {
        &self.row_qid
    }

    pub fn tokens(&self, row: usize) -> Option<&[u32]> {
        self.row_tokens.as_ref().map(|t| t.row(row))
    }

    pub fn token_block(&self) -> Option<&TokenBlock> {
        self.row_tokens.as_ref()
    }

    /// First row holding `qid`.
    pub fn row_of(&self, qid: Qid) -> Option<usize> {
        self.first_row.get(&qid).copied()
    }

    pub fn distinct_qids(&self) -> usize {
        self.first_row.len()
    }

    /// Top-`k` rows by inner product with `query`. `probes` defaults to the index setting.
    pub fn search(&self, query: &[f64], k: usize, probes: Option<usize>) -> Result<Vec<SearchHit>> {
        if k < 1 {
            return Err(Error::argument("search needs k >= 1"));
        }
        if query.len() != self.dim() {
            return Err(Error::argument(format!(
                "query of dim {} against index of dim {}",
                query.len(),
                self.dim()
            )));
        }
        let norm = dot(query, query).sqrt();
        if (norm - 1.0).abs() > QUERY_NORM_TOLERANCE {
            return Err(Error::argument(format!("query norm {norm} is not 1")));
        }
        let probes = probes.unwrap_or(self.default_probes);
        let p = self.partitions();
        if probes == 0 || probes > p {
            return Err(Error::argument(format!("{probes} probes outside 1..={p}")));
        }
        let mut scored: Vec<(f64, usize)> = if probes == p {
            (0..self.len())
                .map(|row| (dot(query, self.vectors.row(row)), row))
                .collect()
        } else {
            self.probe_order(query)
                .into_iter()
                .take(probes)
                .flat_map(|c| self.lists[c].iter().copied())
                .map(|row| (dot(query, self.vectors.row(row)), row))
                .collect()
        };
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, hit_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(hit_order);
        Ok(scored
            .into_iter()
            .map(|(score, row)| SearchHit {
                row,
                qid: self.row_qid[row],
                score,
            })
            .collect())
    }

    /// Partitions by descending centroid score, ascending index on ties.
    fn probe_order(&self, query: &[f64]) -> Vec<usize> {
        let mut order: Vec<(f64, usize)> = self
            .centroids
            .rows()
            .into_iter()
            .enumerate()
            .map(|(c, row)| (dot(query, row.as_slice().expect("row-major")), c))
            .collect();
        order.sort_unstable_by(hit_order);
        order.into_iter().map(|(_, c)| c).collect()
    }

    /// Hard negatives for one training mention.
    ///
    /// Retrieves the `k0` nearest rows, drops the gold entity, collapses runs of the
    /// same entity and doubles `k` until at least `neg` distinct entities survive.
    /// `neg` of them are then drawn uniformly without replacement.
    pub fn query_negatives<R: Rng>(
        &self,
        query: &[f64],
        gold: Qid,
        neg: usize,
        k0: usize,
        probes: Option<usize>,
        rng: &mut R,
    ) -> Result<Vec<SearchHit>> {
        if neg < 1 || k0 < 1 {
            return Err(Error::argument("query_negatives needs neg >= 1 and k >= 1"));
        }
        let available = self.distinct_qids() - usize::from(self.first_row.contains_key(&gold));
        if available < neg {
            return Err(Error::InsufficientNegatives {
                available,
                requested: neg,
            });
        }
        let n = self.len();
        let mut probes = probes.unwrap_or(self.default_probes);
        let mut k = k0;
        loop {
            let fetch = k.min(n);
            let hits = self.search(query, fetch, Some(probes))?;
            let mut survivors: Vec<SearchHit> = Vec::with_capacity(hits.len());
            for hit in hits.into_iter().filter(|h| h.qid != gold) {
                if survivors.last().map(|s| s.qid) != Some(hit.qid) {
                    survivors.push(hit);
                }
            }
            // Runs are collapsed above; non-adjacent repeats may remain and are
            // removed before sampling so the drawn entities are distinct.
            let mut seen = HashSet::new();
            survivors.retain(|h| seen.insert(h.qid));
            if survivors.len() >= neg {
                let mut picked = rand::seq::index::sample(rng, survivors.len(), neg).into_vec();
                picked.sort_unstable();
                return Ok(picked.into_iter().map(|i| survivors[i]).collect());
            }
            if fetch >= n {
                if probes < self.partitions() {
                    // Probed partitions ran dry; fall back to scanning everything.
                    probes = self.partitions();
                    continue;
                }
                return Err(Error::InsufficientNegatives {
                    available: survivors.len(),
                    requested: neg,
                });
            }
            k = k.saturating_mul(2);
        }
    }

    /// Writes the token sidecar: `Qn<TAB>id id …` per row.
    pub fn write_tokens<W: Write>(&self, mut out: W) -> Result<()> {
        let tokens = self
            .row_tokens
            .as_ref()
            .ok_or_else(|| Error::argument("index has no token payload"))?;
        write_token_rows(&mut out, &self.row_qid, tokens)
    }
}

pub fn write_token_rows<W: Write>(mut out: W, qids: &[Qid], tokens: &TokenBlock) -> Result<()> {
    if qids.len() != tokens.rows() {
        return Err(Error::argument("one qid per token row required"));
    }
    for (q, row) in qids.iter().zip(tokens.iter()) {
        let ids: Vec<String> = row.iter().map(u32::to_string).collect();
        writeln!(out, "{q}\t{}", ids.join(" "))?;
    }
    Ok(())
}

/// Reads a token sidecar back into qids and a block.
pub fn read_token_rows<R: BufRead>(input: R) -> Result<(Vec<Qid>, TokenBlock)> {
    let mut qids = Vec::new();
    let mut block: Option<TokenBlock> = None;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (q, ids) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("token row {}: missing tab", i + 1)))?;
        qids.push(q.parse::<Qid>()?);
        let ids: Vec<u32> = ids
            .split_whitespace()
            .map(|t| t.parse::<u32>().map_err(|_| Error::format(format!("token row {}: bad id {t:?}", i + 1))))
            .collect::<Result<_>>()?;
        let block = block.get_or_insert_with(|| TokenBlock::new(ids.len()));
        block
            .push(&ids)
            .map_err(|_| Error::format(format!("token row {} has a different width", i + 1)))?;
    }
    Ok((qids, block.unwrap_or_default()))
}

fn nearest_centroid(centroids: &Array2<f64>, v: &[f64]) -> usize {
    let mut best = 0;
    let mut best_score = f64::NEG_INFINITY;
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let s = dot(v, row.as_slice().expect("row-major"));
        if s > best_score {
            best = c;
            best_score = s;
        }
    }
    best
}

/// Spherical k-means: seeded distinct-row initialization, fixed iteration count.
fn kmeans(vectors: &EmbeddingMatrix, p: usize, seed: u64) -> Array2<f64> {
    let n = vectors.len();
    let d = vectors.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Array2::zeros((p, d));
    for (c, row) in rand::seq::index::sample(&mut rng, n, p).into_iter().enumerate() {
        centroids.row_mut(c).assign(&vectors.row_view(row));
    }
    if p == 1 {
        return centroids;
    }
    for _ in 0..KMEANS_ITERATIONS {
        let mut sums = Array2::<f64>::zeros((p, d));
        let mut counts = vec![0usize; p];
        for i in 0..n {
            let c = nearest_centroid(&centroids, vectors.row(i));
            counts[c] += 1;
            let mut s = sums.row_mut(c);
            s += &vectors.row_view(i);
        }
        for c in 0..p {
            if counts[c] == 0 {
                continue;
            }
            let norm = sums.row(c).dot(&sums.row(c)).sqrt();
            if norm > 0.0 {
                let mean = sums.row(c).mapv(|x| x / norm);
                centroids.row_mut(c).assign(&mean);
            }
        }
    }
    centroids
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn q(n: u64) -> Qid {
        Qid::new(n).unwrap()
    }

    fn random_unit(n: usize, d: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = Array2::from_shape_simple_fn((n, d), || rng.gen_range(-1.0..1.0));
        EmbeddingMatrix::normalized(rows).unwrap()
    }

    #[test]
    fn self_retrieval() {
        let m = EmbeddingMatrix::from_unit_rows(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let idx = SearchIndex::build(m, vec![q(1), q(2), q(3)], None, IndexConfig::default()).unwrap();
        let hits = idx.search(&[0.0, 1.0, 0.0], 1, None).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].row, 1);
        assert_eq!(hits[0].qid, q(2));
        assert_eq!(hits[0].score, 1.0);
    }

    #[test]
    fn ties_break_by_row() {
        let m = EmbeddingMatrix::from_unit_rows(array![[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]).unwrap();
        let idx = SearchIndex::build(m, vec![q(1), q(2), q(3)], None, IndexConfig::default()).unwrap();
        let hits = idx.search(&[1.0, 0.0], 3, None).unwrap();
        let rows: Vec<_> = hits.iter().map(|h| h.row).collect();
        assert_eq!(rows, vec![0, 2, 1]);
    }

    #[test]
    fn assignment_is_nearest_centroid() {
        let m = random_unit(100, 8, 1);
        let cfg = IndexConfig {
            partitions: 4,
            default_probes: 1,
            seed: 7,
        };
        let idx = SearchIndex::build(m.clone(), (1..=100).map(q).collect(), None, cfg).unwrap();
        for i in 0..100 {
            let scores: Vec<f64> = idx
                .centroids()
                .rows()
                .into_iter()
                .map(|c| c.iter().zip(m.row(i)).map(|(a, b)| a * b).sum())
                .collect();
            let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(scores[idx.assignment()[i]], best);
        }
        assert_eq!(idx.partition_sizes().iter().sum::<usize>(), 100);
        let again = SearchIndex::build(m, (1..=100).map(q).collect(), None, cfg).unwrap();
        assert_eq!(again.assignment(), idx.assignment());
    }

    #[test]
    fn argument_errors() {
        let m = random_unit(5, 3, 1);
        let qids: Vec<_> = (1..=5).map(q).collect();
        let too_many = IndexConfig {
            partitions: 6,
            default_probes: 1,
            seed: 0,
        };
        assert!(SearchIndex::build(m.clone(), qids.clone(), None, too_many).is_err());
        let idx = SearchIndex::build(m.clone(), qids, None, IndexConfig::default()).unwrap();
        let query = m.row(0).to_vec();
        assert!(idx.search(&query, 0, None).is_err());
        assert!(idx.search(&query, 1, Some(2)).is_err());
        assert!(idx.search(&[1.0, 1.0, 0.0], 1, None).is_err());
        assert_eq!(idx.search(&query, 50, None).unwrap().len(), 5);
    }

    #[test]
    fn negatives_exclude_gold() {
        let m = random_unit(10, 6, 3);
        let qids: Vec<_> = (1..=10).map(q).collect();
        let idx = SearchIndex::build(m.clone(), qids, None, IndexConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let query = m.row(4).to_vec();
        let negs = idx.query_negatives(&query, q(5), 3, 100, None, &mut rng).unwrap();
        assert_eq!(negs.len(), 3);
        assert!(negs.iter().all(|h| h.qid != q(5)));
        let distinct: HashSet<_> = negs.iter().map(|h| h.qid).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn negatives_double_k_through_duplicate_runs() {
        // Five near-identical rows of entity 2 lead the ranking; entity 3 sits behind them.
        let rows = array![
            [1.0, 0.0, 0.0],
            [0.999, 0.0447, 0.0],
            [0.998, 0.0632, 0.0],
            [0.997, 0.0774, 0.0],
            [0.996, 0.0894, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ];
        let m = EmbeddingMatrix::normalized(rows).unwrap();
        let qids = vec![q(2), q(2), q(2), q(2), q(2), q(3), q(9)];
        let idx = SearchIndex::build(m, qids, None, IndexConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = idx
            .query_negatives(&[1.0, 0.0, 0.0], q(9), 2, 1, None, &mut rng)
            .unwrap();
        let got: HashSet<_> = negs.iter().map(|h| h.qid).collect();
        assert_eq!(got, [q(2), q(3)].into());
    }

    #[test]
    fn negatives_insufficient() {
        let m = random_unit(4, 3, 3);
        let qids = vec![q(1), q(1), q(2), q(3)];
        let idx = SearchIndex::build(m.clone(), qids, None, IndexConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = idx
            .query_negatives(m.row(0), q(1), 3, 1, None, &mut rng)
            .unwrap_err();
        assert!(matches!(
            err,
            Error::InsufficientNegatives {
                available: 2,
                requested: 3
            }
        ));
    }

    #[test]
    fn negatives_escalate_probes_when_partitions_run_dry() {
        let m = random_unit(40, 4, 11);
        let qids: Vec<_> = (1..=40).map(q).collect();
        let cfg = IndexConfig {
            partitions: 8,
            default_probes: 1,
            seed: 2,
        };
        let idx = SearchIndex::build(m.clone(), qids, None, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = idx.query_negatives(m.row(0), q(1), 30, 1, None, &mut rng).unwrap();
        assert_eq!(negs.len(), 30);
    }

    #[test]
    fn token_sidecar_round_trip() {
        let block = TokenBlock::from_rows(3, [[1, 5, 0], [1, 7, 1]]).unwrap();
        let mut buf = Vec::new();
        write_token_rows(&mut buf, &[q(4), q(8)], &block).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "Q4\t1 5 0\nQ8\t1 7 1\n");
        let (qids, back) = read_token_rows(buf.as_slice()).unwrap();
        assert_eq!(qids, vec![q(4), q(8)]);
        assert_eq!(back, block);
        assert!(read_token_rows("Q1\t1 2\nQ2\t1\n".as_bytes()).is_err());
    }
}
