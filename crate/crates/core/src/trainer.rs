//! Bi-encoder fine-tuning with in-batch sampled softmax and hard negatives.
//!
//! A round embeds every entity description with the current encoder, indexes the
//! result, mines negatives for sampled training mentions and trains on the batches
//! in generation order. Each batch scores its `b` mentions against all
//! `b·(1+neg)` entities in it; the positive of mention `i` sits at column
//! `i·(1+neg)` and is followed by that mention's negatives.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufReader, Read, Write};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::{dot, EmbeddingMatrix, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{description_block, mention_window, EvalReport, EvalSet};
use crate::index::{IndexConfig, SearchIndex};
use crate::kb::{Entity, Mention, Qid};
use crate::tokenizer::{TokenBlock, Vocabulary};

/// Number of batches generated in parallel before they are trained on.
const GENERATION_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub neg: usize,
    pub context_size: usize,
    pub logit_multiplier: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Per-step learning-rate multiplier; 1.0 disables decay.
    pub decay: f64,
    /// Apply `decay` only in the last round.
    pub decay_last_round_only: bool,
    pub steps_round1: usize,
    pub steps_later: usize,
    pub rounds: usize,
    pub n_partitions: usize,
    pub default_probes: usize,
    pub retrieval_k: usize,
    pub vocab_size: u32,
    pub dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            neg: 7,
            context_size: 64,
            logit_multiplier: 50.0,
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 1.0,
            decay_last_round_only: false,
            steps_round1: 20_000,
            steps_later: 100_000,
            rounds: 5,
            n_partitions: 1,
            default_probes: 1,
            retrieval_k: 100,
            vocab_size: crate::tokenizer::DEFAULT_VOCAB_SIZE,
            dim: crate::encoder::DEFAULT_DIM,
            seed: 0,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in manifest order.
pub const CONFIG_KEYS: &[&str] = &[
    "batch_size",
    "neg",
    "context_size",
    "logit_multiplier",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "decay",
    "decay_last_round_only",
    "steps_round1",
    "steps_later",
    "rounds",
    "n_partitions",
    "default_probes",
    "retrieval_k",
    "vocab_size",
    "dim",
    "seed",
    "preset",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::argument(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one key. `preset = final_round` enables last-round decay of 0.998 per step.
    /// Unknown keys are an [`Error::Argument`] naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "neg" => self.neg = parse(key, value)?,
            "context_size" => self.context_size = parse(key, value)?,
            "logit_multiplier" => self.logit_multiplier = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "decay" => self.decay = parse(key, value)?,
            "decay_last_round_only" => self.decay_last_round_only = parse(key, value)?,
            "steps_round1" => self.steps_round1 = parse(key, value)?,
            "steps_later" => self.steps_later = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "n_partitions" => self.n_partitions = parse(key, value)?,
            "default_probes" => self.default_probes = parse(key, value)?,
            "retrieval_k" => self.retrieval_k = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "preset" => match value.trim() {
                "final_round" => {
                    self.decay = 0.998;
                    self.decay_last_round_only = true;
                }
                other => return Err(Error::argument(format!("unknown preset {other:?}"))),
            },
            other => return Err(Error::argument(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` file; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("config line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Resolved values of every key except `preset`.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("batch_size", self.batch_size.to_string()),
            ("neg", self.neg.to_string()),
            ("context_size", self.context_size.to_string()),
            ("logit_multiplier", self.logit_multiplier.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("decay", self.decay.to_string()),
            ("decay_last_round_only", self.decay_last_round_only.to_string()),
            ("steps_round1", self.steps_round1.to_string()),
            ("steps_later", self.steps_later.to_string()),
            ("rounds", self.rounds.to_string()),
            ("n_partitions", self.n_partitions.to_string()),
            ("default_probes", self.default_probes.to_string()),
            ("retrieval_k", self.retrieval_k.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("dim", self.dim.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::argument(m.to_string()));
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        if self.neg < 1 {
            return fail("neg must be at least 1");
        }
        if !(self.logit_multiplier > 0.0 && self.logit_multiplier.is_finite()) {
            return fail("logit_multiplier must be positive");
        }
        if self.context_size < 3 {
            return fail("context_size must be at least 3");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam needs lr > 0 and betas in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.decay > 0.0 && self.decay <= 1.0) {
            return fail("eps must be positive and decay in (0, 1]");
        }
        if self.retrieval_k < 1 || self.n_partitions < 1 {
            return fail("retrieval_k and n_partitions must be positive");
        }
        if self.default_probes < 1 || self.default_probes > self.n_partitions {
            return fail("default_probes must lie in 1..=n_partitions");
        }
        if self.dim < 1 {
            return fail("dim must be positive");
        }
        Vocabulary::new(self.vocab_size)?;
        Ok(())
    }

    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size).expect("validated vocabulary")
    }

    pub fn steps_for_round(&self, round: usize) -> usize {
        if round <= 1 {
            self.steps_round1
        } else {
            self.steps_later
        }
    }

    pub fn index_config(&self, seed: u64) -> IndexConfig {
        IndexConfig {
            partitions: self.n_partitions,
            default_probes: self.default_probes,
            seed,
        }
    }
}

/// Mentions × (1 + neg) entities per mention with one-hot targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingBatch {
    pub neg: usize,
    pub mention_ids: TokenBlock,
    pub entity_ids: TokenBlock,
    pub gold_columns: Vec<u32>,
}

impl TrainingBatch {
    pub fn size(&self) -> usize {
        self.mention_ids.rows()
    }

    pub fn width(&self) -> usize {
        self.mention_ids.width()
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.size();
        if self.entity_ids.rows() != b * (1 + self.neg) {
            return Err(Error::format(format!(
                "{} entity rows for {b} mentions with neg = {}",
                self.entity_ids.rows(),
                self.neg
            )));
        }
        if self.entity_ids.width() != self.mention_ids.width() {
            return Err(Error::format("mention and entity windows differ in width"));
        }
        if self.gold_columns.len() != b
            || self
                .gold_columns
                .iter()
                .enumerate()
                .any(|(i, &c)| c as usize != i * (1 + self.neg))
        {
            return Err(Error::format("gold columns do not follow the mention-major layout"));
        }
        Ok(())
    }

    /// One-hot target rows, `b × b(1+neg)`.
    pub fn targets(&self) -> Array2<f64> {
        let mut t = Array2::zeros((self.size(), self.entity_ids.rows()));
        for (i, &c) in self.gold_columns.iter().enumerate() {
            t[[i, c as usize]] = 1.0;
        }
        t
    }
}

/// Cosine similarities between every mention and every entity (rows are unit-norm).
pub fn similarity_matrix(mentions: &EmbeddingMatrix, entities: &EmbeddingMatrix) -> Result<Array2<f64>> {
    if mentions.dim() != entities.dim() {
        return Err(Error::argument(format!(
            "mention dim {} vs entity dim {}",
            mentions.dim(),
            entities.dim()
        )));
    }
    let mut s = Array2::zeros((mentions.len(), entities.len()));
    for i in 0..mentions.len() {
        for j in 0..entities.len() {
            s[[i, j]] = dot(mentions.row(i), entities.row(j));
        }
    }
    Ok(s)
}

/// `softmax(a · logits)` and the cross-entropy of `gold`, stabilized by max subtraction.
pub fn scaled_softmax_xent(logits: &[f64], gold: usize, a: f64) -> Result<(f64, Vec<f64>)> {
    if !(a > 0.0) {
        return Err(Error::argument("logit multiplier must be positive"));
    }
    if gold >= logits.len() {
        return Err(Error::argument(format!("gold {gold} outside {} logits", logits.len())));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite logit".into()));
    }
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(a * x));
    let exps: Vec<f64> = logits.iter().map(|&x| (a * x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (a * logits[gold] - max);
    Ok((loss, exps.into_iter().map(|e| e / sum).collect()))
}

/// Row-mean cross-entropy of a batch, without gradients.
pub fn batch_loss(params: &EncoderParams, batch: &TrainingBatch, a: f64) -> Result<f64> {
    let m = params.embed(&batch.mention_ids)?;
    let e = params.embed(&batch.entity_ids)?;
    let s = similarity_matrix(&m, &e)?;
    let mut total = 0.0;
    for (row, &gold) in s.axis_iter(Axis(0)).zip(&batch.gold_columns) {
        total += scaled_softmax_xent(row.as_slice().expect("row-major"), gold as usize, a)?.0;
    }
    Ok(total / batch.size() as f64)
}

/// Batch loss and its gradient with respect to the embedding table, added into `grad`.
///
/// `∂L/∂s_ij = a (p_ij − 1[j = gold_i]) / b`, pushed through the similarity matrix
/// to both embedding blocks and from there through the encoder.
pub fn accumulate_loss_gradient(
    params: &EncoderParams,
    batch: &TrainingBatch,
    a: f64,
    grad: &mut Array2<f64>,
) -> Result<f64> {
    batch.validate()?;
    let m = params.embed(&batch.mention_ids)?;
    let e = params.embed(&batch.entity_ids)?;
    let s = similarity_matrix(&m, &e)?;
    let b = batch.size() as f64;
    let mut upstream = Array2::zeros(s.raw_dim());
    let mut total = 0.0;
    for (i, (row, &gold)) in s.axis_iter(Axis(0)).zip(&batch.gold_columns).enumerate() {
        let (loss, probs) = scaled_softmax_xent(row.as_slice().expect("row-major"), gold as usize, a)?;
        total += loss;
        for (j, p) in probs.into_iter().enumerate() {
            let target = if j == gold as usize { 1.0 } else { 0.0 };
            upstream[[i, j]] = a * (p - target) / b;
        }
    }
    let d_mentions = upstream.dot(&e.view());
    let d_entities = upstream.t().dot(&m.view());
    params.accumulate_backward(&batch.mention_ids, d_mentions.view(), grad)?;
    params.accumulate_backward(&batch.entity_ids, d_entities.view(), grad)?;
    Ok(total / b)
}

pub fn batch_loss_and_grad(params: &EncoderParams, batch: &TrainingBatch, a: f64) -> Result<(f64, Array2<f64>)> {
    let mut grad = Array2::zeros(params.table().raw_dim());
    let loss = accumulate_loss_gradient(params, batch, a, &mut grad)?;
    Ok((loss, grad))
}

/// Adam moments for the embedding table.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
    scratch: Array2<f64>,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        let shape = params.table().raw_dim();
        AdamState {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
            scratch: Array2::zeros(shape),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &Array2<f64> {
        &self.m
    }

    pub fn second_moment(&self) -> &Array2<f64> {
        &self.v
    }

    /// One bias-corrected Adam update with `lr · decay^t`.
    fn apply(&mut self, params: &mut EncoderParams, grad: &Array2<f64>, cfg: &TrainConfig, decay: f64) {
        self.t += 1;
        let t = self.t as i32;
        let lr = cfg.lr * decay.powi(t);
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.eps);
        let dim = params.dim();
        let table = params.table_mut().as_slice_mut().expect("row-major");
        let m = self.m.as_slice_mut().expect("row-major");
        let v = self.v.as_slice_mut().expect("row-major");
        let g = grad.as_slice().expect("row-major");
        table
            .par_chunks_mut(dim * 256)
            .zip(m.par_chunks_mut(dim * 256))
            .zip(v.par_chunks_mut(dim * 256))
            .zip(g.par_chunks(dim * 256))
            .for_each(|(((p, m), v), g)| {
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            });
    }
}

/// One optimizer step on `batch`. Returns the batch's mean loss; on a non-finite
/// loss or gradient nothing is updated.
pub fn train_step(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
) -> Result<f64> {
    train_step_with_decay(params, adam, batch, cfg, cfg.decay)
}

fn train_step_with_decay(
    params: &mut EncoderParams,
    adam: &mut AdamState,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    decay: f64,
) -> Result<f64> {
    let mut grad = std::mem::replace(&mut adam.scratch, Array2::zeros((0, 0)));
    let result = accumulate_loss_gradient(params, batch, cfg.logit_multiplier, &mut grad);
    let touched: HashSet<u32> = batch
        .mention_ids
        .as_flat()
        .iter()
        .chain(batch.entity_ids.as_flat())
        .copied()
        .collect();
    let outcome = match result {
        Ok(loss) if !loss.is_finite() => Err(Error::Numeric(format!("batch loss is {loss}"))),
        Ok(loss) => {
            let finite = touched
                .iter()
                .all(|&id| grad.row(id as usize).iter().all(|x| x.is_finite()));
            if finite {
                adam.apply(params, &grad, cfg, decay);
                Ok(loss)
            } else {
                Err(Error::Numeric("non-finite gradient".into()))
            }
        }
        Err(e) => Err(e),
    };
    for id in touched {
        grad.row_mut(id as usize).fill(0.0);
    }
    adam.scratch = grad;
    outcome
}

/// Shape shared by every batch of an epoch file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpochShape {
    pub batch_size: usize,
    pub neg: usize,
    pub width: usize,
}

impl EpochShape {
    pub fn of(batch: &TrainingBatch) -> Self {
        EpochShape {
            batch_size: batch.size(),
            neg: batch.neg,
            width: batch.width(),
        }
    }
}

fn write_u32s<W: Write>(out: &mut W, values: impl IntoIterator<Item = u32>) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::argument(format!("{what} {n} exceeds 32 bits")))
}

/// Streams batches into a gzip epoch file.
///
/// Layout (little-endian `u32`): `b neg W n_batches`, then per batch the `b·W`
/// mention ids, the `b(1+neg)·W` entity ids and the `b` gold columns.
pub struct EpochWriter<W: Write> {
    inner: GzEncoder<W>,
    shape: EpochShape,
    expected: usize,
    written: usize,
}

impl<W: Write> EpochWriter<W> {
    pub fn new(out: W, shape: EpochShape, n_batches: usize) -> Result<Self> {
        let mut inner = GzEncoder::new(out, Compression::default());
        write_u32s(
            &mut inner,
            [
                to_u32(shape.batch_size, "batch size")?,
                to_u32(shape.neg, "neg")?,
                to_u32(shape.width, "width")?,
                to_u32(n_batches, "batch count")?,
            ],
        )?;
        Ok(EpochWriter {
            inner,
            shape,
            expected: n_batches,
            written: 0,
        })
    }

    pub fn push(&mut self, batch: &TrainingBatch) -> Result<()> {
        batch.validate()?;
        if EpochShape::of(batch) != self.shape {
            return Err(Error::argument("batch shape differs from the epoch header"));
        }
        if self.written == self.expected {
            return Err(Error::argument("more batches than the epoch header announced"));
        }
        write_u32s(&mut self.inner, batch.mention_ids.as_flat().iter().copied())?;
        write_u32s(&mut self.inner, batch.entity_ids.as_flat().iter().copied())?;
        write_u32s(&mut self.inner, batch.gold_columns.iter().copied())?;
        self.written += 1;
        Ok(())
    }

    pub fn finish(self) -> Result<W> {
        if self.written != self.expected {
            return Err(Error::argument(format!(
                "epoch announced {} batches, {} written",
                self.expected, self.written
            )));
        }
        Ok(self.inner.finish()?)
    }
}

/// Iterates the batches of a gzip epoch file.
pub struct EpochReader<R: Read> {
    inner: MultiGzDecoder<BufReader<R>>,
    shape: EpochShape,
    total: usize,
    read: usize,
}

impl<R: Read> EpochReader<R> {
    pub fn new(input: R) -> Result<Self> {
        let mut inner = MultiGzDecoder::new(BufReader::new(input));
        let mut header = [0u32; 4];
        read_u32s(&mut inner, &mut header).map_err(|_| Error::format("epoch header missing or corrupt"))?;
        let [b, neg, width, n] = header.map(|x| x as usize);
        if b == 0 || width == 0 {
            return Err(Error::format("epoch header has an empty batch shape"));
        }
        Ok(EpochReader {
            inner,
            shape: EpochShape {
                batch_size: b,
                neg,
                width,
            },
            total: n,
            read: 0,
        })
    }

    pub fn shape(&self) -> EpochShape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    fn read_batch(&mut self) -> Result<TrainingBatch> {
        let EpochShape {
            batch_size: b,
            neg,
            width: w,
        } = self.shape;
        let corrupt = |_| Error::format("epoch file truncated or corrupt");
        let mut mentions = vec![0u32; b * w];
        read_u32s(&mut self.inner, &mut mentions).map_err(corrupt)?;
        let mut entities = vec![0u32; b * (1 + neg) * w];
        read_u32s(&mut self.inner, &mut entities).map_err(corrupt)?;
        let mut gold_columns = vec![0u32; b];
        read_u32s(&mut self.inner, &mut gold_columns).map_err(corrupt)?;
        let batch = TrainingBatch {
            neg,
            mention_ids: TokenBlock::from_flat(w, mentions)?,
            entity_ids: TokenBlock::from_flat(w, entities)?,
            gold_columns,
        };
        batch.validate()?;
        Ok(batch)
    }
}

impl<R: Read> Iterator for EpochReader<R> {
    type Item = Result<TrainingBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.read == self.total {
            return None;
        }
        self.read += 1;
        let batch = self.read_batch();
        if batch.is_err() {
            self.read = self.total;
        }
        Some(batch)
    }
}

fn read_u32s<R: Read>(input: &mut R, out: &mut [u32]) -> std::io::Result<()> {
    let mut bytes = vec![0u8; out.len() * 4];
    input.read_exact(&mut bytes)?;
    for (o, c) in out.iter_mut().zip(bytes.chunks_exact(4)) {
        *o = u32::from_le_bytes(c.try_into().expect("4 bytes"));
    }
    Ok(())
}

pub fn save_epoch<W: Write>(out: W, shape: EpochShape, batches: &[TrainingBatch]) -> Result<W> {
    let mut writer = EpochWriter::new(out, shape, batches.len())?;
    for b in batches {
        writer.push(b)?;
    }
    writer.finish()
}

pub fn load_epoch<R: Read>(input: R) -> Result<(EpochShape, Vec<TrainingBatch>)> {
    let reader = EpochReader::new(input)?;
    let shape = reader.shape();
    let batches = reader.collect::<Result<_>>()?;
    Ok((shape, batches))
}

/// Training mention reduced to what batch generation needs.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub window: Vec<u32>,
    pub gold: Qid,
}

/// Windows for every mention that has at least one token.
pub fn prepare_examples(mentions: &[Mention], width: usize, vocab: Vocabulary) -> Result<Vec<TrainingExample>> {
    let windows: Vec<_> = mentions
        .par_iter()
        .map(|m| mention_window(m, width, vocab))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(mentions.len());
    for (m, w) in mentions.iter().zip(windows) {
        match w {
            Some(w) => out.push(TrainingExample {
                window: w.ids,
                gold: m.gold_qid,
            }),
            None => log::warn!("mention {:?} in {} has no tokens; skipped", m.surface, m.doc_id),
        }
    }
    Ok(out)
}

/// Uniform sampling without replacement within a pass, reshuffled every pass.
pub struct MentionSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl MentionSampler {
    pub fn new(eligible: Vec<usize>, seed: u64) -> Result<Self> {
        if eligible.is_empty() {
            return Err(Error::argument("no training mentions to sample"));
        }
        let mut sampler = MentionSampler {
            order: eligible,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        sampler.order.shuffle(&mut sampler.rng);
        Ok(sampler)
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Builds one batch: windows of the sampled mentions, their positives from the
/// index payload and hard negatives mined with the mention embeddings.
pub fn build_batch(
    examples: &[&TrainingExample],
    index: &SearchIndex,
    params: &EncoderParams,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingBatch> {
    let width = cfg.context_size;
    let mention_ids = TokenBlock::from_rows(width, examples.iter().map(|e| &e.window))?;
    let embedded = params.embed(&mention_ids)?;
    let mut entity_ids = TokenBlock::new(width);
    for (i, ex) in examples.iter().enumerate() {
        let row = index
            .row_of(ex.gold)
            .ok_or_else(|| Error::argument(format!("gold {} is not in the index", ex.gold)))?;
        let positive = index
            .tokens(row)
            .ok_or_else(|| Error::argument("index has no token payload"))?;
        entity_ids.push(positive)?;
        let negatives = index.query_negatives(embedded.row(i), ex.gold, cfg.neg, cfg.retrieval_k, None, rng)?;
        for hit in negatives {
            entity_ids.push(index.tokens(hit.row).expect("payload checked above"))?;
        }
    }
    let batch = TrainingBatch {
        neg: cfg.neg,
        mention_ids,
        entity_ids,
        gold_columns: (0..examples.len()).map(|i| (i * (1 + cfg.neg)) as u32).collect(),
    };
    batch.validate()?;
    Ok(batch)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Index = 2,
    Sampler = 3,
    Negatives = 4,
}

fn derive_seed(seed: u64, round: usize, stream: Stream) -> u64 {
    splitmix64(splitmix64(seed ^ (round as u64).rotate_left(32)) ^ stream as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub final_loss: f64,
}

impl fmt::Display for RoundSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "round {}: {} steps, mean loss {:.4}, last loss {:.4}",
            self.round, self.steps, self.mean_loss, self.final_loss
        )
    }
}

/// Everything a fine-tuning run needs besides the encoder itself.
pub struct Finetuner<'a> {
    cfg: TrainConfig,
    kb_qids: Vec<Qid>,
    kb_tokens: TokenBlock,
    examples: Vec<TrainingExample>,
    eval: Option<&'a EvalSet>,
    ks: Vec<usize>,
}

impl<'a> Finetuner<'a> {
    pub fn new(
        cfg: TrainConfig,
        entities: &[&Entity],
        train_mentions: &[Mention],
        eval: Option<&'a EvalSet>,
        ks: &[usize],
    ) -> Result<Self> {
        cfg.validate()?;
        if ks.is_empty() {
            return Err(Error::argument("no K values requested"));
        }
        let vocab = cfg.vocab();
        let (kb_qids, kb_tokens) = description_block(entities, cfg.context_size, vocab)?;
        if kb_qids.len() <= cfg.neg {
            return Err(Error::InsufficientNegatives {
                available: kb_qids.len().saturating_sub(1),
                requested: cfg.neg,
            });
        }
        let examples = prepare_examples(train_mentions, cfg.context_size, vocab)?;
        Ok(Finetuner {
            cfg,
            kb_qids,
            kb_tokens,
            examples,
            eval,
            ks: ks.to_vec(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Freshly initialized encoder for this run's seed.
    pub fn initial_params(&self) -> Result<EncoderParams> {
        initial_params(&self.cfg)
    }

    pub fn evaluate(&self, params: &EncoderParams, round: usize) -> Result<EvalReport> {
        let eval = self
            .eval
            .ok_or_else(|| Error::argument("no evaluation set was given"))?;
        eval.evaluate(
            params,
            &self.ks,
            self.cfg
                .index_config(derive_seed(self.cfg.seed, round, Stream::Index) ^ 1),
        )
    }

    /// Index over the entity descriptions embedded with `params`.
    pub fn build_round_index(&self, params: &EncoderParams, round: usize) -> Result<SearchIndex> {
        let embedded = params.embed(&self.kb_tokens)?;
        SearchIndex::build(
            embedded,
            self.kb_qids.clone(),
            Some(self.kb_tokens.clone()),
            self.cfg.index_config(derive_seed(self.cfg.seed, round, Stream::Index)),
        )
    }

    /// Runs one round: index, batch generation and training. Batches are written to
    /// `epoch_out` (when given) in the order they are trained on.
    pub fn run_round<W: Write>(
        &self,
        round: usize,
        params: &mut EncoderParams,
        epoch_out: Option<W>,
    ) -> Result<RoundSummary> {
        self.execute_round(round, params, epoch_out, true)
    }

    /// Generates and writes the epoch of `round` without training on it.
    pub fn generate_epoch<W: Write>(&self, round: usize, params: &EncoderParams, out: W) -> Result<usize> {
        let mut scratch = params.clone();
        Ok(self.execute_round(round, &mut scratch, Some(out), false)?.steps)
    }

    fn execute_round<W: Write>(
        &self,
        round: usize,
        params: &mut EncoderParams,
        epoch_out: Option<W>,
        train: bool,
    ) -> Result<RoundSummary> {
        let cfg = &self.cfg;
        let steps = cfg.steps_for_round(round);
        let frozen = params.clone();
        let index = self.build_round_index(&frozen, round)?;
        let eligible: Vec<usize> = (0..self.examples.len())
            .filter(|&i| index.row_of(self.examples[i].gold).is_some())
            .collect();
        let skipped = self.examples.len() - eligible.len();
        if skipped > 0 {
            log::warn!("round {round}: {skipped} training mentions have no indexed gold; resampling around them");
        }
        let mut sampler = MentionSampler::new(eligible, derive_seed(cfg.seed, round, Stream::Sampler))?;
        let shape = EpochShape {
            batch_size: cfg.batch_size,
            neg: cfg.neg,
            width: cfg.context_size,
        };
        let mut writer = epoch_out.map(|w| EpochWriter::new(w, shape, steps)).transpose()?;
        let decay = if cfg.decay_last_round_only && round != cfg.rounds {
            1.0
        } else {
            cfg.decay
        };
        let negative_seed = derive_seed(cfg.seed, round, Stream::Negatives);
        let mut adam = AdamState::new(params);
        let mut total_loss = 0.0;
        let mut last_loss = f64::NAN;
        let mut done = 0;
        while done < steps {
            let chunk = GENERATION_CHUNK.min(steps - done);
            let picks: Vec<Vec<usize>> = (0..chunk)
                .map(|_| (0..cfg.batch_size).map(|_| sampler.next_index()).collect())
                .collect();
            let batches: Vec<TrainingBatch> = picks
                .par_iter()
                .enumerate()
                .map(|(offset, pick)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(negative_seed);
                    rng.set_stream((done + offset) as u64);
                    let examples: Vec<&TrainingExample> = pick.iter().map(|&i| &self.examples[i]).collect();
                    build_batch(&examples, &index, &frozen, cfg, &mut rng)
                })
                .collect::<Result<_>>()?;
            for batch in &batches {
                if let Some(w) = writer.as_mut() {
                    w.push(batch)?;
                }
                if train {
                    let loss = train_step_with_decay(params, &mut adam, batch, cfg, decay)?;
                    total_loss += loss;
                    last_loss = loss;
                }
            }
            done += chunk;
            if done % 1000 < chunk {
                log::info!("round {round}: step {done}/{steps}, loss {last_loss:.4}");
            }
        }
        if let Some(w) = writer {
            w.finish()?;
        }
        Ok(RoundSummary {
            round,
            steps,
            mean_loss: if steps == 0 || !train { f64::NAN } else { total_loss / steps as f64 },
            final_loss: last_loss,
        })
    }

    /// Evaluates the untrained encoder as round 0 (unless resuming), then runs
    /// rounds `start..=rounds`. `on_round` sees every report as soon as it exists,
    /// so a failing round leaves the earlier ones with the caller.
    pub fn run<F>(&self, params: &mut EncoderParams, start: usize, mut on_round: F) -> Result<Vec<EvalReport>>
    where
        F: FnMut(usize, &EncoderParams, &EvalReport, Option<&RoundSummary>) -> Result<()>,
    {
        self.run_with_epochs(params, start, |_| Ok(None::<std::io::Sink>), &mut on_round)
    }

    /// Like [`run`](Self::run), with an epoch sink opened per round.
    pub fn run_with_epochs<W, O, F>(
        &self,
        params: &mut EncoderParams,
        start: usize,
        mut open_epoch: O,
        on_round: &mut F,
    ) -> Result<Vec<EvalReport>>
    where
        W: Write,
        O: FnMut(usize) -> Result<Option<W>>,
        F: FnMut(usize, &EncoderParams, &EvalReport, Option<&RoundSummary>) -> Result<()>,
    {
        let mut reports = Vec::new();
        if start == 0 {
            let report = self.evaluate(params, 0)?;
            on_round(0, params, &report, None)?;
            reports.push(report);
        }
        for round in start.max(1)..=self.cfg.rounds {
            let summary = self.run_round(round, params, open_epoch(round)?)?;
            log::info!("{summary}");
            let report = self.evaluate(params, round)?;
            on_round(round, params, &report, Some(&summary))?;
            reports.push(report);
        }
        Ok(reports)
    }
}

/// Encoder initialized from the seed of `cfg`.
pub fn initial_params(cfg: &TrainConfig) -> Result<EncoderParams> {
    EncoderParams::init(cfg.vocab_size as usize, cfg.dim, derive_seed(cfg.seed, 0, Stream::Init))
}

/// Fine-tunes a fresh encoder and returns it with the reports of rounds `0..=rounds`.
pub fn run_finetuning(
    entities: &[&Entity],
    train_mentions: &[Mention],
    cfg: &TrainConfig,
    eval: &EvalSet,
    ks: &[usize],
) -> Result<(EncoderParams, Vec<EvalReport>)> {
    let tuner = Finetuner::new(cfg.clone(), entities, train_mentions, Some(eval), ks)?;
    let mut params = tuner.initial_params()?;
    let reports = tuner.run(&mut params, 0, |_, _, _, _| Ok(()))?;
    Ok((params, reports))
}
