//! Shared mention/entity encoder: token lookup, mean pooling over non-PAD positions,
//! L2 normalization. Small enough that its gradient is written out by hand.

use std::io::{BufRead, Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kb::Qid;
use crate::tokenizer::{TokenBlock, PAD};

pub const DEFAULT_DIM: usize = 32;
const INIT_RANGE: f64 = 0.05;
const CHECKPOINT_MAGIC: &[u8; 8] = b"LLENC001";

/// Token embedding table, `vocab_size × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    table: Array2<f64>,
}

impl EncoderParams {
    /// I.i.d. uniform initialization in `[-0.05, 0.05]`.
    pub fn init(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size == 0 || dim == 0 {
            return Err(Error::argument("encoder needs a non-empty table"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
        let table = Array2::from_shape_simple_fn((vocab_size, dim), || dist.sample(&mut rng));
        Ok(EncoderParams { table })
    }

    pub fn from_table(table: Array2<f64>) -> Result<Self> {
        if table.is_empty() {
            return Err(Error::argument("encoder needs a non-empty table"));
        }
        if table.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite encoder parameter".into()));
        }
        Ok(EncoderParams {
            table: table.as_standard_layout().into_owned(),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.table.nrows()
    }

    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn table_mut(&mut self) -> &mut Array2<f64> {
        &mut self.table
    }

    fn check_ids(&self, batch: &TokenBlock) -> Result<()> {
        let v = self.vocab_size();
        match batch.as_flat().iter().find(|&&id| id as usize >= v) {
            Some(id) => Err(Error::argument(format!("token id {id} >= vocabulary size {v}"))),
            None => Ok(()),
        }
    }

    /// Unnormalized mean of the contributing rows and the number of contributors.
    fn pool(&self, ids: &[u32], out: &mut [f64]) -> usize {
        out.fill(0.0);
        let mut count = 0;
        for &id in ids.iter().filter(|&&id| id != PAD) {
            for (o, t) in out.iter_mut().zip(self.table.row(id as usize)) {
                *o += t;
            }
            count += 1;
        }
        if count == 0 {
            // All padding: the PAD embedding stands in for the row.
            out.copy_from_slice(self.table.row(PAD as usize).as_slice().expect("row-major"));
            return 1;
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        count
    }

    /// Embeds every row of `batch` into a unit vector.
    pub fn embed(&self, batch: &TokenBlock) -> Result<EmbeddingMatrix> {
        self.check_ids(batch)?;
        let d = self.dim();
        let mut out = vec![0.0; batch.rows() * d];
        let failures: usize = out
            .par_chunks_mut(d)
            .zip(batch.iter().collect::<Vec<_>>().into_par_iter())
            .map(|(row, ids)| {
                self.pool(ids, row);
                let norm = l2(row);
                if norm > 0.0 && norm.is_finite() {
                    row.iter_mut().for_each(|x| *x /= norm);
                    0
                } else {
                    1
                }
            })
            .sum();
        if failures > 0 {
            return Err(Error::Numeric(format!("{failures} pooled rows have zero or non-finite norm")));
        }
        Ok(EmbeddingMatrix {
            rows: Array2::from_shape_vec((batch.rows(), d), out).expect("shape"),
        })
    }

    /// Gradient of `sum(upstream ⊙ embed(batch))` with respect to the table.
    ///
    /// Per row: `g_y = (I - ŷŷᵀ) g / ‖y‖`, then `g_y / count` is added to every
    /// contributing table row.
    pub fn embed_backward(&self, batch: &TokenBlock, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut grad = Array2::zeros(self.table.raw_dim());
        self.accumulate_backward(batch, upstream, &mut grad)?;
        Ok(grad)
    }

    /// Same as [`embed_backward`](Self::embed_backward) but adds into `grad`.
    pub fn accumulate_backward(
        &self,
        batch: &TokenBlock,
        upstream: ArrayView2<f64>,
        grad: &mut Array2<f64>,
    ) -> Result<()> {
        let d = self.dim();
        if upstream.nrows() != batch.rows() || upstream.ncols() != d {
            return Err(Error::argument(format!(
                "upstream {:?} does not match {} rows of dim {d}",
                upstream.shape(),
                batch.rows()
            )));
        }
        if grad.shape() != self.table.shape() {
            return Err(Error::argument("gradient buffer does not match the table"));
        }
        self.check_ids(batch)?;
        let mut y = vec![0.0; d];
        let mut gy = vec![0.0; d];
        for (ids, g) in batch.iter().zip(upstream.axis_iter(Axis(0))) {
            let count = self.pool(ids, &mut y);
            let norm = l2(&y);
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric("pooled row has zero norm".into()));
            }
            // ŷ·g, with ŷ = y / ‖y‖.
            let proj: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / norm;
            let scale = 1.0 / (norm * count as f64);
            for ((out, &yi), &gi) in gy.iter_mut().zip(&y).zip(g) {
                *out = (gi - proj * yi / norm) * scale;
            }
            if ids.iter().all(|&id| id == PAD) {
                add_row(grad, PAD as usize, &gy, 1.0);
            } else {
                for &id in ids.iter().filter(|&&id| id != PAD) {
                    add_row(grad, id as usize, &gy, 1.0);
                }
            }
        }
        Ok(())
    }

    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&(self.vocab_size() as u32).to_le_bytes())?;
        out.write_all(&(self.dim() as u32).to_le_bytes())?;
        for x in self.table.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not an encoder checkpoint"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word)?;
        let v = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word)?;
        let d = u32::from_le_bytes(word) as usize;
        let mut bytes = vec![0u8; v * d * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|_| Error::format("truncated encoder checkpoint"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let table = Array2::from_shape_vec((v, d), data).map_err(|e| Error::format(e.to_string()))?;
        EncoderParams::from_table(table)
    }
}

fn add_row(grad: &mut Array2<f64>, row: usize, values: &[f64], weight: f64) {
    for (g, v) in grad.row_mut(row).iter_mut().zip(values) {
        *g += weight * v;
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product summed left to right. Search and scoring share this so that
/// exact results are reproducible bit for bit.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

const UNIT_TOLERANCE: f64 = 1e-6;

/// Rows of unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: Array2<f64>,
}

impl EmbeddingMatrix {
    /// Normalizes every row; zero or non-finite rows are rejected.
    pub fn normalized(mut rows: Array2<f64>) -> Result<Self> {
        for (i, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::Numeric(format!("row {i} cannot be normalized")));
            }
            row.mapv_inplace(|x| x / norm);
        }
        Ok(EmbeddingMatrix {
            rows: rows.as_standard_layout().into_owned(),
        })
    }

    /// Wraps rows that must already be unit-norm within 1e-6.
    pub fn from_unit_rows(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.axis_iter(Axis(0)).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::argument(format!("row {i} has norm {norm}")));
            }
        }
        Ok(EmbeddingMatrix {
            rows: rows.as_standard_layout().into_owned(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i).to_slice().expect("row-major")
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn row_view(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.rows
    }
}

/// Writes `n d` followed by `Qn<TAB>v1 v2 …` lines.
pub fn write_embeddings<W: Write>(mut out: W, embeddings: &EmbeddingMatrix, qids: &[Qid]) -> Result<()> {
    if qids.len() != embeddings.len() {
        return Err(Error::argument("one qid per embedding row required"));
    }
    writeln!(out, "{} {}", embeddings.len(), embeddings.dim())?;
    for (i, qid) in qids.iter().enumerate() {
        let cells: Vec<String> = embeddings.row(i).iter().map(|x| x.to_string()).collect();
        writeln!(out, "{qid}\t{}", cells.join(" "))?;
    }
    Ok(())
}

/// Reads an embedding file; rows are re-normalized and keep their order.
pub fn read_embeddings<R: BufRead>(input: R) -> Result<(EmbeddingMatrix, Vec<Qid>)> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| Error::format("missing header"))??;
    let mut parts = header.split_whitespace();
    let (n, d) = match (parts.next(), parts.next(), parts.next()) {
        (Some(n), Some(d), None) => (
            n.parse::<usize>().map_err(|_| Error::format("bad row count"))?,
            d.parse::<usize>().map_err(|_| Error::format("bad dimension"))?,
        ),
        _ => return Err(Error::format(format!("bad header {header:?}"))),
    };
    let mut data = Vec::with_capacity(n * d);
    let mut qids = Vec::with_capacity(n);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (q, vals) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("row {}: missing tab", i + 1)))?;
        qids.push(q.parse::<Qid>()?);
        let before = data.len();
        for v in vals.split_whitespace() {
            data.push(
                v.parse::<f64>()
                    .map_err(|_| Error::format(format!("row {}: bad float {v:?}", i + 1)))?,
            );
        }
        if data.len() - before != d {
            return Err(Error::format(format!(
                "row {} has {} values, header says {d}",
                i + 1,
                data.len() - before
            )));
        }
    }
    if qids.len() != n {
        return Err(Error::format(format!("header says {n} rows, found {}", qids.len())));
    }
    let rows = Array2::from_shape_vec((n, d), data).map_err(|e| Error::format(e.to_string()))?;
    Ok((EmbeddingMatrix::normalized(rows)?, qids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn block(width: usize, rows: &[&[u32]]) -> TokenBlock {
        TokenBlock::from_rows(width, rows.iter()).unwrap()
    }

    #[test]
    fn single_token_is_normalized_row() {
        let p = EncoderParams::init(11, 5, 3).unwrap();
        let e = p.embed(&block(4, &[&[0, 7, 0, 0]])).unwrap();
        let t = p.table().row(7);
        let norm = t.dot(&t).sqrt();
        for (a, b) in e.row(0).iter().zip(t.iter()) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_embed_identically() {
        let p = EncoderParams::init(11, 5, 3).unwrap();
        let e = p.embed(&block(3, &[&[2, 3, 4], &[2, 3, 4]])).unwrap();
        assert_eq!(e.row(0), e.row(1));
        assert!((dot(e.row(0), e.row(1)) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn all_pad_row_uses_pad_embedding() {
        let p = EncoderParams::init(11, 5, 3).unwrap();
        let e = p.embed(&block(3, &[&[0, 0, 0]])).unwrap();
        let t = p.table().row(0);
        let norm = t.dot(&t).sqrt();
        assert!((e.row(0)[0] - t[0] / norm).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_id_rejected() {
        let p = EncoderParams::init(11, 5, 3).unwrap();
        assert!(matches!(p.embed(&block(2, &[&[1, 11]])), Err(Error::Argument(_))));
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let p = EncoderParams::init(11, 5, 3).unwrap();
        let b = block(4, &[&[1, 2, 3, 0], &[4, 4, 0, 0]]);
        let g = p.embed_backward(&b, Array2::zeros((2, 5)).view()).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn upstream_along_output_has_no_effect() {
        let p = EncoderParams::init(11, 5, 3).unwrap();
        let b = block(4, &[&[0, 6, 0, 0]]);
        let e = p.embed(&b).unwrap();
        let g = p.embed_backward(&b, e.view()).unwrap();
        assert!(g.iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn backward_shape_mismatch() {
        let p = EncoderParams::init(11, 5, 3).unwrap();
        let b = block(2, &[&[1, 2]]);
        assert!(p.embed_backward(&b, Array2::zeros((2, 5)).view()).is_err());
        assert!(p.embed_backward(&b, Array2::zeros((1, 4)).view()).is_err());
    }

    #[test]
    fn embedding_file_round_trip() {
        let rows = array![[1.0, 2.0, 3.0, 4.0], [0.5, -0.25, 0.125, 1e-3]];
        let m = EmbeddingMatrix::normalized(rows).unwrap();
        let qids = vec![Qid::new(1).unwrap(), Qid::new(77).unwrap()];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &m, &qids).unwrap();
        let (back, back_qids) = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!(back_qids, qids);
        for i in 0..2 {
            for (a, b) in back.row(i).iter().zip(m.row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn loading_renormalizes() {
        let text = "2 4\nQ1\t1 0 0 0\nQ2\t3 0 4 0\n";
        let (m, _) = read_embeddings(text.as_bytes()).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.dim(), 4);
        assert!((m.row(1)[0] - 0.6).abs() < 1e-12);
        assert!((m.row(1)[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ragged_file_rejected() {
        assert!(read_embeddings("2 4\nQ1\t1 0 0 0\nQ2\t3 0 4\n".as_bytes()).is_err());
        assert!(read_embeddings("3 4\nQ1\t1 0 0 0\n".as_bytes()).is_err());
        assert!(read_embeddings("".as_bytes()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = EncoderParams::init(7, 3, 9).unwrap();
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(EncoderParams::read_checkpoint(buf.as_slice()).unwrap(), p);
        assert!(EncoderParams::read_checkpoint(&buf[..20]).is_err());
    }
}
