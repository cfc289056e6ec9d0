//! Hashing tokenizer and the two input layouts fed to the encoder.
//!
//! Entity descriptions are laid out as `[M] label [M] body…` and mentions as a
//! window of context with `[M]` around the mention, centered where the document allows.

use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const MENTION_MARK: u32 = 1;
const RESERVED: u32 = 2;

pub const DEFAULT_VOCAB_SIZE: u32 = 65_536;
pub const DEFAULT_CONTEXT_SIZE: usize = 64;

/// Token id space: two reserved ids followed by `size - 2` hash buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocabulary {
    size: u32,
}

impl Vocabulary {
    pub fn new(size: u32) -> Result<Self> {
        if size <= RESERVED {
            return Err(Error::argument(format!("vocabulary size {size} leaves no content ids")));
        }
        Ok(Vocabulary { size })
    }

    pub fn size(self) -> u32 {
        self.size
    }

    pub fn token_id(self, token: &str) -> u32 {
        RESERVED + (fnv1a64(token.as_bytes()) % u64::from(self.size - RESERVED)) as u32
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            size: DEFAULT_VOCAB_SIZE,
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Tokens of one text with the character span each one covers.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedDoc {
    pub ids: Vec<u32>,
    pub spans: Vec<(usize, usize)>,
}

impl TokenizedDoc {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Tokens intersecting the character span `[start, end)`, as a token range.
    pub fn token_range(&self, start: usize, end: usize) -> Option<(usize, usize)> {
        let first = self.spans.iter().position(|&(s, e)| s < end && e > start)?;
        let last = self.spans[first..]
            .iter()
            .take_while(|&&(s, _)| s < end)
            .count();
        Some((first, first + last))
    }
}

fn is_punctuation(c: char) -> bool {
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
    )
}

/// Splits on whitespace, then splits maximal punctuation runs into their own tokens.
pub fn tokenize(text: &str, vocab: Vocabulary) -> TokenizedDoc {
    let mut doc = TokenizedDoc::default();
    // (char offset, byte offset) where the current token began, and whether it is punctuation.
    let mut current: Option<(usize, usize, bool)> = None;
    let flush = |doc: &mut TokenizedDoc, from: (usize, usize), to: (usize, usize)| {
        doc.ids.push(vocab.token_id(&text[from.1..to.1]));
        doc.spans.push((from.0, to.0));
    };
    let mut n_chars = 0;
    for (ci, (bi, c)) in text.char_indices().enumerate() {
        n_chars = ci + 1;
        if c.is_whitespace() {
            if let Some((cs, bs, _)) = current.take() {
                flush(&mut doc, (cs, bs), (ci, bi));
            }
            continue;
        }
        let punct = is_punctuation(c);
        match current {
            Some((_, _, p)) if p == punct => {}
            Some((cs, bs, _)) => {
                flush(&mut doc, (cs, bs), (ci, bi));
                current = Some((ci, bi, punct));
            }
            None => current = Some((ci, bi, punct)),
        }
    }
    if let Some((cs, bs, _)) = current {
        flush(&mut doc, (cs, bs), (n_chars, text.len()));
    }
    doc
}

fn check_window(width: usize) -> Result<()> {
    if width < 3 {
        return Err(Error::argument(format!("window length {width} < 3")));
    }
    Ok(())
}

/// `[M] label [M] body…`, truncated and right-padded to exactly `width` ids.
pub fn compose_description(label: &str, body: &str, width: usize, vocab: Vocabulary) -> Result<Vec<u32>> {
    check_window(width)?;
    let mut ids = Vec::with_capacity(width);
    ids.push(MENTION_MARK);
    ids.extend(tokenize(label, vocab).ids.into_iter().take(width - 2));
    ids.push(MENTION_MARK);
    ids.extend(tokenize(body, vocab).ids);
    ids.truncate(width);
    ids.resize(width, PAD);
    Ok(ids)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MentionWindow {
    pub ids: Vec<u32>,
    /// The mention was longer than the window and the closing `[M]` fell off.
    pub truncated: bool,
}

/// Context window around the mention at character span `span`.
///
/// The `width - 2` content slots are split evenly around the mention; a side that
/// runs into the document boundary hands its unused budget to the other side.
pub fn extract_mention_window(
    doc: &TokenizedDoc,
    span: (usize, usize),
    width: usize,
) -> Result<MentionWindow> {
    check_window(width)?;
    let (s, e) = doc
        .token_range(span.0, span.1)
        .ok_or_else(|| Error::argument(format!("span {span:?} covers no tokens")))?;
    let slots = width - 2;
    let mention_len = e - s;
    if mention_len > slots {
        let mut ids = Vec::with_capacity(width);
        ids.push(MENTION_MARK);
        ids.extend_from_slice(&doc.ids[s..s + width - 1]);
        return Ok(MentionWindow {
            ids,
            truncated: true,
        });
    }
    let budget = slots - mention_len;
    let avail_left = s;
    let avail_right = doc.len() - e;
    let mut left = (budget / 2).min(avail_left);
    let mut right = (budget - budget / 2).min(avail_right);
    let spare = budget - left - right;
    let extra_right = spare.min(avail_right - right);
    right += extra_right;
    left += (spare - extra_right).min(avail_left - left);

    let mut ids = Vec::with_capacity(width);
    ids.extend_from_slice(&doc.ids[s - left..s]);
    ids.push(MENTION_MARK);
    ids.extend_from_slice(&doc.ids[s..e]);
    ids.push(MENTION_MARK);
    ids.extend_from_slice(&doc.ids[e..e + right]);
    ids.resize(width, PAD);
    Ok(MentionWindow {
        ids,
        truncated: false,
    })
}

/// Dense `rows × width` block of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenBlock {
    width: usize,
    ids: Vec<u32>,
}

impl TokenBlock {
    pub fn new(width: usize) -> Self {
        TokenBlock {
            width,
            ids: Vec::new(),
        }
    }

    pub fn from_flat(width: usize, ids: Vec<u32>) -> Result<Self> {
        if width == 0 || !ids.len().is_multiple_of(width) {
            return Err(Error::argument(format!(
                "{} ids do not form rows of width {width}",
                ids.len()
            )));
        }
        Ok(TokenBlock { width, ids })
    }

    pub fn from_rows<I, R>(width: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[u32]>,
    {
        let mut block = TokenBlock::new(width);
        for row in rows {
            block.push(row.as_ref())?;
        }
        Ok(block)
    }

    pub fn push(&mut self, row: &[u32]) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::argument(format!(
                "row of {} ids in a block of width {}",
                row.len(),
                self.width
            )));
        }
        self.ids.extend_from_slice(row);
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.ids.len() / self.width
        }
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.width..(i + 1) * self.width]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        self.ids.chunks_exact(self.width.max(1))
    }

    pub fn as_flat(&self) -> &[u32] {
        &self.ids
    }
}
