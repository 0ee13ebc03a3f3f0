//! Word-level corpus handling: vocabulary, encoding, batching, windows.
//!
//! Text is whitespace-tokenized one sentence per line; every newline becomes
//! an end-of-sentence token. The vocabulary is built from the training split
//! only, ordered by descending frequency with ties broken lexicographically,
//! so identical text always produces identical ids.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const UNK_TOKEN: &str = "<unk>";
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corpus too short: {tokens} tokens cannot fill {batch_size} rows of at least 2")]
    TooShort { tokens: usize, batch_size: usize },
    #[error("empty vocabulary: training text contained no tokens")]
    EmptyVocab,
}

/// Token ids, dense from 0. `<unk>` is id 0 and `<eos>` id 1; literal
/// occurrences of either string in text map to the special id instead of
/// being duplicated.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub const UNK: u32 = 0;
    pub const EOS: u32 = 1;

    /// Builds from training text. `max_size` caps the vocabulary (including
    /// the two specials); everything rarer maps to `<unk>`.
    pub fn build(train_text: &str, max_size: Option<usize>) -> Result<Vocab, DataError> {
        let mut counts: HashMap<&str, u64> = HashMap::new();
        let mut any = false;
        for line in train_text.lines() {
            for tok in line.split_whitespace() {
                any = true;
                if tok != UNK_TOKEN && tok != EOS_TOKEN {
                    *counts.entry(tok).or_insert(0) += 1;
                }
            }
        }
        if !any {
            return Err(DataError::EmptyVocab);
        }
        let mut ordered: Vec<(&str, u64)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            ordered.truncate(cap.saturating_sub(2));
        }

        let mut tokens = vec![UNK_TOKEN.to_string(), EOS_TOKEN.to_string()];
        tokens.extend(ordered.into_iter().map(|(t, _)| t.to_string()));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn lookup(&self, tok: &str) -> u32 {
        self.index.get(tok).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    /// Whitespace tokens per line, each line closed by `<eos>`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for line in text.lines() {
            for tok in line.split_whitespace() {
                ids.push(self.lookup(tok));
            }
            ids.push(Self::EOS);
        }
        ids
    }

    /// Inverse of `encode` up to `<unk>` substitution: `<eos>` becomes a
    /// newline, other ids their token.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        let mut line_start = true;
        for &id in ids {
            if id == Self::EOS {
                out.push('\n');
                line_start = true;
            } else {
                if !line_start {
                    out.push(' ');
                }
                out.push_str(self.token(id));
                line_start = false;
            }
        }
        out
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = fs::File::create(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|source| DataError::Io {
                path: path.display().to_string(),
                source,
            })?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < 2 || tokens[0] != UNK_TOKEN || tokens[1] != EOS_TOKEN {
            return Err(DataError::EmptyVocab);
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab { tokens, index })
    }

    /// FNV-1a over the ordered token list; stored in checkpoints so a model
    /// is never evaluated against a different vocabulary.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xCBF2_9CE4_8422_2325u64;
        for t in &self.tokens {
            for &b in t.as_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
            h ^= 0xFF;
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        h
    }
}

impl fmt::Display for Vocab {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vocab of {} tokens", self.tokens.len())
    }
}

/// Token stream cut into `batch_size` contiguous rows of equal length; the
/// remainder after `len / batch_size` per row is dropped.
#[derive(Clone, Debug)]
pub struct Batched {
    pub rows: Vec<Vec<u32>>,
}

pub fn batchify(ids: &[u32], batch_size: usize) -> Result<Batched, DataError> {
    assert!(batch_size > 0, "batchify: batch_size must be positive");
    let row_len = ids.len() / batch_size;
    if row_len < 2 {
        return Err(DataError::TooShort { tokens: ids.len(), batch_size });
    }
    let rows = (0..batch_size)
        .map(|b| ids[b * row_len..(b + 1) * row_len].to_vec())
        .collect();
    Ok(Batched { rows })
}

impl Batched {
    pub fn row_len(&self) -> usize {
        self.rows[0].len()
    }
}

/// (start, length) spans for truncated windows over a row: inputs are
/// `[start, start+len)` and targets the same span shifted by one. The final
/// window is short if fewer than `bptt_len` predictions remain; a span is
/// only emitted if at least one prediction exists.
pub fn window_spans(row_len: usize, bptt_len: usize) -> Vec<(usize, usize)> {
    assert!(bptt_len > 0, "window_spans: bptt_len must be positive");
    let mut spans = Vec::new();
    let mut t = 0;
    while t + 1 < row_len {
        let len = bptt_len.min(row_len - 1 - t);
        spans.push((t, len));
        t += len;
    }
    spans
}

/// Perplexity of the add-one-smoothed unigram distribution fit on the
/// training ids, scored on the evaluation ids. The memoryless baseline any
/// sequence model has to beat.
pub fn unigram_perplexity(train_ids: &[u32], eval_ids: &[u32], vocab_size: usize) -> f64 {
    let mut counts = vec![0u64; vocab_size];
    for &id in train_ids {
        counts[id as usize] += 1;
    }
    let total = train_ids.len() as f64 + vocab_size as f64;
    let mut nll = 0.0f64;
    for &id in eval_ids {
        let p = (counts[id as usize] as f64 + 1.0) / total;
        nll -= p.ln();
    }
    (nll / eval_ids.len() as f64).exp()
}

/// Loads one split file.
pub fn read_split(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}
