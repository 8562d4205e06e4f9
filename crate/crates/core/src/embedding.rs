//! Tokenization, vocabulary, and the word-embedding table.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Range of the uniform draw for rows with no pretrained vector.
pub const OOV_INIT_SCALE: f64 = 0.05;

/// Lowercases, splits punctuation off into standalone tokens, then splits
/// on whitespace. `_` counts as a word character.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if (ch.is_ascii_punctuation() && ch != '_') || (!ch.is_ascii() && is_unicode_punct(ch)) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(ch.to_lowercase().collect());
        } else {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn is_unicode_punct(ch: char) -> bool {
    matches!(ch, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}')
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_index: HashMap<String, usize>,
    index_to_token: Vec<String>,
}

impl Vocabulary {
    /// Every token seen at least `min_count` times, ordered by descending
    /// frequency with lexicographic tie-breaks. PAD and UNK come first.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Usage("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for doc in corpus {
            for tok in doc {
                *counts.entry(tok.as_ref()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_count.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_string()).collect())
    }

    /// Rebuilds from the ordered non-reserved tokens (index 2 onward).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index_to_token = Vec::with_capacity(tokens.len() + 2);
        index_to_token.push(PAD_TOKEN.to_string());
        index_to_token.push(UNK_TOKEN.to_string());
        index_to_token.extend(tokens);
        let mut token_to_index = HashMap::with_capacity(index_to_token.len());
        for (i, t) in index_to_token.iter().enumerate() {
            if token_to_index.insert(t.clone(), i).is_some() {
                return Err(Error::Dataset(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_index,
            index_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.index_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Index of `token`, or UNK.
    pub fn index(&self, token: &str) -> usize {
        self.token_to_index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_index.contains_key(token)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.index_to_token.get(index).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.index(t.as_ref())).collect()
    }

    /// Non-reserved tokens in index order.
    pub fn tokens(&self) -> &[String] {
        &self.index_to_token[2..]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadReport {
    pub matched: usize,
    pub vocab_size: usize,
    pub file_lines: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub table: Matrix,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// All rows except PAD drawn from U(-0.05, 0.05).
    pub fn random(vocab_size: usize, dim: usize, rng: &mut SeededRng) -> Self {
        let mut table = Matrix::zeros(vocab_size, dim);
        for r in 1..vocab_size {
            for v in table.row_mut(r) {
                *v = rng.uniform(OOV_INIT_SCALE);
            }
        }
        EmbeddingTable {
            table,
            trainable: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.table.rows()
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Matrix> {
        let mut out = Matrix::zeros(indices.len(), self.dim());
        for (j, &i) in indices.iter().enumerate() {
            if i >= self.vocab_size() {
                return Err(Error::Usage(format!(
                    "token index {i} out of range for vocabulary of {}",
                    self.vocab_size()
                )));
            }
            out.row_mut(j).copy_from_slice(self.table.row(i));
        }
        Ok(out)
    }
}

/// Reads GloVe-style text vectors for the tokens in `vocab`. Rows for tokens
/// missing from the file (UNK included) are random; PAD stays zero.
pub fn load_pretrained(
    path: &Path,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<(EmbeddingTable, LoadReport)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pretrained(BufReader::new(file), &path.display().to_string(), vocab, dim, rng)
}

pub fn read_pretrained<R: BufRead>(
    reader: R,
    source_name: &str,
    vocab: &Vocabulary,
    dim: usize,
    rng: &mut SeededRng,
) -> Result<(EmbeddingTable, LoadReport)> {
    let mut emb = EmbeddingTable::random(vocab.len(), dim, rng);
    let mut seen = vec![false; vocab.len()];
    let mut matched = 0;
    let mut file_lines = 0;
    for (n, line) in reader.lines().enumerate() {
        let lineno = n + 1;
        let line = line.map_err(|e| Error::io(source_name, e))?;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        file_lines += 1;
        let mut parts = line.split(' ');
        let token = parts.next().unwrap_or_default();
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: lineno,
                message: format!("expected {dim} values after token, found {}", values.len()),
            });
        }
        let idx = vocab.index(token);
        if idx == UNK || idx == PAD || token == UNK_TOKEN || seen[idx] {
            continue;
        }
        let row = emb.table.row_mut(idx);
        for (slot, raw) in row.iter_mut().zip(&values) {
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                source_name: source_name.to_string(),
                line: lineno,
                message: format!("not a number: {raw:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: lineno,
                    message: format!("non-finite value {raw:?}"),
                });
            }
            *slot = v;
        }
        seen[idx] = true;
        matched += 1;
    }
    Ok((
        emb,
        LoadReport {
            matched,
            vocab_size: vocab.len(),
            file_lines,
        },
    ))
}

/// Sparse gradient for the embedding table, keyed by row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowGradients {
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl RowGradients {
    pub fn add_row(&mut self, row: usize, grad: &[f64]) {
        if row == PAD {
            return;
        }
        let slot = self.rows.entry(row).or_insert_with(|| vec![0.0; grad.len()]);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }

    pub fn merge(&mut self, other: &RowGradients) {
        for (&r, g) in &other.rows {
            self.add_row(r, g);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.rows.values_mut() {
            for v in g.iter_mut() {
                *v *= k;
            }
        }
    }

    /// Dense `vocab × dim` view, row-major.
    pub fn to_dense(&self, vocab_size: usize, dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab_size * dim];
        for (&r, g) in &self.rows {
            out[r * dim..(r + 1) * dim].copy_from_slice(g);
        }
        out
    }
}

pub fn lookup_backward(grad_output: &Matrix, indices: &[usize], dim: usize) -> Result<RowGradients> {
    if grad_output.rows() != indices.len() || grad_output.cols() != dim {
        return Err(Error::shape(
            "embedding backward",
            grad_output.shape(),
            (indices.len(), dim),
        ));
    }
    let mut grads = RowGradients::default();
    for (j, &i) in indices.iter().enumerate() {
        grads.add_row(i, grad_output.row(j));
    }
    Ok(grads)
}
