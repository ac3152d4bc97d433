//! Frozen pretrained embeddings and their plain-text vector format.
//!
//! The text format is the one GloVe ships with: one entry per line, the token
//! followed by `d` decimal numbers, all separated by single spaces, no header.

use std::borrow::Cow;
use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("empty input")]
    EmptyInput,
    #[error("line {line}: expected {expected} components, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: missing vector components")]
    MissingComponents { line: usize },
    #[error("line {line}: cannot parse {field:?} as a number")]
    Parse { line: usize, field: String },
    #[error("line {line}: non-finite value {field:?}")]
    NonFinite { line: usize, field: String },
    #[error("duplicate token {token:?}")]
    DuplicateToken { token: String },
    #[error("empty token")]
    EmptyToken,
    #[error("vocabulary has {vocab} entries but matrix has {rows} rows")]
    SizeMismatch { vocab: usize, rows: usize },
    #[error("row {row} has {found} components, expected {expected}")]
    RowLength {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered set of unique tokens with a reverse index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, StoreError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Self::new();
        for token in tokens {
            vocab.push(token.into())?;
        }
        Ok(vocab)
    }

    /// Appends a token and returns its id.
    pub fn push(&mut self, token: String) -> Result<usize, StoreError> {
        if token.is_empty() {
            return Err(StoreError::EmptyToken);
        }
        if self.index.contains_key(&token) {
            return Err(StoreError::DuplicateToken { token });
        }
        let id = self.tokens.len();
        self.index.insert(token.clone(), id);
        self.tokens.push(token);
        Ok(id)
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Dense `n × d` table of pretrained vectors, stored row-major.
///
/// There is no mutable access to the values once constructed.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    values: Vec<f64>,
    dim: usize,
}

impl EmbeddingMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>, dim: usize) -> Result<Self, StoreError> {
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != dim {
                return Err(StoreError::RowLength {
                    row: i,
                    expected: dim,
                    found: row.len(),
                });
            }
            values.extend(row);
        }
        Ok(Self { values, dim })
    }

    pub fn from_flat(values: Vec<f64>, dim: usize) -> Result<Self, StoreError> {
        if dim == 0 || !values.len().is_multiple_of(dim) {
            return Err(StoreError::RowLength {
                row: values.len() / dim.max(1),
                expected: dim,
                found: values.len() % dim.max(1),
            });
        }
        Ok(Self { values, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.values.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.values[id * self.dim..(id + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// SHA-256 over the dimension and the raw bit patterns of every value.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.dim as u64).to_le_bytes());
        for v in &self.values {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// Anything that can hand out a `d`-vector per word id.
pub trait WordVectors {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn vector(&self, id: usize) -> Cow<'_, [f64]>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WordVectors for EmbeddingMatrix {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.rows()
    }

    fn vector(&self, id: usize) -> Cow<'_, [f64]> {
        Cow::Borrowed(self.row(id))
    }
}

/// Splits a vector-file line into its token and parsed components.
pub(crate) fn parse_line(line: &str, lineno: usize) -> Result<(&str, Vec<f64>), StoreError> {
    let mut fields = line.split(' ').filter(|f| !f.is_empty());
    let token = fields.next().ok_or(StoreError::EmptyToken)?;
    let values = fields
        .map(|f| match f.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            Ok(_) => Err(StoreError::NonFinite {
                line: lineno,
                field: f.to_owned(),
            }),
            Err(_) => Err(StoreError::Parse {
                line: lineno,
                field: f.to_owned(),
            }),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err(StoreError::MissingComponents { line: lineno });
    }
    Ok((token, values))
}

/// Reads a vector file. Blank lines are ignored.
pub fn parse_vectors<R: BufRead>(reader: R) -> Result<(Vocabulary, EmbeddingMatrix), StoreError> {
    parse_vectors_filtered(reader, None)
}

/// Like [`parse_vectors`] but keeps only tokens contained in `keep`.
///
/// Every line is still validated, so a malformed file is rejected even when
/// the bad line would have been filtered out.
pub fn parse_vectors_filtered<R: BufRead>(
    reader: R,
    keep: Option<&HashSet<String>>,
) -> Result<(Vocabulary, EmbeddingMatrix), StoreError> {
    let mut vocab = Vocabulary::new();
    let mut values = Vec::new();
    let mut dim = None;
    let mut seen_any = false;

    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (token, row) = parse_line(line, lineno)?;
        let expected = *dim.get_or_insert(row.len());
        if row.len() != expected {
            return Err(StoreError::DimensionMismatch {
                line: lineno,
                expected,
                found: row.len(),
            });
        }
        seen_any = true;
        if keep.is_some_and(|k| !k.contains(token)) {
            continue;
        }
        vocab.push(token.to_owned())?;
        values.extend(row);
    }

    if !seen_any {
        return Err(StoreError::EmptyInput);
    }
    let dim = dim.unwrap_or_default();
    Ok((vocab, EmbeddingMatrix { values, dim }))
}

/// Writes one line per word using the shortest decimal form that parses back
/// to the same `f64`.
pub fn write_vectors<W: Write, V: WordVectors + ?Sized>(
    vocab: &Vocabulary,
    vectors: &V,
    mut out: W,
) -> Result<(), StoreError> {
    if vocab.len() != vectors.len() {
        return Err(StoreError::SizeMismatch {
            vocab: vocab.len(),
            rows: vectors.len(),
        });
    }
    for (id, token) in vocab.tokens().iter().enumerate() {
        write_row(&mut out, token, &vectors.vector(id))?;
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn write_row<W: Write>(out: &mut W, token: &str, row: &[f64]) -> std::io::Result<()> {
    out.write_all(token.as_bytes())?;
    for v in row {
        write!(out, " {v}")?;
    }
    out.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<(Vocabulary, EmbeddingMatrix), StoreError> {
        parse_vectors(text.as_bytes())
    }

    #[test]
    fn parses_two_rows() {
        let (vocab, m) = parse("a 1.0 2.0\nb 3.0 4.0").unwrap();
        assert_eq!(vocab.tokens(), ["a", "b"]);
        assert_eq!(m.dim(), 2);
        assert_eq!(m.row(0), [1.0, 2.0]);
        assert_eq!(m.row(1), [3.0, 4.0]);
    }

    #[test]
    fn empty_stream_is_an_error() {
        assert!(matches!(parse(""), Err(StoreError::EmptyInput)));
        assert!(matches!(parse("\n\n"), Err(StoreError::EmptyInput)));
    }

    #[test]
    fn dimension_mismatch_names_line() {
        match parse("a 1.0 2.0\nb 3.0") {
            Err(StoreError::DimensionMismatch { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_garbage() {
        assert!(matches!(
            parse("a 1\na 2"),
            Err(StoreError::DuplicateToken { .. })
        ));
        assert!(matches!(
            parse("a 1 x"),
            Err(StoreError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse("a 1 NaN"),
            Err(StoreError::NonFinite { .. })
        ));
        assert!(matches!(
            parse("lonely"),
            Err(StoreError::MissingComponents { line: 1 })
        ));
    }

    #[test]
    fn writes_shortest_form() {
        let vocab = Vocabulary::from_tokens(["a"]).unwrap();
        let m = EmbeddingMatrix::from_rows(vec![vec![1.5, -0.25]], 2).unwrap();
        let mut buf = Vec::new();
        write_vectors(&vocab, &m, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "a 1.5 -0.25\n");
    }

    #[test]
    fn write_rejects_size_mismatch() {
        let vocab = Vocabulary::from_tokens(["a", "b"]).unwrap();
        let m = EmbeddingMatrix::from_rows(vec![vec![1.0]], 1).unwrap();
        assert!(matches!(
            write_vectors(&vocab, &m, Vec::new()),
            Err(StoreError::SizeMismatch { vocab: 2, rows: 1 })
        ));
    }

    #[test]
    fn lookup_is_total_on_own_tokens() {
        let (vocab, _) = parse("a 1\nb 2\nc 3").unwrap();
        assert_eq!(vocab.lookup("a"), Some(0));
        assert_eq!(vocab.lookup("z"), None);
        for (i, t) in vocab.tokens().iter().enumerate() {
            assert_eq!(vocab.lookup(t), Some(i));
            assert_eq!(vocab.token(i), Some(t.as_str()));
        }
    }

    #[test]
    fn filtered_parse_keeps_order() {
        let keep: HashSet<String> = ["c", "a"].iter().map(|s| s.to_string()).collect();
        let (vocab, m) = parse_vectors_filtered("a 1\nb 2\nc 3".as_bytes(), Some(&keep)).unwrap();
        assert_eq!(vocab.tokens(), ["a", "c"]);
        assert_eq!(m.as_flat(), [1.0, 3.0]);
    }

    #[test]
    fn empty_token_rejected() {
        assert!(matches!(
            Vocabulary::from_tokens([""]),
            Err(StoreError::EmptyToken)
        ));
    }
}
