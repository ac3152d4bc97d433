//! The trainable delta table, the composed embedding `base + delta`, and the
//! group (L21) regularizer with its proximal operator.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::store::{parse_line, write_row, EmbeddingMatrix, StoreError, Vocabulary, WordVectors};

#[derive(Debug, Error)]
pub enum DeltaError {
    #[error("word id {id} out of range for vocabulary of {len}")]
    OutOfRange { id: usize, len: usize },
    #[error("regularization coefficient must be finite and nonnegative, got {0}")]
    NegativeCoefficient(f64),
    #[error("delta row for word id {id} has {found} components, expected {expected}")]
    RowLength {
        id: usize,
        expected: usize,
        found: usize,
    },
    #[error("delta dim {delta} does not match embedding dim {base}")]
    DimMismatch { delta: usize, base: usize },
    #[error("delta token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("bad delta header: {0}")]
    Header(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Sparse map from word id to correction vector.
///
/// Absent rows are exactly zero. Rows are kept in id order so that every
/// traversal is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeltaTable {
    rows: BTreeMap<usize, Vec<f64>>,
    dim: usize,
}

impl DeltaTable {
    pub fn new(dim: usize) -> Self {
        Self {
            rows: BTreeMap::new(),
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> Option<&[f64]> {
        self.rows.get(&id).map(Vec::as_slice)
    }

    /// Mutable row, allocated at zero on first touch.
    pub fn row_mut(&mut self, id: usize) -> &mut Vec<f64> {
        let dim = self.dim;
        self.rows.entry(id).or_insert_with(|| vec![0.0; dim])
    }

    pub fn insert(&mut self, id: usize, row: Vec<f64>) -> Result<(), DeltaError> {
        if row.len() != self.dim {
            return Err(DeltaError::RowLength {
                id,
                expected: self.dim,
                found: row.len(),
            });
        }
        self.rows.insert(id, row);
        Ok(())
    }

    pub fn remove(&mut self, id: usize) -> Option<Vec<f64>> {
        self.rows.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.rows.iter().map(|(&id, row)| (id, row.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.rows.keys().copied()
    }

    /// Number of stored rows with at least one nonzero entry.
    pub fn nonzero_count(&self) -> usize {
        self.rows
            .values()
            .filter(|r| r.iter().any(|&v| v != 0.0))
            .count()
    }

    pub fn stored_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Applies [`prox_group`] to every stored row, evicting rows that reach
    /// zero. Returns the number of evicted rows.
    pub fn prox_sweep(&mut self, step: f64, c: f64) -> usize {
        let before = self.rows.len();
        self.rows.retain(|_, row| prox_group_in_place(row, step, c));
        before - self.rows.len()
    }

    /// Applies [`prox_group`] to one row; evicts it if it becomes zero.
    pub fn prox_row(&mut self, id: usize, step: f64, c: f64) {
        if let Some(row) = self.rows.get_mut(&id) {
            if !prox_group_in_place(row, step, c) {
                self.rows.remove(&id);
            }
        }
    }

    /// Builds a table from `(token, row)` entries, resolving tokens against
    /// `vocab`.
    pub fn from_entries(
        vocab: &Vocabulary,
        dim: usize,
        entries: impl IntoIterator<Item = (String, Vec<f64>)>,
    ) -> Result<Self, DeltaError> {
        let mut table = Self::new(dim);
        for (token, row) in entries {
            let id = vocab
                .lookup(&token)
                .ok_or_else(|| DeltaError::UnknownToken(token.clone()))?;
            if row.len() != dim {
                return Err(DeltaError::DimMismatch {
                    delta: row.len(),
                    base: dim,
                });
            }
            table.rows.insert(id, row);
        }
        Ok(table)
    }
}

/// `base + delta`, evaluated lazily per word.
#[derive(Clone, Copy, Debug)]
pub struct ComposedEmbedding<'a> {
    base: &'a EmbeddingMatrix,
    delta: &'a DeltaTable,
}

impl<'a> ComposedEmbedding<'a> {
    pub fn new(base: &'a EmbeddingMatrix, delta: &'a DeltaTable) -> Result<Self, DeltaError> {
        if !delta.is_empty() && delta.dim() != base.dim() {
            return Err(DeltaError::DimMismatch {
                delta: delta.dim(),
                base: base.dim(),
            });
        }
        Ok(Self { base, delta })
    }

    pub fn base(&self) -> &'a EmbeddingMatrix {
        self.base
    }

    pub fn delta(&self) -> &'a DeltaTable {
        self.delta
    }

    pub fn compose(&self, id: usize) -> Result<Cow<'a, [f64]>, DeltaError> {
        if id >= self.base.rows() {
            return Err(DeltaError::OutOfRange {
                id,
                len: self.base.rows(),
            });
        }
        Ok(self.compose_unchecked(id))
    }

    fn compose_unchecked(&self, id: usize) -> Cow<'a, [f64]> {
        let base = self.base.row(id);
        match self.delta.row(id) {
            None => Cow::Borrowed(base),
            Some(delta) => Cow::Owned(base.iter().zip(delta).map(|(b, d)| b + d).collect()),
        }
    }
}

impl WordVectors for ComposedEmbedding<'_> {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn len(&self) -> usize {
        self.base.rows()
    }

    fn vector(&self, id: usize) -> Cow<'_, [f64]> {
        self.compose_unchecked(id)
    }
}

pub fn l2_norm(row: &[f64]) -> f64 {
    row.iter().map(|v| v * v).fold(0.0, |a, b| a + b).sqrt()
}

fn check_coefficient(c: f64) -> Result<(), DeltaError> {
    if c.is_finite() && c >= 0.0 {
        Ok(())
    } else {
        Err(DeltaError::NegativeCoefficient(c))
    }
}

/// `Σᵢ ‖Δᵢ‖₂`: how far the word vectors moved from their pretrained positions.
pub fn total_moving_distance(table: &DeltaTable) -> f64 {
    table
        .rows
        .values()
        .map(|r| l2_norm(r))
        .fold(0.0, |a, b| a + b)
}

/// `c · Σᵢ ‖Δᵢ‖₂`.
pub fn l21_penalty(table: &DeltaTable, c: f64) -> Result<f64, DeltaError> {
    check_coefficient(c)?;
    Ok(c * total_moving_distance(table))
}

/// Subgradient of `c‖row‖₂`; zero at the origin.
pub fn l21_subgradient(row: &[f64], c: f64) -> Vec<f64> {
    let norm = l2_norm(row);
    if norm > 0.0 {
        row.iter().map(|v| c * v / norm).collect()
    } else {
        vec![0.0; row.len()]
    }
}

/// Group soft-threshold: the minimizer of `½‖x − row‖² + step·c·‖x‖₂`.
pub fn prox_group(row: &[f64], step: f64, c: f64) -> Vec<f64> {
    let mut out = row.to_vec();
    if !prox_group_in_place(&mut out, step, c) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    out
}

/// In-place [`prox_group`]. Returns `false` when the row was thresholded to
/// zero; the contents are unspecified in that case.
pub fn prox_group_in_place(row: &mut [f64], step: f64, c: f64) -> bool {
    let threshold = step * c;
    if threshold == 0.0 {
        return row.iter().any(|&v| v != 0.0);
    }
    let norm = l2_norm(row);
    if norm <= threshold {
        return false;
    }
    let scale = 1.0 - threshold / norm;
    row.iter_mut().for_each(|v| *v *= scale);
    true
}

/// `(nonzero rows, nonzero rows / vocab_size)`.
pub fn sparsity_report(table: &DeltaTable, vocab_size: usize) -> (usize, f64) {
    let nonzero = table.nonzero_count();
    let fraction = if vocab_size == 0 {
        0.0
    } else {
        nonzero as f64 / vocab_size as f64
    };
    (nonzero, fraction)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Mode {
    Fixed,
    Finetune,
    #[default]
    Delta,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Fixed => "fixed",
            Mode::Finetune => "finetune",
            Mode::Delta => "delta",
        })
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fixed" => Ok(Mode::Fixed),
            "finetune" => Ok(Mode::Finetune),
            "delta" => Ok(Mode::Delta),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

/// Metadata carried on the first line of a delta export.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaHeader {
    pub dim: usize,
    pub c: f64,
    pub mode: Mode,
    pub seed: u64,
}

impl fmt::Display for DeltaHeader {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "# delta dim={} c={} mode={} seed={}",
            self.dim, self.c, self.mode, self.seed
        )
    }
}

impl FromStr for DeltaHeader {
    type Err = DeltaError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let bad = |msg: &str| DeltaError::Header(format!("{msg} in {line:?}"));
        let rest = line
            .strip_prefix("# delta")
            .ok_or_else(|| bad("missing '# delta' prefix"))?;
        let (mut dim, mut c, mut mode, mut seed) = (None, None, None, None);
        for kv in rest.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| bad("expected key=value"))?;
            match k {
                "dim" => dim = Some(v.parse().map_err(|_| bad("bad dim"))?),
                "c" => c = Some(v.parse().map_err(|_| bad("bad c"))?),
                "mode" => mode = Some(v.parse().map_err(|e: String| bad(&e))?),
                "seed" => seed = Some(v.parse().map_err(|_| bad("bad seed"))?),
                _ => return Err(bad("unknown key")),
            }
        }
        Ok(Self {
            dim: dim.ok_or_else(|| bad("missing dim"))?,
            c: c.ok_or_else(|| bad("missing c"))?,
            mode: mode.ok_or_else(|| bad("missing mode"))?,
            seed: seed.ok_or_else(|| bad("missing seed"))?,
        })
    }
}

/// Parsed delta export: optional header and the rows in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DeltaFile {
    pub header: Option<DeltaHeader>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl DeltaFile {
    pub fn dim(&self) -> Option<usize> {
        self.header
            .as_ref()
            .map(|h| h.dim)
            .or_else(|| self.rows.first().map(|(_, r)| r.len()))
    }

    /// Resolves the rows against `vocab`, checking the dimension against `dim`.
    pub fn into_table(self, vocab: &Vocabulary, dim: usize) -> Result<DeltaTable, DeltaError> {
        if let Some(d) = self.dim() {
            if d != dim {
                return Err(DeltaError::DimMismatch {
                    delta: d,
                    base: dim,
                });
            }
        }
        DeltaTable::from_entries(vocab, dim, self.rows)
    }

    /// Builds a standalone vocabulary (file order) and table from the rows.
    pub fn into_standalone(self) -> Result<(Vocabulary, DeltaTable), DeltaError> {
        let dim = self.dim().unwrap_or(0);
        let vocab = Vocabulary::from_tokens(self.rows.iter().map(|(t, _)| t.clone()))?;
        let table = DeltaTable::from_entries(&vocab, dim, self.rows)?;
        Ok((vocab, table))
    }
}

pub fn write_delta<W: Write>(
    vocab: &Vocabulary,
    table: &DeltaTable,
    header: &DeltaHeader,
    mut out: W,
) -> Result<(), DeltaError> {
    writeln!(out, "{header}")?;
    for (id, row) in table.iter() {
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        let token = vocab.token(id).ok_or(DeltaError::OutOfRange {
            id,
            len: vocab.len(),
        })?;
        write_row(&mut out, token, row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a delta export. An empty stream is a valid, empty delta.
pub fn read_delta<R: BufRead>(reader: R) -> Result<DeltaFile, DeltaError> {
    let mut file = DeltaFile::default();
    let mut dim = None;
    let mut seen = std::collections::HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        if line.starts_with('#') {
            if file.header.is_some() || !file.rows.is_empty() {
                return Err(DeltaError::Header(format!(
                    "unexpected comment on line {lineno}"
                )));
            }
            let header: DeltaHeader = line.parse()?;
            dim = Some(header.dim);
            file.header = Some(header);
            continue;
        }
        let (token, row) = parse_line(line, lineno)?;
        let expected = *dim.get_or_insert(row.len());
        if row.len() != expected {
            return Err(StoreError::DimensionMismatch {
                line: lineno,
                expected,
                found: row.len(),
            }
            .into());
        }
        if !seen.insert(token.to_owned()) {
            return Err(StoreError::DuplicateToken {
                token: token.to_owned(),
            }
            .into());
        }
        file.rows.push((token.to_owned(), row));
    }
    Ok(file)
}
