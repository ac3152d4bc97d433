//! QVEC-style alignment between embedding dimensions and linguistic
//! property columns.

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;

use super::similarity::pearson_opt;
use super::EvalError;
use crate::store::{Vocabulary, WordVectors};

/// Word → nonnegative weights over a fixed set of property columns.
#[derive(Clone, Debug, PartialEq)]
pub struct LinguisticMatrix {
    pub columns: Vec<String>,
    pub words: Vec<String>,
    /// Dense `words × columns`; properties a word lacks are 0.
    pub rows: Vec<Vec<f64>>,
}

impl LinguisticMatrix {
    pub fn from_dense(columns: Vec<String>, entries: Vec<(String, Vec<f64>)>) -> Self {
        let (words, rows) = entries.into_iter().unzip();
        Self {
            columns,
            words,
            rows,
        }
    }
}

/// Reads `word prop:weight prop:weight …` lines. Columns are the sorted set
/// of property names seen anywhere in the file.
pub fn read_linguistic<R: BufRead>(reader: R) -> Result<LinguisticMatrix, EvalError> {
    let mut sparse: Vec<(String, Vec<(String, f64)>)> = Vec::new();
    let mut seen_words = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: String| EvalError::BadLine {
            line: i + 1,
            reason,
        };
        let mut fields = trimmed.split_whitespace();
        let word = fields.next().unwrap_or_default().to_owned();
        if seen_words.insert(word.clone(), i).is_some() {
            return Err(bad(format!("duplicate word {word:?}")));
        }
        let mut props = Vec::new();
        for f in fields {
            let (name, weight) = f
                .rsplit_once(':')
                .ok_or_else(|| bad(format!("expected prop:weight, got {f:?}")))?;
            let weight: f64 = weight
                .parse()
                .map_err(|_| bad(format!("bad weight in {f:?}")))?;
            if !weight.is_finite() || weight < 0.0 {
                return Err(bad(format!(
                    "weight must be finite and nonnegative in {f:?}"
                )));
            }
            props.push((name.to_owned(), weight));
        }
        sparse.push((word, props));
    }

    let columns: Vec<String> = sparse
        .iter()
        .flat_map(|(_, p)| p.iter().map(|(n, _)| n.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let col_index: HashMap<&str, usize> = columns
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let mut words = Vec::with_capacity(sparse.len());
    let mut rows = Vec::with_capacity(sparse.len());
    for (word, props) in sparse {
        let mut row = vec![0.0; columns.len()];
        for (name, w) in props {
            row[col_index[name.as_str()]] += w;
        }
        words.push(word);
        rows.push(row);
    }
    Ok(LinguisticMatrix {
        columns,
        words,
        rows,
    })
}

/// Pearson correlation, 0 when either side is constant.
pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    pearson_opt(xs, ys).unwrap_or(0.0)
}

/// Many-to-one alignment over a `dims × columns` correlation matrix: each
/// embedding dimension takes its best column if that correlation is
/// positive. Returns the sum of the selected correlations.
pub fn alignment_score(correlations: &[Vec<f64>]) -> f64 {
    correlations
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .fold(0.0, |a, b| a + b)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QvecScore {
    pub score: f64,
    pub shared_words: usize,
    /// `dims × columns` Pearson correlations over the shared words.
    pub correlations: Vec<Vec<f64>>,
}

pub fn qvec_score<E: WordVectors + ?Sized>(
    emb: &E,
    vocab: &Vocabulary,
    oracle: &LinguisticMatrix,
) -> Result<QvecScore, EvalError> {
    let shared: Vec<(usize, usize)> = oracle
        .words
        .iter()
        .enumerate()
        .filter_map(|(row, w)| vocab.lookup(w).map(|id| (row, id)))
        .collect();
    if shared.len() < 2 {
        return Err(EvalError::SmallIntersection {
            shared: shared.len(),
        });
    }

    let dim = emb.dim();
    let mut dims = vec![Vec::with_capacity(shared.len()); dim];
    let mut cols = vec![Vec::with_capacity(shared.len()); oracle.columns.len()];
    for &(row, id) in &shared {
        for (j, v) in emb.vector(id).iter().enumerate() {
            dims[j].push(*v);
        }
        for (p, w) in oracle.rows[row].iter().enumerate() {
            cols[p].push(*w);
        }
    }

    let correlations: Vec<Vec<f64>> = dims
        .iter()
        .map(|d| cols.iter().map(|c| pearson(d, c)).collect())
        .collect();
    Ok(QvecScore {
        score: alignment_score(&correlations),
        shared_words: shared.len(),
        correlations,
    })
}
