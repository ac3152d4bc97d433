use std::collections::HashSet;
use std::io::BufRead;

use super::EvalError;
use crate::store::{Vocabulary, WordVectors};

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64, EvalError> {
    if u.len() != v.len() {
        return Err(EvalError::LengthMismatch(u.len(), v.len()));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(EvalError::ZeroNorm);
    }
    // sqrt of the product keeps cosine(v, v) at exactly 1
    Ok((dot(u, v) / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation; `None` when either side has zero variance.
pub(crate) fn pearson_opt(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of the average-tie ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, EvalError> {
    if xs.len() != ys.len() {
        return Err(EvalError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(EvalError::TooFewPoints(xs.len()));
    }
    pearson_opt(&ranks(xs), &ranks(ys)).ok_or(EvalError::ZeroVariance)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityDataset {
    pub name: String,
    pub pairs: Vec<(String, String, f64)>,
}

impl SimilarityDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Reads `word1 word2 score` lines; `#` lines and blank lines are skipped and
/// words are lowercased. Repeated unordered pairs are rejected.
pub fn read_similarity<R: BufRead>(name: &str, reader: R) -> Result<SimilarityDataset, EvalError> {
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| EvalError::BadLine {
            line: i + 1,
            reason: reason.to_owned(),
        };
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        let [a, b, score] = fields[..] else {
            return Err(bad("expected `word1 word2 score`"));
        };
        let score: f64 = score.parse().map_err(|_| bad("score is not a number"))?;
        if !score.is_finite() {
            return Err(bad("score is not finite"));
        }
        let (a, b) = (a.to_lowercase(), b.to_lowercase());
        let key = if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        };
        if !seen.insert(key) {
            return Err(bad("duplicate pair"));
        }
        pairs.push((a, b, score));
    }
    Ok(SimilarityDataset {
        name: name.to_owned(),
        pairs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityScore {
    pub rho: f64,
    pub used: usize,
    pub skipped: usize,
}

/// Spearman correlation between cosine similarities and human scores over
/// the pairs whose words are both known and nonzero.
pub fn eval_similarity<E: WordVectors + ?Sized>(
    emb: &E,
    vocab: &Vocabulary,
    dataset: &SimilarityDataset,
) -> Result<SimilarityScore, EvalError> {
    let mut model = Vec::with_capacity(dataset.len());
    let mut human = Vec::with_capacity(dataset.len());
    for (a, b, score) in &dataset.pairs {
        let (Some(ia), Some(ib)) = (vocab.lookup(a), vocab.lookup(b)) else {
            continue;
        };
        if let Ok(cos) = cosine(&emb.vector(ia), &emb.vector(ib)) {
            model.push(cos);
            human.push(*score);
        }
    }
    let used = model.len();
    let skipped = dataset.len() - used;
    if used < 2 {
        return Err(EvalError::Unusable { used, skipped });
    }
    let rho = spearman(&model, &human)?;
    Ok(SimilarityScore { rho, used, skipped })
}
