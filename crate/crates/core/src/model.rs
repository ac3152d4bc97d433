//! Mean-of-embeddings softmax classifier.
//!
//! The sentence representation is the average of the composed vectors of its
//! in-vocabulary tokens; logits are `W·x + b`. Gradients with respect to the
//! word vectors are routed to delta rows only.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::delta::ComposedEmbedding;
use crate::store::{Vocabulary, WordVectors};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("example has no in-vocabulary tokens")]
    NoKnownTokens,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("line {line}: expected `label<TAB>text`")]
    BadLine { line: usize },
    #[error("line {line}: unknown label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("no labeled examples")]
    NoExamples,
    #[error("bad parameter file: {0}")]
    BadParams(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lowercases, splits on Unicode whitespace and trims ASCII punctuation from
/// both ends of every token. Tokens that end up empty are dropped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// A tokenized sentence with its class id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// A [`LabeledExample`] with tokens resolved to vocabulary ids. OOV tokens
/// are dropped at this point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

impl Example {
    pub fn encode(vocab: &Vocabulary, example: &LabeledExample) -> Self {
        Self {
            ids: example
                .tokens
                .iter()
                .filter_map(|t| vocab.lookup(t))
                .collect(),
            label: example.label,
        }
    }
}

/// Label names in id order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    /// Labels that are exactly the integers `0..K` keep their numeric ids;
    /// anything else is sorted as strings.
    pub fn infer<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        let distinct: BTreeSet<&str> = labels.into_iter().collect();
        let numeric: Option<BTreeSet<usize>> =
            distinct.iter().map(|l| l.parse::<usize>().ok()).collect();
        let names = match numeric {
            Some(ids)
                if ids.iter().copied().eq(0..ids.len())
                    && distinct
                        .iter()
                        .all(|l| l.parse::<usize>().unwrap().to_string() == *l) =>
            {
                (0..ids.len()).map(|i| i.to_string()).collect()
            }
            _ => distinct.into_iter().map(str::to_owned).collect(),
        };
        Self { names }
    }

    pub fn from_names(names: Vec<String>) -> Self {
        Self { names }
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// One label per line, in id order.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for n in &self.names {
            writeln!(out, "{n}")?;
        }
        out.flush()
    }
}

/// Reads `label<TAB>text` lines. Blank lines are skipped.
pub fn read_labeled<R: BufRead>(reader: R) -> Result<Vec<(String, String)>, ModelError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (label, text) = line
            .split_once('\t')
            .ok_or(ModelError::BadLine { line: i + 1 })?;
        let label = label.trim();
        if label.is_empty() {
            return Err(ModelError::BadLine { line: i + 1 });
        }
        out.push((label.to_owned(), text.to_owned()));
    }
    Ok(out)
}

/// Tokenizes raw `(label, text)` pairs against a label set.
pub fn label_examples(
    raw: &[(String, String)],
    labels: &LabelSet,
) -> Result<Vec<LabeledExample>, ModelError> {
    raw.iter()
        .enumerate()
        .map(|(i, (label, text))| {
            let label = labels.id(label).ok_or_else(|| ModelError::UnknownLabel {
                line: i + 1,
                label: label.clone(),
            })?;
            Ok(LabeledExample {
                tokens: tokenize(text),
                label,
            })
        })
        .collect()
}

/// Every distinct token across the given examples.
pub fn token_set<'a>(examples: impl IntoIterator<Item = &'a LabeledExample>) -> HashSet<String> {
    examples
        .into_iter()
        .flat_map(|e| e.tokens.iter().cloned())
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    /// Row-major `classes × dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub dim: usize,
}

impl ClassifierParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            classes,
            dim,
        }
    }

    /// Uniform(−0.05, 0.05) draws for every weight and bias, weights first.
    pub fn init(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let weights = (0..classes * dim)
            .map(|_| rng.gen_range(-0.05..0.05))
            .collect();
        let bias = (0..classes).map(|_| rng.gen_range(-0.05..0.05)).collect();
        Self {
            weights,
            bias,
            classes,
            dim,
        }
    }

    pub fn seeded(classes: usize, dim: usize, seed: u64) -> Self {
        Self::init(classes, dim, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                self.weight_row(k)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + self.bias[k]
            })
            .collect()
    }

    /// One line per class: `name bias w1 … wd`.
    pub fn write<W: Write>(&self, labels: &LabelSet, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "# classifier classes={} dim={}",
            self.classes, self.dim
        )?;
        for k in 0..self.classes {
            write!(out, "{} {}", labels.name(k).unwrap_or("?"), self.bias[k])?;
            for w in self.weight_row(k) {
                write!(out, " {w}")?;
            }
            writeln!(out)?;
        }
        out.flush()
    }

    pub fn read<R: BufRead>(reader: R) -> Result<(LabelSet, Self), ModelError> {
        let bad = |m: &str| ModelError::BadParams(m.to_owned());
        let mut names = Vec::new();
        let mut weights = Vec::new();
        let mut bias = Vec::new();
        let mut dim = None;
        for line in reader.lines() {
            let line = line?;
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            names.push(
                fields
                    .next()
                    .ok_or_else(|| bad("missing label"))?
                    .to_owned(),
            );
            let nums = fields
                .map(|f| f.parse::<f64>().map_err(|_| bad("bad number")))
                .collect::<Result<Vec<_>, _>>()?;
            let (b, w) = nums.split_first().ok_or_else(|| bad("missing bias"))?;
            if *dim.get_or_insert(w.len()) != w.len() {
                return Err(bad("ragged weight rows"));
            }
            bias.push(*b);
            weights.extend_from_slice(w);
        }
        let classes = names.len();
        Ok((
            LabelSet::from_names(names),
            Self {
                weights,
                bias,
                classes,
                dim: dim.unwrap_or(0),
            },
        ))
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `−log softmax(logits)[label]`, computed as `logsumexp − logit`.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn mean_vector(emb: &ComposedEmbedding<'_>, ids: &[usize]) -> Result<Vec<f64>, ModelError> {
    if ids.is_empty() {
        return Err(ModelError::NoKnownTokens);
    }
    let mut x = vec![0.0; emb.dim()];
    for &id in ids {
        for (acc, v) in x.iter_mut().zip(emb.vector(id).iter()) {
            *acc += v;
        }
    }
    let n = ids.len() as f64;
    x.iter_mut().for_each(|v| *v /= n);
    Ok(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub loss: f64,
}

pub fn forward(
    params: &ClassifierParams,
    emb: &ComposedEmbedding<'_>,
    example: &Example,
) -> Result<Forward, ModelError> {
    if example.label >= params.classes {
        return Err(ModelError::LabelOutOfRange {
            label: example.label,
            classes: params.classes,
        });
    }
    let x = mean_vector(emb, &example.ids)?;
    let logits = params.logits(&x);
    let loss = cross_entropy(&logits, example.label);
    Ok(Forward { logits, loss })
}

/// Gradients of the cross-entropy loss. `delta` holds one entry per distinct
/// in-vocabulary word of the example(s).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub delta: BTreeMap<usize, Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
            delta: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, other: &GradientBundle) {
        add_into(&mut self.weights, &other.weights);
        add_into(&mut self.bias, &other.bias);
        for (&id, g) in &other.delta {
            match self.delta.get_mut(&id) {
                Some(acc) => add_into(acc, g),
                None => {
                    self.delta.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|v| *v *= s);
        self.bias.iter_mut().for_each(|v| *v *= s);
        for g in self.delta.values_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

/// Loss and exact gradients for one example.
pub fn backward(
    params: &ClassifierParams,
    emb: &ComposedEmbedding<'_>,
    example: &Example,
) -> Result<(f64, GradientBundle), ModelError> {
    if example.label >= params.classes {
        return Err(ModelError::LabelOutOfRange {
            label: example.label,
            classes: params.classes,
        });
    }
    let x = mean_vector(emb, &example.ids)?;
    let logits = params.logits(&x);
    let loss = cross_entropy(&logits, example.label);

    // dL/dlogits = softmax − onehot
    let mut dlogits = softmax(&logits);
    dlogits[example.label] -= 1.0;

    let dim = params.dim;
    let mut grad = GradientBundle::zeros(params.classes, dim);
    let mut dx = vec![0.0; dim];
    for (k, &g) in dlogits.iter().enumerate() {
        grad.bias[k] = g;
        let w = params.weight_row(k);
        for j in 0..dim {
            grad.weights[k * dim + j] = g * x[j];
            dx[j] += g * w[j];
        }
    }

    let share = 1.0 / example.ids.len() as f64;
    for &id in &example.ids {
        let row = grad.delta.entry(id).or_insert_with(|| vec![0.0; dim]);
        for (r, d) in row.iter_mut().zip(&dx) {
            *r += share * d;
        }
    }
    Ok((loss, grad))
}

/// Mean loss and mean gradient over the examples that have at least one
/// known token. Returns the number of skipped examples alongside.
pub fn batch_backward<'e>(
    params: &ClassifierParams,
    emb: &ComposedEmbedding<'_>,
    examples: impl IntoIterator<Item = &'e Example>,
) -> Result<(f64, GradientBundle, usize), ModelError> {
    let mut total = GradientBundle::zeros(params.classes, params.dim);
    let mut loss = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for ex in examples {
        match backward(params, emb, ex) {
            Ok((l, g)) => {
                loss += l;
                total.add(&g);
                used += 1;
            }
            Err(ModelError::NoKnownTokens) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if used > 0 {
        total.scale(1.0 / used as f64);
        loss /= used as f64;
    }
    Ok((loss, total, skipped))
}

/// Argmax with ties to the lowest class id.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = k;
        }
    }
    best
}

/// Predicted class, or `None` when no token is in the vocabulary.
pub fn predict(
    params: &ClassifierParams,
    emb: &ComposedEmbedding<'_>,
    ids: &[usize],
) -> Option<usize> {
    let x = mean_vector(emb, ids).ok()?;
    Some(argmax(&params.logits(&x)))
}

/// Fraction of correct predictions; abstentions count as wrong.
pub fn accuracy(
    params: &ClassifierParams,
    emb: &ComposedEmbedding<'_>,
    examples: &[Example],
) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let correct = examples
        .iter()
        .filter(|e| predict(params, emb, &e.ids) == Some(e.label))
        .count();
    correct as f64 / examples.len() as f64
}

/// Mean task loss over the examples with known tokens.
pub fn mean_loss(
    params: &ClassifierParams,
    emb: &ComposedEmbedding<'_>,
    examples: &[Example],
) -> f64 {
    let (sum, n) = examples
        .iter()
        .filter_map(|e| forward(params, emb, e).ok())
        .fold((0.0, 0usize), |(s, n), f| (s + f.loss, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
