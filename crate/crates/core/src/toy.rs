//! Synthetic "planted semantics" task.
//!
//! A small pretrained vocabulary where two designated words sit almost on top
//! of each other, while in the labeled corpus they decide the label in
//! opposite directions. Every other word is label-independent filler. A
//! frozen embedding cannot tell the two planted words apart; a good delta
//! moves exactly those two and nothing else.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::eval::{cosine, SimilarityDataset};
use crate::model::{Example, LabeledExample};
use crate::store::{EmbeddingMatrix, Vocabulary};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct PlantedConfig {
    pub seed: u64,
    pub dim: usize,
    pub fillers: usize,
    pub train_size: usize,
    pub dev_size: usize,
    /// Filler tokens per sentence, inclusive range.
    pub min_fillers: usize,
    pub max_fillers: usize,
    /// Distance between the two planted words in the pretrained space.
    pub planted_gap: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 10,
            fillers: 48,
            train_size: 1600,
            dev_size: 400,
            min_fillers: 3,
            max_fillers: 6,
            planted_gap: 0.05,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedTask {
    pub vocab: Vocabulary,
    pub base: EmbeddingMatrix,
    /// The two words whose labels contradict their pretrained positions;
    /// the first marks class 0, the second class 1.
    pub planted: [String; 2],
    pub train: Vec<LabeledExample>,
    pub dev: Vec<LabeledExample>,
}

pub const PLANTED_WORDS: [&str; 2] = ["alpha", "omega"];

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

impl PlantedTask {
    pub fn generate(cfg: &PlantedConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let filler_names: Vec<String> = (0..cfg.fillers).map(|i| format!("w{i:02}")).collect();

        let mut rows: Vec<Vec<f64>> = filler_names
            .iter()
            .map(|_| gaussian(&mut rng, cfg.dim))
            .collect();
        let center = gaussian(&mut rng, cfg.dim);
        let offset = gaussian(&mut rng, cfg.dim);
        let scale = 0.5 * cfg.planted_gap / crate::delta::l2_norm(&offset);
        rows.push(
            center
                .iter()
                .zip(&offset)
                .map(|(c, o)| c + scale * o)
                .collect(),
        );
        rows.push(
            center
                .iter()
                .zip(&offset)
                .map(|(c, o)| c - scale * o)
                .collect(),
        );

        let vocab = Vocabulary::from_tokens(
            filler_names
                .iter()
                .cloned()
                .chain(PLANTED_WORDS.iter().map(|s| s.to_string())),
        )
        .expect("generated tokens are unique");
        let base = EmbeddingMatrix::from_rows(rows, cfg.dim).expect("rows have dim entries");

        let sentence = |rng: &mut ChaCha8Rng| {
            let label = rng.gen_range(0..2usize);
            let n = rng.gen_range(cfg.min_fillers..=cfg.max_fillers);
            let mut tokens: Vec<String> = (0..n)
                .map(|_| filler_names.choose(rng).expect("fillers nonempty").clone())
                .collect();
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, PLANTED_WORDS[label].to_owned());
            LabeledExample { tokens, label }
        };
        let train = (0..cfg.train_size).map(|_| sentence(&mut rng)).collect();
        let dev = (0..cfg.dev_size).map(|_| sentence(&mut rng)).collect();

        Self {
            vocab,
            base,
            planted: PLANTED_WORDS.map(str::to_owned),
            train,
            dev,
        }
    }

    /// Optimizer settings under which every regime converges on the default
    /// task; `mode` and `c` are left at their defaults.
    pub fn train_config() -> TrainConfig {
        TrainConfig {
            learning_rate: 4.0,
            epochs: 60,
            batch_size: 128,
            ..TrainConfig::default()
        }
    }

    pub fn encode(&self, examples: &[LabeledExample]) -> Vec<Example> {
        examples
            .iter()
            .map(|e| Example::encode(&self.vocab, e))
            .collect()
    }

    pub fn filler_ids(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.vocab.len()).filter(|&id| {
            let t = self.vocab.token(id).unwrap_or_default();
            !self.planted.iter().any(|p| p == t)
        })
    }

    /// Every pair of filler words, scored by their pretrained cosine.
    pub fn filler_similarity(&self) -> SimilarityDataset {
        let ids: Vec<usize> = self.filler_ids().collect();
        let mut pairs = Vec::new();
        for (i, &a) in ids.iter().enumerate() {
            for &b in &ids[i + 1..] {
                let score =
                    cosine(self.base.row(a), self.base.row(b)).expect("gaussian rows are nonzero");
                pairs.push((
                    self.vocab.token(a).unwrap().to_owned(),
                    self.vocab.token(b).unwrap().to_owned(),
                    score,
                ));
            }
        }
        SimilarityDataset {
            name: "fillers".into(),
            pairs,
        }
    }

    /// Writes `label<TAB>text` lines.
    pub fn write_labeled<W: Write>(examples: &[LabeledExample], mut out: W) -> std::io::Result<()> {
        for e in examples {
            writeln!(out, "{}\t{}", e.label, e.tokens.join(" "))?;
        }
        out.flush()
    }
}
