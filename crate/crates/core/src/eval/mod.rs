//! Intrinsic evaluation of word vectors: similarity ranking, QVEC alignment,
//! nearest neighbours and delta-norm inspection.

use thiserror::Error;

mod neighbors;
mod qvec;
mod report;
mod similarity;

pub use neighbors::{
    delta_norm_ranking, nearest_neighbors, neighbor_shift, Neighbor, NeighborShift,
};
pub use qvec::{
    alignment_score, pearson, qvec_score, read_linguistic, LinguisticMatrix, QvecScore,
};
pub use report::{similarity_table, EvalReport, SimilarityRow};
pub use similarity::{
    cosine, eval_similarity, ranks, read_similarity, spearman, SimilarityDataset, SimilarityScore,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation undefined: a ranking has zero variance")]
    ZeroVariance,
    #[error("cosine of a zero-norm vector")]
    ZeroNorm,
    #[error("dataset unusable: {used} usable pairs, {skipped} skipped")]
    Unusable { used: usize, skipped: usize },
    #[error("word {0:?} is not in the vocabulary")]
    UnknownWord(String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("QVEC needs at least 2 shared words, found {shared}")]
    SmallIntersection { shared: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
