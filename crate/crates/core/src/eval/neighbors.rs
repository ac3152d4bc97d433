use std::cmp::Ordering;
use std::collections::HashSet;

use super::similarity::cosine;
use super::EvalError;
use crate::delta::{l2_norm, DeltaTable};
use crate::store::{Vocabulary, WordVectors};

#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub word: String,
    pub cosine: f64,
}

/// Top-`k` words by cosine similarity to `word`, excluding `word` itself.
///
/// Ties are broken by vocabulary id. When `restrict` is given only words
/// from that list are candidates; unknown entries in the list are ignored.
/// Zero vectors are never returned.
pub fn nearest_neighbors<E: WordVectors + ?Sized>(
    emb: &E,
    vocab: &Vocabulary,
    word: &str,
    k: usize,
    restrict: Option<&[String]>,
) -> Result<Vec<Neighbor>, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let query_id = vocab
        .lookup(word)
        .ok_or_else(|| EvalError::UnknownWord(word.to_owned()))?;
    let query = emb.vector(query_id);
    if l2_norm(&query) == 0.0 {
        return Err(EvalError::ZeroNorm);
    }

    let candidates: Box<dyn Iterator<Item = usize>> = match restrict {
        Some(list) => {
            let ids: HashSet<usize> = list.iter().filter_map(|w| vocab.lookup(w)).collect();
            let mut ids: Vec<usize> = ids.into_iter().collect();
            ids.sort_unstable();
            Box::new(ids.into_iter())
        }
        None => Box::new(0..vocab.len()),
    };

    let mut scored: Vec<(usize, f64)> = candidates
        .filter(|&id| id != query_id)
        .filter_map(|id| cosine(&query, &emb.vector(id)).ok().map(|c| (id, c)))
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    scored.truncate(k);
    Ok(scored
        .into_iter()
        .map(|(id, cosine)| Neighbor {
            word: vocab.token(id).unwrap_or_default().to_owned(),
            cosine,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborShift {
    pub before: Vec<Neighbor>,
    pub after: Vec<Neighbor>,
}

impl NeighborShift {
    /// Words that appear only after the shift, in `after` order.
    pub fn entered(&self) -> Vec<&str> {
        let before: HashSet<&str> = self.before.iter().map(|n| n.word.as_str()).collect();
        self.after
            .iter()
            .map(|n| n.word.as_str())
            .filter(|w| !before.contains(w))
            .collect()
    }

    /// Words that dropped out of the neighbourhood, in `before` order.
    pub fn left(&self) -> Vec<&str> {
        let after: HashSet<&str> = self.after.iter().map(|n| n.word.as_str()).collect();
        self.before
            .iter()
            .map(|n| n.word.as_str())
            .filter(|w| !after.contains(w))
            .collect()
    }
}

/// Neighbours of `word` under two embeddings.
#[allow(clippy::too_many_arguments)]
pub fn neighbor_shift<A, B>(
    base: &A,
    base_vocab: &Vocabulary,
    tuned: &B,
    tuned_vocab: &Vocabulary,
    word: &str,
    k: usize,
    restrict: Option<&[String]>,
) -> Result<NeighborShift, EvalError>
where
    A: WordVectors + ?Sized,
    B: WordVectors + ?Sized,
{
    Ok(NeighborShift {
        before: nearest_neighbors(base, base_vocab, word, k, restrict)?,
        after: nearest_neighbors(tuned, tuned_vocab, word, k, restrict)?,
    })
}

/// Words with the largest delta norms, descending; ties by vocabulary id.
pub fn delta_norm_ranking(
    table: &DeltaTable,
    vocab: &Vocabulary,
    top_k: usize,
) -> Vec<(String, f64)> {
    let mut norms: Vec<(usize, f64)> = table
        .iter()
        .map(|(id, row)| (id, l2_norm(row)))
        .filter(|&(_, n)| n > 0.0)
        .collect();
    norms.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    norms.truncate(top_k);
    norms
        .into_iter()
        .map(|(id, n)| (vocab.token(id).unwrap_or("<unknown>").to_owned(), n))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::EmbeddingMatrix;

    #[test]
    fn duplicate_vector_is_nearest() {
        let vocab = Vocabulary::from_tokens(["w1", "w2", "w3"]).unwrap();
        let m =
            EmbeddingMatrix::from_rows(vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![-2.0, 1.0]], 2)
                .unwrap();
        let nn = nearest_neighbors(&m, &vocab, "w1", 1, None).unwrap();
        assert_eq!(
            nn,
            vec![Neighbor {
                word: "w2".into(),
                cosine: 1.0
            }]
        );
        let all = nearest_neighbors(&m, &vocab, "w1", 10, None).unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(all[1].word, "w3");
    }

    #[test]
    fn errors_and_restriction() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c", "d"]).unwrap();
        let m = EmbeddingMatrix::from_rows(
            vec![
                vec![1.0, 0.0],
                vec![0.9, 0.1],
                vec![0.0, 1.0],
                vec![0.0, 0.0],
            ],
            2,
        )
        .unwrap();
        assert!(matches!(
            nearest_neighbors(&m, &vocab, "zz", 1, None),
            Err(EvalError::UnknownWord(w)) if w == "zz"
        ));
        assert!(matches!(
            nearest_neighbors(&m, &vocab, "a", 0, None),
            Err(EvalError::ZeroK)
        ));
        let restrict = vec!["c".to_string(), "nope".to_string(), "d".to_string()];
        let nn = nearest_neighbors(&m, &vocab, "a", 5, Some(&restrict)).unwrap();
        // d is a zero vector and is dropped
        assert_eq!(
            nn,
            vec![Neighbor {
                word: "c".into(),
                cosine: 0.0
            }]
        );
    }

    #[test]
    fn ties_by_id() {
        let vocab = Vocabulary::from_tokens(["q", "z", "y"]).unwrap();
        let m =
            EmbeddingMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, -1.0]], 2)
                .unwrap();
        let nn = nearest_neighbors(&m, &vocab, "q", 2, None).unwrap();
        assert_eq!(nn[0].word, "z");
        assert_eq!(nn[1].word, "y");
    }

    #[test]
    fn shift_identity_and_constructed_move() {
        let vocab = Vocabulary::from_tokens(["not", "good", "bad", "ok"]).unwrap();
        let base = EmbeddingMatrix::from_rows(
            vec![
                vec![1.0, 0.2],
                vec![0.9, 0.3],
                vec![-1.0, 0.1],
                vec![0.1, 1.0],
            ],
            2,
        )
        .unwrap();
        let same = neighbor_shift(&base, &vocab, &base, &vocab, "not", 2, None).unwrap();
        assert_eq!(same.before, same.after);
        assert!(same.entered().is_empty());

        let mut delta = DeltaTable::new(2);
        // move "bad" exactly onto "not"
        delta.insert(2, vec![2.0, 0.1]).unwrap();
        let tuned = crate::delta::ComposedEmbedding::new(&base, &delta).unwrap();
        let shift = neighbor_shift(&base, &vocab, &tuned, &vocab, "not", 2, None).unwrap();
        assert_eq!(shift.after[0].word, "bad");
        assert_eq!(shift.after[0].cosine, 1.0);
        assert_eq!(shift.entered(), ["bad"]);

        let swapped = neighbor_shift(&tuned, &vocab, &base, &vocab, "not", 2, None).unwrap();
        assert_eq!(swapped.before, shift.after);
        assert_eq!(swapped.after, shift.before);
    }

    #[test]
    fn norm_ranking() {
        let vocab = Vocabulary::from_tokens(["a", "b", "c"]).unwrap();
        assert!(delta_norm_ranking(&DeltaTable::new(2), &vocab, 5).is_empty());
        let mut t = DeltaTable::new(2);
        t.insert(1, vec![0.0, 1.0]).unwrap();
        t.insert(0, vec![3.0, 4.0]).unwrap();
        t.insert(2, vec![0.0, 0.0]).unwrap();
        assert_eq!(
            delta_norm_ranking(&t, &vocab, 5),
            vec![("a".to_string(), 5.0), ("b".to_string(), 1.0)]
        );
        assert_eq!(delta_norm_ranking(&t, &vocab, 1).len(), 1);
    }
}
