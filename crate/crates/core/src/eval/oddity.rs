use crate::error::{Error, Result};
use crate::metrics::{cosine_slices, Embedding, SimilarityMatrix};

/// Index of the item with the lowest summed similarity to the others; ties go
/// to the lowest index.
pub fn oddity_from_similarity(sim: &SimilarityMatrix) -> usize {
    let n = sim.n();
    let mut best = (0, f64::INFINITY);
    for i in 0..n {
        let total: f64 = (0..n).filter(|&j| j != i).map(|j| sim.get(i, j) as f64).sum();
        if total < best.1 {
            best = (i, total);
        }
    }
    best.0
}

/// Picks the odd one out of exactly four embeddings by summed cosine
/// similarity.
pub fn oddity(embeddings: &[Embedding]) -> Result<usize> {
    if embeddings.len() != 4 {
        return Err(Error::Invalid(format!(
            "oddity needs exactly 4 embeddings, got {}",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].dim();
    if embeddings.iter().any(|e| e.dim() != dim) {
        return Err(Error::Invalid("oddity embeddings differ in dimension".into()));
    }
    let mut best = (0, f64::INFINITY);
    for i in 0..4 {
        let total: f64 = (0..4)
            .filter(|&j| j != i)
            .map(|j| cosine_slices(embeddings[i].values(), embeddings[j].values()))
            .sum();
        if total < best.1 {
            best = (i, total);
        }
    }
    Ok(best.0)
}
