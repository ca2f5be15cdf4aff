//! Ranking quality of query/document embeddings.

use crate::contrastive::cosine_sim;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalScores {
    pub acc_at_1: f64,
    pub mrr: f64,
    /// 1-based rank of each query's gold document.
    pub ranks: Vec<usize>,
}

/// Ranks all documents by cosine similarity to each query. Ties go to the
/// lower document index.
pub fn retrieval_eval(queries: &[Vec<f32>], docs: &[Vec<f32>], gold: &[usize]) -> Result<RetrievalScores> {
    if queries.len() != gold.len() || queries.is_empty() {
        return Err(Error::invalid(format!(
            "{} queries but {} gold labels",
            queries.len(),
            gold.len()
        )));
    }
    let dim = queries[0].len();
    if let Some(v) = queries.iter().chain(docs).find(|v| v.len() != dim) {
        return Err(Error::Shape {
            op: "retrieval_eval",
            lhs: vec![dim],
            rhs: vec![v.len()],
        });
    }
    let mut ranks = Vec::with_capacity(queries.len());
    for (q, &g) in queries.iter().zip(gold) {
        if g >= docs.len() {
            return Err(Error::invalid(format!("gold document {g} out of range {}", docs.len())));
        }
        let sims: Vec<f64> = docs.iter().map(|d| cosine_sim(q, d)).collect::<Result<_>>()?;
        let sg = sims[g];
        let ahead = sims
            .iter()
            .enumerate()
            .filter(|&(j, &s)| s > sg || (s == sg && j < g))
            .count();
        ranks.push(ahead + 1);
    }
    let n = ranks.len() as f64;
    Ok(RetrievalScores {
        acc_at_1: ranks.iter().filter(|&&r| r == 1).count() as f64 / n,
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        ranks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gold_equal_to_query() {
        let q = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let r = retrieval_eval(&q, &q, &[0, 1]).unwrap();
        assert_eq!((r.acc_at_1, r.mrr), (1.0, 1.0));
    }

    #[test]
    fn ties_prefer_lower_index() {
        let q = vec![vec![1.0, 0.0]];
        let docs = vec![vec![0.0, 1.0], vec![0.0, 2.0]];
        assert_eq!(retrieval_eval(&q, &docs, &[0]).unwrap().ranks, vec![1]);
        assert_eq!(retrieval_eval(&q, &docs, &[1]).unwrap().ranks, vec![2]);
    }

    #[test]
    fn dimension_mismatch() {
        assert!(retrieval_eval(&[vec![1.0, 0.0]], &[vec![1.0]], &[0]).is_err());
    }
}
