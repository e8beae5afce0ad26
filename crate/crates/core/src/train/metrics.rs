//! Recall@K and median rank over retrieval queries.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    /// Lower median of the per-query ranks.
    pub median_rank: usize,
    /// One-based rank of each query's ground truth.
    pub ranks: Vec<usize>,
}

/// One-based rank of `scores[truth]` when the gallery is sorted by score
/// descending, ties broken by id ascending.
pub fn rank_of(scores: &[f64], ids: &[u64], truth: usize) -> usize {
    let (s, id) = (scores[truth], ids[truth]);
    1 + scores
        .iter()
        .zip(ids)
        .filter(|&(&sj, &idj)| sj > s || (sj == s && idj < id))
        .count()
}

pub fn retrieval_metrics(ranks: Vec<usize>, ks: &[usize]) -> Result<RetrievalMetrics> {
    if ranks.is_empty() {
        return Err(DanError::EmptyInput("retrieval_metrics"));
    }
    if let Some(&r) = ranks.iter().find(|&&r| r == 0) {
        return Err(DanError::OutOfRange {
            what: "rank",
            index: r,
            limit: 1,
        });
    }
    let n = ranks.len();
    let recall_at = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64))
        .collect();
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    Ok(RetrievalMetrics {
        recall_at,
        median_rank: sorted[(n - 1) / 2],
        ranks,
    })
}
