//! Ranking, greedy one-to-one matching and alignment metrics.

use std::cmp::Ordering;
use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diff::cosine_similarity_matrix;
use crate::error::{PmfError, Result};

/// Candidate orderings per query, plus the rank of the true match when known.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// Candidate indices by descending similarity, ties by ascending index.
    pub candidates: Vec<Vec<usize>>,
    /// 1-based rank of the gold candidate per query.
    pub ranks: Option<Vec<usize>>,
}

fn order_desc(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Ranks every row of `targets` for every row of `sources` by cosine
/// similarity. `gold[i]` is the index of the true match of query `i`.
pub fn rank_all(
    sources: ArrayView2<'_, f64>,
    targets: ArrayView2<'_, f64>,
    gold: Option<&[usize]>,
) -> Result<RankingResult> {
    if targets.nrows() == 0 {
        return Err(PmfError::Data("ranking needs at least one candidate".into()));
    }
    if let Some(g) = gold {
        if g.len() != sources.nrows() {
            return Err(PmfError::dim("rank_all", format!("{} gold ids for {} queries", g.len(), sources.nrows())));
        }
        if let Some(bad) = g.iter().find(|&&t| t >= targets.nrows()) {
            return Err(PmfError::Data(format!("gold candidate {bad} outside pool of {}", targets.nrows())));
        }
    }
    let sim = cosine_similarity_matrix(sources, targets)?;
    let candidates: Vec<Vec<usize>> = sim.outer_iter().map(|r| order_desc(r.as_slice().expect("standard layout"))).collect();
    let ranks = gold.map(|g| {
        candidates
            .iter()
            .zip(g)
            .map(|(c, &t)| c.iter().position(|&x| x == t).expect("gold in pool") + 1)
            .collect()
    });
    Ok(RankingResult { candidates, ranks })
}

/// Rank of the gold candidate only, without materializing full orderings.
/// Ties with the gold similarity count ahead only for smaller indices, as in
/// [`rank_all`].
pub fn gold_ranks(sim: &Array2<f64>, gold: &[usize]) -> Vec<usize> {
    sim.outer_iter()
        .zip(gold)
        .map(|(row, &g)| {
            let s = row[g];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &x)| x > s || (x == s && j < g))
                .count()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(source, target, similarity)` in claim order.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_sources: Vec<usize>,
    pub unmatched_targets: Vec<usize>,
}

/// Confidence-first greedy matching over a similarity matrix: the source
/// whose best still-available target is most similar claims it first.
pub fn greedy_match_similarity(sim: &Array2<f64>) -> MatchResult {
    let (ns, nt) = sim.dim();
    let mut entries: Vec<(usize, usize)> = (0..ns).flat_map(|i| (0..nt).map(move |j| (i, j))).collect();
    // Globally descending similarity; claiming in this order is the same as
    // recomputing every source's best available target after each claim.
    entries.sort_by(|&(a, b), &(c, d)| {
        sim[[c, d]]
            .partial_cmp(&sim[[a, b]])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&c))
            .then(b.cmp(&d))
    });
    let mut src_free = vec![true; ns];
    let mut tgt_free = vec![true; nt];
    let mut matches = Vec::new();
    for (i, j) in entries {
        if src_free[i] && tgt_free[j] {
            src_free[i] = false;
            tgt_free[j] = false;
            matches.push((i, j, sim[[i, j]]));
            if matches.len() == ns.min(nt) {
                break;
            }
        }
    }
    MatchResult {
        matches,
        unmatched_sources: (0..ns).filter(|&i| src_free[i]).collect(),
        unmatched_targets: (0..nt).filter(|&j| tgt_free[j]).collect(),
    }
}

pub fn greedy_match(sources: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<MatchResult> {
    Ok(greedy_match_similarity(&cosine_similarity_matrix(sources, targets)?))
}

pub fn hits_at_n(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(PmfError::Data("no ranks to score".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

pub fn mean_reciprocal_rank(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(PmfError::Data("no ranks to score".into()));
    }
    if ranks.contains(&0) {
        return Err(PmfError::Data("ranks start at 1".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DirectionMetrics {
    pub hits1: f64,
    pub hits10: f64,
    pub mrr: f64,
}

impl DirectionMetrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            hits1: hits_at_n(ranks, 1)?,
            hits10: hits_at_n(ranks, 10)?,
            mrr: mean_reciprocal_rank(ranks)?,
        })
    }

    fn mean(a: &Self, b: &Self) -> Self {
        Self {
            hits1: (a.hits1 + b.hits1) / 2.0,
            hits10: (a.hits10 + b.hits10) / 2.0,
            mrr: (a.mrr + b.mrr) / 2.0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.hits1.is_finite() && self.hits10.is_finite() && self.mrr.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub src_to_tgt: DirectionMetrics,
    pub tgt_to_src: DirectionMetrics,
    pub mean: DirectionMetrics,
}

fn direction(
    queries: ArrayView2<'_, f64>,
    query_ids: &[usize],
    pool: ArrayView2<'_, f64>,
    pool_ids: &[usize],
    gold_ids: &[usize],
) -> Result<DirectionMetrics> {
    let position: HashMap<usize, usize> = pool_ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
    let gold = gold_ids
        .iter()
        .map(|g| {
            position
                .get(g)
                .copied()
                .ok_or_else(|| PmfError::Data(format!("gold entity {g} missing from candidate pool")))
        })
        .collect::<Result<Vec<_>>>()?;
    let q = queries.select(Axis(0), query_ids);
    let p = pool.select(Axis(0), pool_ids);
    let sim = cosine_similarity_matrix(q.view(), p.view())?;
    DirectionMetrics::from_ranks(&gold_ranks(&sim, &gold))
}

/// Metrics of `pairs` when each direction ranks against an explicit pool of
/// opposite-side entities.
pub fn evaluate_with_pool(
    source: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
    pairs: &[(usize, usize)],
    source_pool: &[usize],
    target_pool: &[usize],
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(PmfError::Data("evaluation needs at least one pair".into()));
    }
    let src_ids: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tgt_ids: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let bound = |ids: &[usize], n: usize, side: &str| match ids.iter().find(|&&i| i >= n) {
        Some(bad) => Err(PmfError::Data(format!("{side} entity {bad} outside {n} embeddings"))),
        None => Ok(()),
    };
    bound(&src_ids, source.nrows(), "source")?;
    bound(source_pool, source.nrows(), "source")?;
    bound(&tgt_ids, target.nrows(), "target")?;
    bound(target_pool, target.nrows(), "target")?;
    let s2t = direction(source, &src_ids, target, target_pool, &tgt_ids)?;
    let t2s = direction(target, &tgt_ids, source, source_pool, &src_ids)?;
    Ok(MetricsReport {
        src_to_tgt: s2t,
        tgt_to_src: t2s,
        mean: DirectionMetrics::mean(&s2t, &t2s),
    })
}

/// Standard protocol: each direction ranks the other side's entities of
/// `pairs`.
pub fn evaluate(source: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>, pairs: &[(usize, usize)]) -> Result<MetricsReport> {
    let sp: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let tp: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    evaluate_with_pool(source, target, pairs, &sp, &tp)
}
