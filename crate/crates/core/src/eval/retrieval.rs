use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use super::groups::{EvalGroup, Protocol};
use crate::error::{Error, Result};

/// Average precision of a ranked relevance list: the mean, over relevant
/// positions `k`, of precision in the top `k`.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::Invalid(
            "average precision needs at least one relevant item".into(),
        ));
    }
    Ok(sum / hits as f64)
}

/// Similarity between two catalog records; higher means more similar.
pub trait Scorer: Sync {
    fn score(&self, a: usize, b: usize) -> Result<f64>;

    /// When true, only one direction of each pair is evaluated.
    fn symmetric(&self) -> bool {
        false
    }
}

impl<F> Scorer for F
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    fn score(&self, a: usize, b: usize) -> Result<f64> {
        self(a, b)
    }
}

/// Marks a scorer as symmetric.
pub struct Symmetric<F>(pub F);

impl<F> Scorer for Symmetric<F>
where
    F: Fn(usize, usize) -> Result<f64> + Sync,
{
    fn score(&self, a: usize, b: usize) -> Result<f64> {
        (self.0)(a, b)
    }

    fn symmetric(&self) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryOutcome {
    pub query: usize,
    pub ap: f64,
    pub hit: bool,
    /// Chance top-1 rate for this query: positives / candidates.
    pub chance_top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRetrieval {
    pub queries: Vec<QueryOutcome>,
}

/// Every member queries all others. Candidates are ranked by descending
/// score, ties by ascending catalog index.
pub fn evaluate_group(group: &EvalGroup, scorer: &dyn Scorer) -> Result<GroupRetrieval> {
    let m = &group.members;
    let n = m.len();
    let mut scores = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || (scorer.symmetric() && j < i) {
                continue;
            }
            let s = scorer.score(m[i].index, m[j].index)?;
            if !s.is_finite() {
                return Err(Error::Invalid(format!(
                    "non-finite score between records {} and {}",
                    m[i].index, m[j].index
                )));
            }
            scores[i * n + j] = s;
            if scorer.symmetric() {
                scores[j * n + i] = s;
            }
        }
    }
    let mut queries = Vec::with_capacity(n);
    for q in 0..n {
        let mut cands: Vec<usize> = (0..n).filter(|&c| c != q).collect();
        cands.sort_by(|&a, &b| {
            scores[q * n + b]
                .total_cmp(&scores[q * n + a])
                .then(m[a].index.cmp(&m[b].index))
        });
        let rel: Vec<bool> = cands.iter().map(|&c| m[c].label == m[q].label).collect();
        let positives = rel.iter().filter(|r| **r).count();
        queries.push(QueryOutcome {
            query: m[q].index,
            ap: average_precision(&rel)?,
            hit: rel.first().copied().unwrap_or(false),
            chance_top1: positives as f64 / rel.len() as f64,
        });
    }
    Ok(GroupRetrieval { queries })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Score {
    pub map: f64,
    pub top1: f64,
    pub queries: usize,
}

impl Score {
    fn from_outcomes<'a>(outcomes: impl Iterator<Item = &'a QueryOutcome>) -> Self {
        let (mut ap, mut hits, mut n) = (0.0, 0usize, 0usize);
        for o in outcomes {
            ap += o.ap;
            hits += usize::from(o.hit);
            n += 1;
        }
        if n == 0 {
            return Score::default();
        }
        Score {
            map: ap / n as f64,
            top1: hits as f64 / n as f64,
            queries: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupScore {
    pub protocol: Protocol,
    pub category: String,
    pub key: String,
    #[serde(flatten)]
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupFailure {
    pub category: String,
    pub key: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalReport {
    /// Unweighted mean over all queries.
    pub map: f64,
    pub top1: f64,
    pub queries: usize,
    /// Mean chance top-1 over the same queries.
    pub chance_top1: f64,
    /// Mean over categories (object pairs) of their per-query means.
    pub pair_mean: Score,
    pub per_category: BTreeMap<String, Score>,
    pub per_group: Vec<GroupScore>,
    pub failures: Vec<GroupFailure>,
}

/// Per-group outcomes keyed by group position. Merging is a disjoint union,
/// so it is associative and order-independent; totals are summed in key
/// order by [`RetrievalPartial::finish`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetrievalPartial {
    results: BTreeMap<usize, std::result::Result<GroupRetrieval, String>>,
}

impl RetrievalPartial {
    pub fn single(position: usize, result: Result<GroupRetrieval>) -> Self {
        let mut results = BTreeMap::new();
        results.insert(position, result.map_err(|e| e.to_string()));
        Self { results }
    }

    pub fn merge(mut self, other: Self) -> Self {
        for (k, v) in other.results {
            let prev = self.results.insert(k, v);
            debug_assert!(prev.is_none(), "group {k} merged twice");
        }
        self
    }

    pub fn finish(&self, groups: &[EvalGroup]) -> RetrievalReport {
        let mut all = Vec::new();
        let mut by_cat: BTreeMap<String, Vec<QueryOutcome>> = BTreeMap::new();
        let mut per_group = Vec::new();
        let mut failures = Vec::new();
        for (&pos, res) in &self.results {
            let g = &groups[pos];
            match res {
                Ok(r) => {
                    all.extend_from_slice(&r.queries);
                    by_cat
                        .entry(g.category.clone())
                        .or_default()
                        .extend_from_slice(&r.queries);
                    per_group.push(GroupScore {
                        protocol: g.protocol,
                        category: g.category.clone(),
                        key: g.key.clone(),
                        score: Score::from_outcomes(r.queries.iter()),
                    });
                }
                Err(e) => failures.push(GroupFailure {
                    category: g.category.clone(),
                    key: g.key.clone(),
                    error: e.clone(),
                }),
            }
        }
        let total = Score::from_outcomes(all.iter());
        let per_category: BTreeMap<String, Score> = by_cat
            .iter()
            .map(|(c, qs)| (c.clone(), Score::from_outcomes(qs.iter())))
            .collect();
        let k = per_category.len().max(1) as f64;
        let pair_mean = Score {
            map: per_category.values().map(|s| s.map).sum::<f64>() / k,
            top1: per_category.values().map(|s| s.top1).sum::<f64>() / k,
            queries: total.queries,
        };
        let chance = if all.is_empty() {
            0.0
        } else {
            all.iter().map(|o| o.chance_top1).sum::<f64>() / all.len() as f64
        };
        RetrievalReport {
            map: total.map,
            top1: total.top1,
            queries: total.queries,
            chance_top1: chance,
            pair_mean,
            per_category,
            per_group,
            failures,
        }
    }
}

/// Runs every group (in parallel on the current rayon pool) and aggregates.
/// A scorer failure aborts only its group, which is listed in `failures`.
pub fn retrieval_eval(groups: &[EvalGroup], scorer: &dyn Scorer) -> RetrievalReport {
    groups
        .par_iter()
        .enumerate()
        .map(|(i, g)| RetrievalPartial::single(i, evaluate_group(g, scorer)))
        .reduce(RetrievalPartial::default, RetrievalPartial::merge)
        .finish(groups)
}

/// Expected top-1 of a uniformly random ranking, averaged over all queries.
pub fn random_top1_baseline(groups: &[EvalGroup]) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for g in groups {
        let size = g.members.len();
        for q in &g.members {
            let pos = g.members.iter().filter(|m| m.label == q.label).count() - 1;
            sum += pos as f64 / (size - 1) as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::Member;

    /// AP straight from the definition: list every relevant position and the
    /// precision of the prefix ending there.
    fn ap_oracle(rel: &[bool]) -> f64 {
        let positions: Vec<usize> = (0..rel.len()).filter(|&i| rel[i]).collect();
        let precisions: Vec<f64> = positions
            .iter()
            .map(|&k| rel[..=k].iter().filter(|r| **r).count() as f64 / (k + 1) as f64)
            .collect();
        precisions.iter().sum::<f64>() / precisions.len() as f64
    }

    fn group(labels: &[u32]) -> EvalGroup {
        EvalGroup {
            protocol: Protocol::Illumination,
            category: "c".into(),
            key: "k".into(),
            members: labels
                .iter()
                .enumerate()
                .map(|(i, &label)| Member { index: i, label })
                .collect(),
        }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false, false]).unwrap(), 1.0);
        assert!((average_precision(&[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((average_precision(&[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(average_precision(&[false, false]).is_err());
        assert!(average_precision(&[]).is_err());
        assert!((ap_oracle(&[true, false, true]) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn oracle_scorer_is_perfect() {
        let g = group(&[1, 1, 1, 1, 2, 2, 2, 2]);
        let labels = g.labels();
        let scorer = |a: usize, b: usize| Ok(if labels[a] == labels[b] { 1.0 } else { 0.0 });
        let r = retrieval_eval(std::slice::from_ref(&g), &scorer);
        assert_eq!((r.map, r.top1, r.queries), (1.0, 1.0, 8));
    }

    #[test]
    fn constant_scorer_follows_index_order() {
        let g = group(&[1, 1, 1, 1, 2, 2, 2, 2]);
        let r = evaluate_group(&g, &|_: usize, _: usize| Ok(0.5)).unwrap();
        for (q, out) in r.queries.iter().enumerate() {
            // Brute force: the ranking is the other members in index order.
            let rel: Vec<bool> = (0..8).filter(|&c| c != q).map(|c| (c < 4) == (q < 4)).collect();
            assert_eq!(out.ap, ap_oracle(&rel));
            assert_eq!(out.hit, rel[0]);
        }
        assert!((r.queries[0].chance_top1 - 3.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn scorer_failure_aborts_group() {
        let groups = vec![group(&[1, 1, 2, 2]), group(&[1, 1, 2, 2])];
        let fails = |a: usize, b: usize| {
            if a == 3 && b == 0 {
                Err(Error::Invalid("boom".into()))
            } else {
                Ok((a + b) as f64)
            }
        };
        let r = retrieval_eval(&groups, &fails);
        assert_eq!(r.failures.len(), 2);
        assert_eq!(r.queries, 0);
    }

    #[test]
    fn symmetric_scorer_scores_each_pair_once() {
        use std::sync::atomic::{AtomicUsize, Ordering};
        let calls = AtomicUsize::new(0);
        let g = group(&[1, 1, 2, 2]);
        let f = |a: usize, b: usize| {
            calls.fetch_add(1, Ordering::Relaxed);
            Ok(-(a as f64 - b as f64).abs())
        };
        let sym = evaluate_group(&g, &Symmetric(&f)).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 6);
        let full = evaluate_group(&g, &f).unwrap();
        assert_eq!(sym, full);
    }

    #[test]
    fn merge_is_order_independent() {
        let groups: Vec<EvalGroup> = (0..5).map(|_| group(&[1, 2, 1, 2, 1])).collect();
        let scorer = |a: usize, b: usize| Ok(((a * 7 + b * 3) % 5) as f64);
        let parts: Vec<RetrievalPartial> = groups
            .iter()
            .enumerate()
            .map(|(i, g)| RetrievalPartial::single(i, evaluate_group(g, &scorer)))
            .collect();
        let forward = parts
            .iter()
            .cloned()
            .fold(RetrievalPartial::default(), RetrievalPartial::merge);
        let backward = parts
            .iter()
            .rev()
            .cloned()
            .fold(RetrievalPartial::default(), RetrievalPartial::merge);
        let nested = parts[0]
            .clone()
            .merge(parts[1].clone().merge(parts[2].clone()))
            .merge(parts[3].clone().merge(parts[4].clone()));
        assert_eq!(forward.finish(&groups), backward.finish(&groups));
        assert_eq!(forward.finish(&groups), nested.finish(&groups));
    }
}
