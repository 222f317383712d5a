//! Top-K ranking metrics with train-positive masking.
//!
//! Two notions of rank coexist on purpose:
//!
//! * [`rank_by_counting`] — the tie-pessimistic formula
//!   `pi(i) = #{ j : score(j) >= score(i) }` (self included).  The theory
//!   verifiers use this one because it is the exact quantity the surrogate
//!   bounds are stated against.
//! * evaluation rank — position in the list sorted by score descending with
//!   ties broken by ascending item index.  Metrics use this one; it is what a
//!   deployed ranker would produce and it is deterministic.
//!
//! [`evaluate`] scores every item per user, masks the user's train (and
//! validation) positives to `-inf` so they cannot occupy top slots, and
//! averages Recall@K, NDCG@K, and MRR@K over users that have at least one
//! test positive; other users are skipped, not counted as zeros.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SplitBundle};
use crate::error::{Error, Result};
use crate::model::Scorer;

/// `#{ j : scores[j] >= scores[i] }`, counting `i` itself — so the best item
/// has rank 1 and `n` tied maxima all have rank `n`.
pub fn rank_by_counting(scores: &[f64], i: usize) -> usize {
    let s = scores[i];
    scores.iter().filter(|&&x| x >= s).count()
}

/// Metrics at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub recall: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// Averaged metrics per cutoff plus how many users entered the average.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_k: BTreeMap<usize, MetricRow>,
    pub n_users: usize,
}

impl MetricReport {
    /// Flat JSON object: one entry per cutoff (stringified K) plus
    /// `"n_users"`.  Key order is the serializer's deterministic map order.
    pub fn to_json_value(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (k, row) in &self.per_k {
            map.insert(
                k.to_string(),
                serde_json::json!({
                    "recall": row.recall,
                    "ndcg": row.ndcg,
                    "mrr": row.mrr,
                }),
            );
        }
        map.insert("n_users".to_string(), serde_json::json!(self.n_users));
        serde_json::Value::Object(map)
    }
}

/// `1 / log2(1 + rank)`, the positional discount.
fn discount(rank: usize) -> f64 {
    1.0 / (1.0 + rank as f64).log2()
}

/// Evaluate `targets` under masking: each user's `mask` items score `-inf`
/// before ranking.  `score(user, item)` supplies raw scores; users without
/// targets are skipped.
pub fn evaluate_against<F>(
    score: F,
    n_items: usize,
    targets: &Dataset,
    masks: &[&Dataset],
    ks: &[usize],
) -> Result<MetricReport>
where
    F: Fn(u32, u32) -> f64,
{
    if ks.is_empty() || ks.iter().any(|&k| k == 0) {
        return Err(Error::config("cutoff list must be non-empty positive integers"));
    }
    let mut sums: BTreeMap<usize, MetricRow> = ks
        .iter()
        .map(|&k| {
            (
                k,
                MetricRow {
                    recall: 0.0,
                    ndcg: 0.0,
                    mrr: 0.0,
                },
            )
        })
        .collect();
    let mut n_users = 0usize;

    let mut scores = vec![0.0f64; n_items];
    let mut order: Vec<u32> = Vec::with_capacity(n_items);
    let mut rank_of = vec![0usize; n_items];

    for user in 0..targets.n_users() as u32 {
        let user_targets = targets.positives(user);
        if user_targets.is_empty() {
            continue;
        }
        n_users += 1;

        for item in 0..n_items {
            scores[item] = score(user, item as u32);
        }
        for mask in masks {
            for &item in mask.positives(user) {
                scores[item as usize] = f64::NEG_INFINITY;
            }
        }

        // Rank: score descending, ties by ascending item index.
        order.clear();
        order.extend(0..n_items as u32);
        order.sort_by(|&a, &b| {
            scores[b as usize]
                .partial_cmp(&scores[a as usize])
                .expect("masked scores are never NaN")
                .then(a.cmp(&b))
        });
        for (pos, &item) in order.iter().enumerate() {
            rank_of[item as usize] = pos + 1;
        }

        for (&k, sum) in sums.iter_mut() {
            let hits: Vec<usize> = user_targets
                .iter()
                .map(|&t| rank_of[t as usize])
                .filter(|&r| r <= k)
                .collect();
            let recall = hits.len() as f64 / user_targets.len() as f64;
            let dcg: f64 = hits.iter().map(|&r| discount(r)).sum();
            let ideal_len = k.min(user_targets.len());
            let idcg: f64 = (1..=ideal_len).map(discount).sum();
            let ndcg = dcg / idcg;
            let mrr = if hits.is_empty() {
                0.0
            } else {
                hits.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / hits.len() as f64
            };
            sum.recall += recall;
            sum.ndcg += ndcg;
            sum.mrr += mrr;
        }
    }

    if n_users == 0 {
        return Err(Error::data("no user has any target item to evaluate"));
    }
    for row in sums.values_mut() {
        row.recall /= n_users as f64;
        row.ndcg /= n_users as f64;
        row.mrr /= n_users as f64;
    }
    Ok(MetricReport {
        per_k: sums,
        n_users,
    })
}

/// Standard test evaluation of a split: targets are the test positives, and
/// both train and validation positives are masked.
pub fn evaluate(scorer: &Scorer<'_>, split: &SplitBundle, ks: &[usize]) -> Result<MetricReport> {
    let mut masks: Vec<&Dataset> = vec![&split.train];
    if let Some(validation) = &split.validation {
        masks.push(validation);
    }
    evaluate_against(
        |u, i| scorer.score(u, i),
        split.n_items(),
        &split.test,
        &masks,
        ks,
    )
}

/// How well a model has memorized its own train set: targets are the train
/// positives and nothing is masked.
pub fn evaluate_train(scorer: &Scorer<'_>, split: &SplitBundle, ks: &[usize]) -> Result<MetricReport> {
    evaluate_against(
        |u, i| scorer.score(u, i),
        split.n_items(),
        &split.train,
        &[],
        ks,
    )
}
