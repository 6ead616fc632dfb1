//! Top-k ranking metrics with binary relevance.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the ideal DCG is truncated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IdcgMode {
    /// Sum over the first `min(k, |relevant|)` positions.
    #[default]
    MinRelevant,
    /// Sum over the first `k` positions regardless of how many are relevant.
    K,
}

fn check_unique(ranked: &[usize]) -> Result<()> {
    let mut seen = HashSet::with_capacity(ranked.len());
    for &id in ranked {
        if !seen.insert(id) {
            return Err(Error::Integrity(format!("item {id} appears twice in a ranking")));
        }
    }
    Ok(())
}

fn hits(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> usize {
    ranked.iter().take(k).filter(|i| relevant.contains(i)).count()
}

fn check_relevant(relevant: &HashSet<usize>) -> Result<()> {
    if relevant.is_empty() {
        return Err(Error::Evaluation("empty relevant set".into()));
    }
    Ok(())
}

pub fn recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    check_relevant(relevant)?;
    check_unique(ranked)?;
    Ok(hits(ranked, relevant, k) as f64 / relevant.len() as f64)
}

/// The denominator is `k` even when fewer than `k` items are ranked.
pub fn precision_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    check_relevant(relevant)?;
    check_unique(ranked)?;
    if k == 0 {
        return Err(Error::Evaluation("k must be positive".into()));
    }
    Ok(hits(ranked, relevant, k) as f64 / k as f64)
}

pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Result<f64> {
    ndcg_at_k_with(ranked, relevant, k, IdcgMode::MinRelevant)
}

pub fn ndcg_at_k_with(ranked: &[usize], relevant: &HashSet<usize>, k: usize, mode: IdcgMode) -> Result<f64> {
    check_relevant(relevant)?;
    check_unique(ranked)?;
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| discount(pos))
        .sum();
    let ideal_len = match mode {
        IdcgMode::MinRelevant => k.min(relevant.len()),
        IdcgMode::K => k,
    };
    let idcg: f64 = (0..ideal_len).map(discount).sum();
    if idcg == 0.0 {
        return Ok(0.0);
    }
    Ok(dcg / idcg)
}

/// Metrics at one cutoff, averaged over evaluated users.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsAtK {
    pub k: usize,
    pub recall: f64,
    pub precision: f64,
    pub ndcg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    pub at: Vec<MetricsAtK>,
}

impl MetricsReport {
    pub fn at_k(&self, k: usize) -> Option<&MetricsAtK> {
        self.at.iter().find(|m| m.k == k)
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.at_k(k).map(|m| m.recall)
    }
}

/// Averages per-user metrics over users with at least one relevant item.
/// Both maps must have the same user keys.
pub fn evaluate_users(
    rankings: &BTreeMap<usize, Vec<usize>>,
    relevants: &BTreeMap<usize, HashSet<usize>>,
    ks: &[usize],
    mode: IdcgMode,
) -> Result<MetricsReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Evaluation(format!("cutoffs must be positive, got {ks:?}")));
    }
    if rankings.len() != relevants.len() || rankings.keys().zip(relevants.keys()).any(|(a, b)| a != b) {
        return Err(Error::Evaluation("rankings and relevance cover different users".into()));
    }
    let mut sums = vec![[0.0f64; 3]; ks.len()];
    let mut users = 0;
    for (user, ranked) in rankings {
        let relevant = &relevants[user];
        if relevant.is_empty() {
            continue;
        }
        check_unique(ranked).map_err(|e| Error::Integrity(format!("user {user}: {e}")))?;
        users += 1;
        for (sum, &k) in sums.iter_mut().zip(ks) {
            sum[0] += recall_at_k(ranked, relevant, k)?;
            sum[1] += precision_at_k(ranked, relevant, k)?;
            sum[2] += ndcg_at_k_with(ranked, relevant, k, mode)?;
        }
    }
    if users == 0 {
        return Err(Error::Evaluation("no user has a relevant item".into()));
    }
    let n = users as f64;
    Ok(MetricsReport {
        users,
        at: ks
            .iter()
            .zip(sums)
            .map(|(&k, s)| MetricsAtK {
                k,
                recall: s[0] / n,
                precision: s[1] / n,
                ndcg: s[2] / n,
            })
            .collect(),
    })
}
