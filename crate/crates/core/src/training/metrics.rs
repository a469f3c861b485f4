//! Ranking metrics: MRR and Hits@{1,3,10} in raw and time-filtered modes.
//!
//! Ranks are 1-indexed; ties are resolved by assigning the truth the mean
//! rank of its tie group. The time-filtered mode removes the other true
//! objects of the same (subject, relation, timestamp) from the candidate
//! list before ranking, so filtered metrics always dominate raw ones.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

/// Rank of `truth` among the candidate scores, with `removed` indices
/// excluded from the competition (the truth itself is never excluded).
pub fn rank_of(scores: &[f64], truth: usize, removed: &HashSet<usize>) -> f64 {
    let target = scores[truth];
    let mut better = 0usize;
    let mut ties = 0usize;
    for (j, &s) in scores.iter().enumerate() {
        if j == truth || removed.contains(&j) {
            continue;
        }
        if s > target {
            better += 1;
        } else if s == target {
            ties += 1;
        }
    }
    better as f64 + 1.0 + ties as f64 / 2.0
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MetricSet {
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
}

impl MetricSet {
    pub fn from_ranks(ranks: &[f64]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        let mut set = Self::default();
        for &r in ranks {
            set.mrr += 1.0 / r;
            set.hits1 += f64::from(r <= 1.0);
            set.hits3 += f64::from(r <= 3.0);
            set.hits10 += f64::from(r <= 10.0);
        }
        set.mrr /= n;
        set.hits1 /= n;
        set.hits3 /= n;
        set.hits10 /= n;
        set
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimestampMetrics {
    pub t: u32,
    pub raw_mrr: f64,
    pub filtered_mrr: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub raw: MetricSet,
    pub filtered: MetricSet,
    pub num_queries: usize,
    pub per_timestamp: Vec<TimestampMetrics>,
    pub runtime_secs: f64,
}

impl MetricsReport {
    pub fn table_row(&self) -> String {
        format!(
            "{:<6} raw MRR {:.4} H@1 {:.4} H@3 {:.4} H@10 {:.4} | filtered MRR {:.4} H@1 {:.4} H@3 {:.4} H@10 {:.4} ({} queries, {:.1}s)",
            self.split,
            self.raw.mrr,
            self.raw.hits1,
            self.raw.hits3,
            self.raw.hits10,
            self.filtered.mrr,
            self.filtered.hits1,
            self.filtered.hits3,
            self.filtered.hits10,
            self.num_queries,
            self.runtime_secs,
        )
    }
}

/// Accumulates per-query raw and filtered ranks during an evaluation pass.
#[derive(Debug, Default)]
pub struct RankCollector {
    /// `(timestamp, raw rank, filtered rank)` per query.
    pub rows: Vec<(u32, f64, f64)>,
}

impl RankCollector {
    pub fn push(&mut self, t: u32, raw_rank: f64, filtered_rank: f64) {
        self.rows.push((t, raw_rank, filtered_rank));
    }

    pub fn finalize(&self, split: &str, runtime_secs: f64) -> MetricsReport {
        let raw_ranks: Vec<f64> = self.rows.iter().map(|r| r.1).collect();
        let filtered_ranks: Vec<f64> = self.rows.iter().map(|r| r.2).collect();
        let mut per_timestamp = Vec::new();
        let mut ts: Vec<u32> = self.rows.iter().map(|r| r.0).collect();
        ts.sort_unstable();
        ts.dedup();
        for t in ts {
            let raw: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.0 == t)
                .map(|r| r.1)
                .collect();
            let filt: Vec<f64> = self
                .rows
                .iter()
                .filter(|r| r.0 == t)
                .map(|r| r.2)
                .collect();
            per_timestamp.push(TimestampMetrics {
                t,
                raw_mrr: MetricSet::from_ranks(&raw).mrr,
                filtered_mrr: MetricSet::from_ranks(&filt).mrr,
                queries: raw.len(),
            });
        }
        MetricsReport {
            split: split.to_string(),
            raw: MetricSet::from_ranks(&raw_ranks),
            filtered: MetricSet::from_ranks(&filtered_ranks),
            num_queries: self.rows.len(),
            per_timestamp,
            runtime_secs,
        }
    }
}
