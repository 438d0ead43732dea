//! Ranking metrics and the all-ranking evaluation loop.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{InteractionSequence, ItemIdx};
use crate::error::Result;
use crate::exec::Exec;

/// 1 when `target` is among the first `k` entries.
pub fn recall_at_k<I: PartialEq>(ranked: &[I], target: &I, k: usize) -> f64 {
    if ranked.iter().take(k).any(|x| x == target) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank within `k`, else 0.
pub fn ndcg_at_k<I: PartialEq>(ranked: &[I], target: &I, k: usize) -> f64 {
    match ranked.iter().take(k).position(|x| x == target) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    }
}

pub const CUTOFFS: [usize; 2] = [5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user_id: String,
    pub target: ItemIdx,
    pub ranked: Vec<ItemIdx>,
    pub error: Option<String>,
    pub recall5: f64,
    pub recall10: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

impl UserResult {
    pub fn new(user_id: &str, target: ItemIdx, ranking: std::result::Result<Vec<ItemIdx>, String>) -> Self {
        let (ranked, error) = match ranking {
            Ok(r) => (r, None),
            Err(e) => (Vec::new(), Some(e)),
        };
        UserResult {
            user_id: user_id.to_string(),
            target,
            recall5: recall_at_k(&ranked, &target, 5),
            recall10: recall_at_k(&ranked, &target, 10),
            ndcg5: ndcg_at_k(&ranked, &target, 5),
            ndcg10: ndcg_at_k(&ranked, &target, 10),
            ranked,
            error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub users: usize,
    pub errors: usize,
    #[serde(rename = "recall@5")]
    pub recall5: f64,
    #[serde(rename = "recall@10")]
    pub recall10: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg5: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg10: f64,
    pub seed: u64,
    pub checkpoint_hash: String,
    /// Config hash of the run; empty for in-memory evaluations.
    #[serde(default)]
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_users(results: &[UserResult], seed: u64, checkpoint_hash: &str) -> Self {
        let n = results.len().max(1) as f64;
        let mean = |f: fn(&UserResult) -> f64| results.iter().map(f).sum::<f64>() / n;
        MetricsReport {
            users: results.len(),
            errors: results.iter().filter(|r| r.error.is_some()).count(),
            recall5: mean(|r| r.recall5),
            recall10: mean(|r| r.recall10),
            ndcg5: mean(|r| r.ndcg5),
            ndcg10: mean(|r| r.ndcg10),
            seed,
            checkpoint_hash: checkpoint_hash.to_string(),
            config_hash: String::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable report");
        s.push('\n');
        s
    }
}

/// Per-user detail: `user_id, target, error, metrics, ranked ids`.
pub fn detail_tsv(results: &[UserResult], item_id: impl Fn(ItemIdx) -> String) -> String {
    let mut s = String::from("user_id\ttarget\terror\trecall@5\trecall@10\tndcg@5\tndcg@10\tranked\n");
    for r in results {
        let ranked: Vec<String> = r.ranked.iter().map(|&i| item_id(i)).collect();
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.user_id,
            item_id(r.target),
            r.error.as_deref().unwrap_or("-"),
            r.recall5,
            r.recall10,
            r.ndcg5,
            r.ndcg10,
            ranked.join(",")
        );
    }
    s
}

/// Ranks the catalog for every user's test history via `rank` and scores the
/// test target. A failing user scores 0 everywhere and is counted in `errors`.
pub fn evaluate<F>(data: &[InteractionSequence], exec: Exec, rank: F) -> Vec<UserResult>
where
    F: Fn(&InteractionSequence) -> Result<Vec<ItemIdx>> + Sync + Send,
{
    exec.map(data, |seq| {
        let ranking = rank(seq).map_err(|e| e.to_string());
        UserResult::new(&seq.user_id, seq.test_target(), ranking)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn metric_examples() {
        let r = [7, 3, 9, 1, 2, 5];
        assert_eq!(recall_at_k(&r, &7, 5), 1.0);
        assert_eq!(recall_at_k(&r, &5, 5), 0.0);
        assert_eq!(recall_at_k(&r, &42, 5), 0.0);
        assert_eq!(ndcg_at_k(&r, &7, 5), 1.0);
        assert!((ndcg_at_k(&r, &3, 5) - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&r, &9, 5), 0.5);
        assert_eq!(ndcg_at_k(&r, &5, 5), 0.0);
    }

    #[test]
    fn report_means_and_errors() {
        let seq = |u: &str, items: &[u32]| InteractionSequence {
            user_id: u.into(),
            items: items.iter().map(|&i| ItemIdx(i)).collect(),
        };
        let data = vec![seq("a", &[0, 1, 2, 3, 4]), seq("b", &[0, 1, 2, 3, 5]), seq("c", &[0, 1, 2, 3, 6])];
        let results = evaluate(&data, Exec::Sequential, |s| match s.user_id.as_str() {
            "a" => Ok(vec![ItemIdx(4), ItemIdx(9)]),
            "b" => Ok(vec![ItemIdx(8), ItemIdx(9), ItemIdx(5)]),
            _ => Err(Error::Degenerate("zero".into())),
        });
        let rep = MetricsReport::from_users(&results, 1, "h");
        assert_eq!(rep.users, 3);
        assert_eq!(rep.errors, 1);
        assert!((rep.ndcg5 - 0.5).abs() < 1e-12);
        assert!((rep.recall5 - 2.0 / 3.0).abs() < 1e-12);
        let json = rep.to_json();
        assert!(json.contains("\"recall@5\""));
        let tsv = detail_tsv(&results, |i| format!("m{}", i.0));
        assert_eq!(tsv.lines().count(), 4);
    }
}
