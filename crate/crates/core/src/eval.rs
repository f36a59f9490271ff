//! Ranking metrics and per-run reports.
//!
//! Relevance is binary with gain 1 and discount `1 / log2(p + 1)` for the
//! 1-indexed position `p`. Items beyond the cutoff contribute nothing and the
//! ideal DCG sums `min(|relevant|, k)` terms.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::rerank::RerankMode;

/// Cutoff used for every reported NDCG.
pub const NDCG_CUTOFF: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("cutoff must be at least 1")]
    ZeroCutoff,
    #[error("relevant item {0} is not in the ranked list")]
    MissingItem(String),
    #[error("no per-user results to aggregate")]
    EmptyReport,
}

fn discount(position: usize) -> f64 {
    1.0 / libm::log2(position as f64 + 1.0)
}

/// NDCG@k of `ranked` against a binary relevant set.
pub fn ndcg_at_k<S: AsRef<str>, T: AsRef<str>>(
    ranked: &[S],
    relevant: &[T],
    k: usize,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevant);
    }
    let is_relevant = |id: &str| relevant.iter().any(|r| r.as_ref() == id);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| is_relevant(id.as_ref()))
        .map(|(i, _)| discount(i + 1))
        .sum();
    let ideal: f64 = (1..=relevant.len().min(k)).map(discount).sum();
    Ok(dcg / ideal)
}

/// Mean 1-indexed position of the relevant items.
pub fn average_position<S: AsRef<str>, T: AsRef<str>>(
    ranked: &[S],
    relevant: &[T],
) -> Result<f64, MetricError> {
    if relevant.is_empty() {
        return Err(MetricError::EmptyRelevant);
    }
    let mut total = 0usize;
    for item in relevant {
        let pos = ranked
            .iter()
            .position(|r| r.as_ref() == item.as_ref())
            .ok_or_else(|| MetricError::MissingItem(String::from(item.as_ref())))?;
        total += pos + 1;
    }
    Ok(total as f64 / relevant.len() as f64)
}

/// One user's outcome under one rerank mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserResult {
    pub user_id: String,
    pub ndcg_at_10: f64,
    pub gt_avg_pos: f64,
    pub hit: bool,
    pub repair_applied: bool,
    pub prompt_version: Option<u32>,
}

impl UserResult {
    pub fn score<S: AsRef<str>, T: AsRef<str>>(
        user_id: &str,
        ranked: &[S],
        relevant: &[T],
        repair_applied: bool,
        prompt_version: Option<u32>,
    ) -> Result<Self, MetricError> {
        let ndcg = ndcg_at_k(ranked, relevant, NDCG_CUTOFF)?;
        let avg = average_position(ranked, relevant)?;
        let hit = ranked
            .iter()
            .take(NDCG_CUTOFF)
            .any(|id| relevant.iter().any(|r| r.as_ref() == id.as_ref()));
        Ok(UserResult {
            user_id: user_id.into(),
            ndcg_at_10: ndcg,
            gt_avg_pos: avg,
            hit,
            repair_applied,
            prompt_version,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: RerankMode,
    pub n_users: usize,
    pub mean_ndcg_at_k: f64,
    pub mean_gt_position: f64,
    pub hit_rate_at_k: f64,
    pub repair_rate: f64,
    /// Users excluded because their rerank failed.
    pub failed_users: Vec<String>,
    pub rows: Vec<UserResult>,
}

pub fn build_report(rows: Vec<UserResult>, mode: RerankMode) -> Result<MetricReport, MetricError> {
    if rows.is_empty() {
        return Err(MetricError::EmptyReport);
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&UserResult) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(MetricReport {
        mode,
        n_users: rows.len(),
        mean_ndcg_at_k: mean(|r| r.ndcg_at_10),
        mean_gt_position: mean(|r| r.gt_avg_pos),
        hit_rate_at_k: mean(|r| if r.hit { 1.0 } else { 0.0 }),
        repair_rate: mean(|r| if r.repair_applied { 1.0 } else { 0.0 }),
        failed_users: Vec::new(),
        rows,
    })
}

impl MetricReport {
    /// `user_id,mode,ndcg_at_10,gt_avg_pos,repair_applied,prompt_version`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("user_id,mode,ndcg_at_10,gt_avg_pos,repair_applied,prompt_version\n");
        for row in &self.rows {
            let version = row.prompt_version.map(|v| format!("{v}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.4},{},{}",
                row.user_id, self.mode, row.ndcg_at_10, row.gt_avg_pos, row.repair_applied, version
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mode:              {}", self.mode);
        let _ = writeln!(out, "users:             {}", self.n_users);
        let _ = writeln!(out, "mean NDCG@{}:      {:.4}", NDCG_CUTOFF, self.mean_ndcg_at_k);
        let _ = writeln!(out, "mean GT position:  {:.3}", self.mean_gt_position);
        let _ = writeln!(out, "hit rate@{}:       {:.4}", NDCG_CUTOFF, self.hit_rate_at_k);
        let _ = writeln!(out, "repair rate:       {:.4}", self.repair_rate);
        if !self.failed_users.is_empty() {
            let _ = writeln!(out, "failed users:      {}", self.failed_users.len());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn list(n: usize) -> Vec<String> {
        (1..=n).map(|i| format!("i{i}")).collect()
    }

    #[test]
    fn ndcg_reference_values() {
        let ranked = list(12);
        assert_eq!(ndcg_at_k(&ranked, &["i1"], 10).unwrap(), 1.0);
        assert_eq!(ndcg_at_k(&ranked, &["i3"], 10).unwrap(), 0.5);
        assert_eq!(ndcg_at_k(&ranked, &["i11"], 10).unwrap(), 0.0);
        let two = ndcg_at_k(&ranked, &["i1", "i4"], 10).unwrap();
        assert!((two - 0.877_215_315_338_049_3).abs() < 1e-12, "{two}");
    }

    #[test]
    fn ndcg_errors() {
        let ranked = list(3);
        let none: [&str; 0] = [];
        assert_eq!(ndcg_at_k(&ranked, &none, 10), Err(MetricError::EmptyRelevant));
        assert_eq!(ndcg_at_k(&ranked, &["i1"], 0), Err(MetricError::ZeroCutoff));
    }

    #[test]
    fn average_positions() {
        let ranked = list(10);
        assert_eq!(average_position(&ranked, &["i4"]).unwrap(), 4.0);
        assert_eq!(average_position(&ranked, &["i2", "i6"]).unwrap(), 4.0);
        assert_eq!(
            average_position(&ranked, &["zz"]),
            Err(MetricError::MissingItem("zz".into()))
        );
    }

    fn row(ndcg: f64, repaired: bool) -> UserResult {
        UserResult {
            user_id: "u".into(),
            ndcg_at_10: ndcg,
            gt_avg_pos: 1.0,
            hit: true,
            repair_applied: repaired,
            prompt_version: Some(0),
        }
    }

    #[test]
    fn report_aggregates() {
        let r = build_report(vec![row(1.0, false), row(0.5, false)], RerankMode::Agp).unwrap();
        assert_eq!(r.mean_ndcg_at_k, 0.75);
        let r = build_report(
            vec![row(1.0, true), row(1.0, false), row(1.0, false), row(1.0, false)],
            RerankMode::Agp,
        )
        .unwrap();
        assert_eq!(r.repair_rate, 0.25);
        assert_eq!(build_report(vec![], RerankMode::Base), Err(MetricError::EmptyReport));
        assert!(r.to_csv().starts_with("user_id,mode,ndcg_at_10,gt_avg_pos,repair_applied,prompt_version\nu,agp,"));
    }
}
