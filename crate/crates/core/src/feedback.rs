//! Position-based feedback and feedback weights.
//!
//! For the j-th ground-truth item (in the order of the user's ground-truth
//! list) the target position is j; the actual position is where the rerank
//! put it. A user's weight is `1 / avg_pos` and a batch's weight is one over
//! the mean of its users' `avg_pos`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::BaselineRanking;
use crate::eval::{ndcg_at_k, NDCG_CUTOFF};
use crate::gateway::{ChatRequest, GatewayError, Llm};
use crate::profile::UserProfile;
use crate::prompts::{self, LossEvidence};
use crate::rerank::RerankedList;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackPair {
    pub actual_pos: usize,
    pub target_pos: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSet {
    pub user_id: String,
    /// Ground-truth item ids, parallel to `pairs`.
    pub items: Vec<String>,
    pub pairs: Vec<FeedbackPair>,
    pub diagnosis: String,
    pub avg_pos: f64,
    pub weight: f64,
    /// NDCG@10 of the reranked list, kept for metric-only feedback.
    pub ndcg_at_10: f64,
}

impl FeedbackSet {
    /// Every ground-truth item already sits at its target.
    pub fn is_on_target(&self) -> bool {
        self.pairs.iter().all(|p| p.actual_pos == p.target_pos)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FeedbackError {
    #[error("ground-truth item {item_id} of user {user_id} is not in the reranked list")]
    MissingGroundTruth { user_id: String, item_id: String },
    #[error("user {0} has no ground-truth items")]
    EmptyGroundTruth(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Pairs, mean position and weight for one reranked list. The diagnosis is
/// left empty; see [`verbalize_feedback`].
pub fn compute_feedback(
    reranked: &RerankedList,
    ground_truth: &[String],
) -> Result<FeedbackSet, FeedbackError> {
    if ground_truth.is_empty() {
        return Err(FeedbackError::EmptyGroundTruth(reranked.user_id.clone()));
    }
    let mut pairs = Vec::with_capacity(ground_truth.len());
    for (j, item) in ground_truth.iter().enumerate() {
        let pos = reranked
            .items
            .iter()
            .position(|id| id == item)
            .ok_or_else(|| FeedbackError::MissingGroundTruth {
                user_id: reranked.user_id.clone(),
                item_id: item.clone(),
            })?;
        pairs.push(FeedbackPair {
            actual_pos: pos + 1,
            target_pos: j + 1,
        });
    }
    let avg_pos = pairs.iter().map(|p| p.actual_pos as f64).sum::<f64>() / pairs.len() as f64;
    let ndcg = ndcg_at_k(&reranked.items, ground_truth, NDCG_CUTOFF).unwrap_or(0.0);
    Ok(FeedbackSet {
        user_id: reranked.user_id.clone(),
        items: ground_truth.to_vec(),
        pairs,
        diagnosis: String::new(),
        avg_pos,
        weight: 1.0 / avg_pos,
        ndcg_at_10: ndcg,
    })
}

/// `1 / mean(avg_pos)` over the batch.
pub fn batch_weight(feedbacks: &[FeedbackSet]) -> Result<f64, FeedbackError> {
    if feedbacks.is_empty() {
        return Err(FeedbackError::EmptyBatch);
    }
    let mean = feedbacks.iter().map(|f| f.avg_pos).sum::<f64>() / feedbacks.len() as f64;
    Ok(1.0 / mean)
}

fn title_of<'a>(candidates: &'a BaselineRanking, item_id: &'a str) -> &'a str {
    candidates
        .items
        .iter()
        .find(|i| i.item_id == item_id)
        .map(|i| i.title.as_str())
        .unwrap_or(item_id)
}

/// The deterministic head of a diagnosis: every pair, or just the metric
/// when position feedback is off.
fn diagnosis_header(fs: &FeedbackSet, candidates: &BaselineRanking, position_feedback: bool) -> String {
    let mut out = String::new();
    if position_feedback {
        if fs.is_on_target() {
            out.push_str("Position feedback: every ground-truth item is at its target position; no correction needed.\n");
        } else {
            for (item, pair) in fs.items.iter().zip(&fs.pairs) {
                let _ = writeln!(
                    out,
                    "Position feedback: \"{}\" ranked {} (target {}).",
                    title_of(candidates, item),
                    pair.actual_pos,
                    pair.target_pos
                );
            }
        }
    } else {
        let _ = writeln!(out, "Ranking metric: NDCG@10 = {:.4}.", fs.ndcg_at_10);
    }
    out
}

pub fn loss_request(
    fs: &FeedbackSet,
    profile: &UserProfile,
    prompt_text: &str,
    candidates: &BaselineRanking,
    position_feedback: bool,
) -> ChatRequest {
    if position_feedback {
        let rows: Vec<(String, usize, usize)> = fs
            .items
            .iter()
            .zip(&fs.pairs)
            .map(|(item, p)| (String::from(title_of(candidates, item)), p.actual_pos, p.target_pos))
            .collect();
        prompts::loss_request(prompt_text, &profile.text, LossEvidence::Positions(&rows))
    } else {
        prompts::loss_request(
            prompt_text,
            &profile.text,
            LossEvidence::Metric {
                ndcg_at_10: fs.ndcg_at_10,
            },
        )
    }
}

/// Attaches the model's explanation to `fs`, prefixed with the positions (or
/// the metric when `position_feedback` is false).
pub fn attach_diagnosis(
    mut fs: FeedbackSet,
    candidates: &BaselineRanking,
    position_feedback: bool,
    explanation: &str,
) -> FeedbackSet {
    let mut text = diagnosis_header(&fs, candidates, position_feedback);
    text.push_str(explanation.trim());
    fs.diagnosis = text;
    fs
}

/// One loss call explaining why the profile missed the ground truth.
pub fn verbalize_feedback(
    fs: FeedbackSet,
    profile: &UserProfile,
    prompt_text: &str,
    candidates: &BaselineRanking,
    position_feedback: bool,
    llm: &(impl Llm + ?Sized),
) -> Result<FeedbackSet, FeedbackError> {
    let request = loss_request(&fs, profile, prompt_text, candidates, position_feedback);
    let response = llm.complete(&request)?;
    Ok(attach_diagnosis(fs, candidates, position_feedback, &response.text))
}

/// Compact `(actual,target)` rendering used in logs.
pub fn pairs_digest(pairs: &[FeedbackPair]) -> String {
    let parts: Vec<String> = pairs
        .iter()
        .map(|p| format!("({},{})", p.actual_pos, p.target_pos))
        .collect();
    parts.join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rerank::RerankMode;
    use alloc::vec;

    fn list(items: &[&str]) -> RerankedList {
        RerankedList {
            user_id: "u".into(),
            items: items.iter().map(|s| String::from(*s)).collect(),
            mode: RerankMode::Agp,
            repair_applied: false,
            prompt_version: Some(0),
        }
    }

    fn gt(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| String::from(*s)).collect()
    }

    #[test]
    fn third_but_should_be_first() {
        let fs = compute_feedback(&list(&["a", "b", "x", "c"]), &gt(&["x"])).unwrap();
        assert_eq!(fs.pairs, [FeedbackPair { actual_pos: 3, target_pos: 1 }]);
        assert_eq!(fs.avg_pos, 3.0);
        assert!((fs.weight - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn already_optimal() {
        let fs = compute_feedback(&list(&["x", "a"]), &gt(&["x"])).unwrap();
        assert_eq!(fs.pairs, [FeedbackPair { actual_pos: 1, target_pos: 1 }]);
        assert_eq!(fs.weight, 1.0);
        assert!(fs.is_on_target());
    }

    #[test]
    fn two_ground_truth_items() {
        let fs = compute_feedback(&list(&["a", "y", "b", "c", "x"]), &gt(&["x", "y"])).unwrap();
        assert_eq!(
            fs.pairs,
            [
                FeedbackPair { actual_pos: 5, target_pos: 1 },
                FeedbackPair { actual_pos: 2, target_pos: 2 }
            ]
        );
        assert_eq!(fs.avg_pos, 3.5);
        assert!((fs.weight - 2.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn missing_ground_truth() {
        assert!(matches!(
            compute_feedback(&list(&["a"]), &gt(&["x"])),
            Err(FeedbackError::MissingGroundTruth { .. })
        ));
    }

    fn with_avg(avg: f64) -> FeedbackSet {
        FeedbackSet {
            user_id: "u".into(),
            items: vec![],
            pairs: vec![],
            diagnosis: String::new(),
            avg_pos: avg,
            weight: 1.0 / avg,
            ndcg_at_10: 0.0,
        }
    }

    #[test]
    fn batch_weights() {
        let w = |avgs: &[f64]| batch_weight(&avgs.iter().map(|a| with_avg(*a)).collect::<Vec<_>>()).unwrap();
        assert_eq!(w(&[1.0, 1.0, 1.0]), 1.0);
        assert!((w(&[2.0, 4.0]) - 1.0 / 3.0).abs() < 1e-12);
        assert!((w(&[5.0]) - 0.2).abs() < 1e-12);
        assert_eq!(batch_weight(&[]), Err(FeedbackError::EmptyBatch));
    }
}
