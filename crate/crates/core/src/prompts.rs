//! Request layouts for every call the pipeline makes.
//!
//! Instructions go in the system message and data in the user message,
//! split into `### ` sections. The mock model reads requests back through
//! [`section`], so the headers here are the wire format between the two.

use alloc::format;
use alloc::string::String;
use core::fmt::Write;

use crate::dataset::{BaselineRanking, InteractionRecord};
use crate::gateway::{ChatRequest, Purpose};

pub const HISTORY: &str = "### INTERACTION HISTORY";
pub const USER_PROFILE: &str = "### USER PROFILE";
pub const CANDIDATES: &str = "### CANDIDATES";
pub const PROFILE_PROMPT: &str = "### PROFILE PROMPT";
pub const POSITION_FEEDBACK: &str = "### POSITION FEEDBACK";
pub const RANKING_METRIC: &str = "### RANKING METRIC";
pub const USER_DIAGNOSES: &str = "### USER DIAGNOSES";
pub const CURRENT_PROMPT: &str = "### CURRENT PROMPT";
pub const FEEDBACK_SUMMARY: &str = "### FEEDBACK SUMMARY";
pub const UPDATE_INTENSITY: &str = "### UPDATE INTENSITY";

const HEADERS: [&str; 10] = [
    HISTORY,
    USER_PROFILE,
    CANDIDATES,
    PROFILE_PROMPT,
    POSITION_FEEDBACK,
    RANKING_METRIC,
    USER_DIAGNOSES,
    CURRENT_PROMPT,
    FEEDBACK_SUMMARY,
    UPDATE_INTENSITY,
];

/// Marker the chain-of-thought rerank answer must end with.
pub const FINAL_MARKER: &str = "FINAL:";

/// Built-in seed for the profile-generation prompt.
pub const DEFAULT_PROFILE_PROMPT: &str = "\
You write concise preference profiles for a recommender system.
Read the user's interaction history and describe what they enjoy.
- List the genres or topics the user engages with, strongest first.
- Note how their interests have shifted over time.
- Mention anything they seem to avoid.
Write the profile as short bullet points.";

const RERANK_SYSTEM: &str = "\
You rerank a list of candidate items for one user. Order the candidates from \
most to least likely to be the user's next interaction. Use every candidate \
exactly once. Answer with one line per candidate in the form `<rank>. [<index>] <title>`.";

const COT_INSTRUCTION: &str = "\
Think step by step about the user's interests before ranking. After your \
reasoning, give the final order on a single line starting with `FINAL:` \
followed by the candidate indices separated by commas.";

const LOSS_SYSTEM: &str = "\
You diagnose why a generated user profile failed to place the user's \
ground-truth items at their target positions in a reranked list. Explain what \
the profile missed and what the profile-generation prompt should ask for \
instead. Be specific and brief.";

const SUMMARIZE_SYSTEM: &str = "\
You merge per-user diagnoses from one batch into a short list of improvements \
to a profile-generation prompt. Diagnoses are ordered by weight and labelled \
HIGH, MED or LOW; give HIGH items the most emphasis. Keep recurring, general \
patterns and drop advice that only fits a single user.";

const OPTIMIZE_SYSTEM: &str = "\
You revise a prompt that instructs a language model to write user preference \
profiles for recommendation reranking. Apply the feedback summary within the \
stated edit budget. Return only the full revised prompt text.";

/// Body of the `### ` section named by `header`, trimmed. A header line may
/// carry a trailing note; sections end at the next known header line.
pub fn section<'a>(text: &'a str, header: &str) -> Option<&'a str> {
    let mut offset = 0;
    let mut start = None;
    for line in text.split_inclusive('\n') {
        let bare = line.trim_end();
        if let Some(s) = start {
            if HEADERS.iter().any(|h| bare.starts_with(h)) {
                return Some(text[s..offset].trim());
            }
        } else if bare.starts_with(header) {
            start = Some(offset + line.len());
        }
        offset += line.len();
    }
    start.map(|s| text[s.min(text.len())..].trim())
}

fn numbered_history(history: &[InteractionRecord]) -> String {
    let mut out = String::new();
    for (i, rec) in history.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, rec.title.trim());
    }
    out
}

/// `[1] title` lines, 1-indexed in baseline order.
pub fn indexed_candidates(candidates: &BaselineRanking) -> String {
    let mut out = String::new();
    for (i, item) in candidates.items.iter().enumerate() {
        let _ = writeln!(out, "[{}] {}", i + 1, item.title.trim());
    }
    out
}

pub fn profile_request(prompt: &str, history: &[InteractionRecord]) -> ChatRequest {
    let user = format!("{HISTORY} (oldest first)\n{}", numbered_history(history));
    ChatRequest::new(Purpose::Profile, prompt, user)
}

pub fn rerank_with_profile_request(profile: &str, candidates: &BaselineRanking) -> ChatRequest {
    let user = format!(
        "{USER_PROFILE}\n{}\n\n{CANDIDATES}\n{}",
        profile.trim(),
        indexed_candidates(candidates)
    );
    ChatRequest::new(Purpose::Rerank, RERANK_SYSTEM, user)
}

pub fn rerank_direct_request(
    history: &[InteractionRecord],
    candidates: &BaselineRanking,
    chain_of_thought: bool,
) -> ChatRequest {
    let system = if chain_of_thought {
        format!("{RERANK_SYSTEM}\n{COT_INSTRUCTION}")
    } else {
        String::from(RERANK_SYSTEM)
    };
    let user = format!(
        "{HISTORY} (oldest first)\n{}\n{CANDIDATES}\n{}",
        numbered_history(history),
        indexed_candidates(candidates)
    );
    ChatRequest::new(Purpose::Rerank, system, user)
}

/// What the loss call is told about the ranking outcome.
#[derive(Debug, Clone, Copy)]
pub enum LossEvidence<'a> {
    /// `(title, actual, target)` per ground-truth item.
    Positions(&'a [(String, usize, usize)]),
    /// Only the scalar metric (position feedback disabled).
    Metric { ndcg_at_10: f64 },
}

pub fn loss_request(prompt: &str, profile: &str, evidence: LossEvidence<'_>) -> ChatRequest {
    let mut user = format!(
        "{PROFILE_PROMPT}\n{}\n\n{USER_PROFILE}\n{}\n\n",
        prompt.trim(),
        profile.trim()
    );
    match evidence {
        LossEvidence::Positions(rows) => {
            let _ = writeln!(user, "{POSITION_FEEDBACK}");
            for (title, actual, target) in rows {
                let _ = writeln!(
                    user,
                    "- \"{}\" is ranked {actual} but should be ranked {target}.",
                    title.trim()
                );
            }
        }
        LossEvidence::Metric { ndcg_at_10 } => {
            let _ = writeln!(user, "{RANKING_METRIC}\nNDCG@10 = {ndcg_at_10:.4}");
        }
    }
    ChatRequest::new(Purpose::Loss, LOSS_SYSTEM, user)
}

pub fn summarize_request(weighted_diagnoses: &str) -> ChatRequest {
    let user = format!("{USER_DIAGNOSES}\n{}\n", weighted_diagnoses.trim());
    ChatRequest::new(Purpose::Summarize, SUMMARIZE_SYSTEM, user)
}

pub fn optimize_request(prompt: &str, summary: &str, directive: &str) -> ChatRequest {
    let user = format!(
        "{CURRENT_PROMPT}\n{}\n\n{FEEDBACK_SUMMARY}\n{}\n\n{UPDATE_INTENSITY}\n{}\n",
        prompt.trim(),
        summary.trim(),
        directive.trim()
    );
    ChatRequest::new(Purpose::Optimize, OPTIMIZE_SYSTEM, user)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_split_on_known_headers() {
        let text = format!("{CURRENT_PROMPT}\nline one\n### not a header\n\n{FEEDBACK_SUMMARY}\nfix it\n");
        assert_eq!(section(&text, CURRENT_PROMPT), Some("line one\n### not a header"));
        assert_eq!(section(&text, FEEDBACK_SUMMARY), Some("fix it"));
        assert_eq!(section(&text, UPDATE_INTENSITY), None);
    }

    #[test]
    fn optimize_request_carries_all_parts() {
        let req = optimize_request("PROMPT TEXT", "SUMMARY TEXT", "LIGHT");
        assert_eq!(req.purpose, Purpose::Optimize);
        assert_eq!(section(req.user(), CURRENT_PROMPT), Some("PROMPT TEXT"));
        assert_eq!(section(req.user(), FEEDBACK_SUMMARY), Some("SUMMARY TEXT"));
        assert_eq!(section(req.user(), UPDATE_INTENSITY), Some("LIGHT"));
    }
}
