//! Listwise reranking and parsing of model rankings back into permutations.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::dataset::{BaselineRanking, UserRecord};
use crate::gateway::{ChatRequest, GatewayError, Llm};
use crate::profile::UserProfile;
use crate::prompts::{self, FINAL_MARKER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankMode {
    /// Profile from the optimized prompt, then rerank.
    Agp,
    /// Single-pass rerank from the raw history.
    Dir,
    /// Single-pass chain-of-thought rerank from the raw history.
    Cot,
    /// The upstream order, no model involved.
    Base,
}

impl RerankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RerankMode::Agp => "agp",
            RerankMode::Dir => "dir",
            RerankMode::Cot => "cot",
            RerankMode::Base => "base",
        }
    }
}

impl fmt::Display for RerankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for RerankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "agp" => Ok(RerankMode::Agp),
            "dir" => Ok(RerankMode::Dir),
            "cot" => Ok(RerankMode::Cot),
            "base" => Ok(RerankMode::Base),
            other => Err(alloc::format!("unknown mode {other:?} (expected agp, dir, cot or base)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankedList {
    pub user_id: String,
    pub items: Vec<String>,
    pub mode: RerankMode,
    pub repair_applied: bool,
    pub prompt_version: Option<u32>,
}

impl RerankedList {
    /// The candidate order unchanged.
    pub fn baseline(candidates: &BaselineRanking) -> Self {
        RerankedList {
            user_id: candidates.user_id.clone(),
            items: candidates.item_ids().map(String::from).collect(),
            mode: RerankMode::Base,
            repair_applied: false,
            prompt_version: None,
        }
    }

    /// Whether `items` is exactly a permutation of the candidates.
    pub fn is_permutation_of(&self, candidates: &BaselineRanking) -> bool {
        let mut a: Vec<&str> = self.items.iter().map(String::as_str).collect();
        let mut b: Vec<&str> = candidates.item_ids().collect();
        a.sort_unstable();
        b.sort_unstable();
        a == b
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RerankError {
    #[error("only {recognized} of {total} candidates recognizable in the response")]
    Unparseable { recognized: usize, total: usize },
    #[error("profile belongs to {profile} but the candidates to {baseline}")]
    UserMismatch { profile: String, baseline: String },
    #[error("baseline list is empty")]
    EmptyBaseline,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRanking {
    pub items: Vec<String>,
    pub repair_applied: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Reference {
    Index(usize),
    Unknown,
}

fn strip_rank_marker(line: &str) -> (&str, bool) {
    for bullet in ["- ", "* ", "• "] {
        if let Some(rest) = line.strip_prefix(bullet) {
            return (rest.trim_start(), true);
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(after) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if after.starts_with(char::is_whitespace) && !after.trim().is_empty() {
                return (after.trim_start(), true);
            }
        }
    }
    (line, false)
}

/// Every `[n]` with a numeric body, in order.
fn bracket_indices(line: &str) -> Vec<usize> {
    let mut out = Vec::new();
    let mut rest = line;
    while let Some(open) = rest.find('[') {
        let after = &rest[open + 1..];
        match after.find(']') {
            Some(close) => {
                if let Ok(n) = after[..close].trim().parse::<usize>() {
                    out.push(n);
                }
                rest = &after[close + 1..];
            }
            None => break,
        }
    }
    out
}

/// A line made only of integers and separators, e.g. `3, 1, 2` or `3 > 1 > 2`.
fn integer_list(line: &str) -> Option<Vec<usize>> {
    if !line.chars().all(|c| c.is_ascii_digit() || ",;> \t-".contains(c)) {
        return None;
    }
    let nums: Vec<usize> = line
        .split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .filter_map(|s| s.parse().ok())
        .collect();
    (!nums.is_empty()).then_some(nums)
}

fn normalize(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c == '"' || c == '\'' || c == '*' || c == '.' || c == '`')
        .trim()
        .to_lowercase()
}

fn strip_tags(title: &str) -> &str {
    match title.rfind('[') {
        Some(i) if title.trim_end().ends_with(']') => title[..i].trim_end(),
        _ => title,
    }
}

/// Candidate index (0-based) whose title the line names. Exact matches win,
/// then the longest title contained in the line.
fn title_match(line: &str, titles: &[(String, String)]) -> Option<usize> {
    let norm = normalize(line);
    if norm.is_empty() {
        return None;
    }
    if let Some(i) = titles.iter().position(|(full, bare)| *full == norm || *bare == norm) {
        return Some(i);
    }
    titles
        .iter()
        .enumerate()
        .filter(|(_, (full, bare))| norm.contains(full.as_str()) || (!bare.is_empty() && norm.contains(bare.as_str())))
        .max_by_key(|(i, (full, bare))| (if norm.contains(full.as_str()) { full.len() } else { bare.len() }, usize::MAX - i))
        .map(|(i, _)| i)
}

fn find_last_ci(haystack: &str, needle: &str) -> Option<usize> {
    let hay = haystack.to_ascii_uppercase();
    hay.rfind(&needle.to_ascii_uppercase())
}

/// Parses a model's ranking into a permutation of `baseline`.
///
/// Lines may reference candidates by `[index]`, by title, or as a bare list
/// of indices; a leading rank marker (`1.`, `2)`, `-`) is ignored. When a
/// `FINAL:` marker is present only the text after the last one is read.
/// Repairs: unknown entries are dropped, duplicates keep their first
/// occurrence and unmentioned candidates are appended in baseline order.
/// Fails when fewer than half the candidates are recognizable.
pub fn parse_ranking(text: &str, baseline: &BaselineRanking) -> Result<ParsedRanking, RerankError> {
    let k = baseline.items.len();
    if k == 0 {
        return Err(RerankError::EmptyBaseline);
    }
    let body = match find_last_ci(text, FINAL_MARKER) {
        Some(i) => &text[i + FINAL_MARKER.len()..],
        None => text,
    };
    let titles: Vec<(String, String)> = baseline
        .items
        .iter()
        .map(|it| (normalize(&it.title), normalize(strip_tags(&it.title))))
        .collect();
    let to_ref = |n: usize| {
        if (1..=k).contains(&n) {
            Reference::Index(n - 1)
        } else {
            Reference::Unknown
        }
    };

    let mut refs = Vec::new();
    for raw in body.lines() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (rest, had_marker) = strip_rank_marker(line);
        let brackets = bracket_indices(rest);
        if !brackets.is_empty() {
            refs.extend(brackets.into_iter().map(to_ref));
        } else if let Some(i) = title_match(rest, &titles) {
            refs.push(Reference::Index(i));
        } else if let Some(nums) = integer_list(rest) {
            refs.extend(nums.into_iter().map(to_ref));
        } else if had_marker {
            refs.push(Reference::Unknown);
        }
    }

    let mut seen = alloc::vec![false; k];
    let mut order = Vec::with_capacity(k);
    let mut repaired = false;
    for r in refs {
        match r {
            Reference::Index(i) if !seen[i] => {
                seen[i] = true;
                order.push(i);
            }
            _ => repaired = true,
        }
    }
    let recognized = order.len();
    if recognized * 2 < k {
        return Err(RerankError::Unparseable { recognized, total: k });
    }
    for (i, hit) in seen.iter().enumerate() {
        if !hit {
            order.push(i);
            repaired = true;
        }
    }
    Ok(ParsedRanking {
        items: order.into_iter().map(|i| baseline.items[i].item_id.clone()).collect(),
        repair_applied: repaired,
    })
}

/// The rerank request for a profile-driven rerank.
pub fn profile_rerank_request(
    profile: &UserProfile,
    candidates: &BaselineRanking,
) -> Result<ChatRequest, RerankError> {
    if candidates.items.is_empty() {
        return Err(RerankError::EmptyBaseline);
    }
    if profile.user_id != candidates.user_id {
        return Err(RerankError::UserMismatch {
            profile: profile.user_id.clone(),
            baseline: candidates.user_id.clone(),
        });
    }
    Ok(prompts::rerank_with_profile_request(&profile.text, candidates))
}

/// The rerank request for the single-pass baselines.
pub fn direct_rerank_request(
    user: &UserRecord,
    candidates: &BaselineRanking,
    chain_of_thought: bool,
) -> Result<ChatRequest, RerankError> {
    if candidates.items.is_empty() {
        return Err(RerankError::EmptyBaseline);
    }
    if user.user_id != candidates.user_id {
        return Err(RerankError::UserMismatch {
            profile: user.user_id.clone(),
            baseline: candidates.user_id.clone(),
        });
    }
    Ok(prompts::rerank_direct_request(&user.history, candidates, chain_of_thought))
}

/// Turns a rerank response into a list tagged with `mode`.
pub fn finish_rerank(
    response_text: &str,
    candidates: &BaselineRanking,
    mode: RerankMode,
    prompt_version: Option<u32>,
) -> Result<RerankedList, RerankError> {
    let parsed = parse_ranking(response_text, candidates)?;
    Ok(RerankedList {
        user_id: candidates.user_id.clone(),
        items: parsed.items,
        mode,
        repair_applied: parsed.repair_applied,
        prompt_version,
    })
}

pub fn rerank_with_profile(
    profile: &UserProfile,
    candidates: &BaselineRanking,
    llm: &(impl Llm + ?Sized),
) -> Result<RerankedList, RerankError> {
    let request = profile_rerank_request(profile, candidates)?;
    let response = llm.complete(&request)?;
    finish_rerank(&response.text, candidates, RerankMode::Agp, Some(profile.prompt_version))
}

/// Single-pass rerank from the raw history. `mode` must be `Dir` or `Cot`.
pub fn rerank_direct(
    user: &UserRecord,
    candidates: &BaselineRanking,
    mode: RerankMode,
    llm: &(impl Llm + ?Sized),
) -> Result<RerankedList, RerankError> {
    debug_assert!(matches!(mode, RerankMode::Dir | RerankMode::Cot));
    let request = direct_rerank_request(user, candidates, mode == RerankMode::Cot)?;
    let response = llm.complete(&request)?;
    finish_rerank(&response.text, candidates, mode, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::RankedItem;
    use alloc::vec;

    fn baseline(titles: &[(&str, &str)]) -> BaselineRanking {
        BaselineRanking {
            user_id: "u".into(),
            source_model: "t".into(),
            items: titles
                .iter()
                .map(|(id, t)| RankedItem {
                    item_id: (*id).into(),
                    title: (*t).into(),
                })
                .collect(),
        }
    }

    fn three() -> BaselineRanking {
        baseline(&[
            ("i1", "Quiet Harbor [noir]"),
            ("i2", "Golden Ember [fantasy]"),
            ("i3", "Iron Tide [scifi]"),
        ])
    }

    #[test]
    fn parses_numbered_titles() {
        let p = parse_ranking("1. Golden Ember\n2. Quiet Harbor\n3. Iron Tide", &three()).unwrap();
        assert_eq!(p.items, ["i2", "i1", "i3"]);
        assert!(!p.repair_applied);
    }

    #[test]
    fn parses_indices_and_final_marker() {
        let text = "The user likes science fiction.\nSo [3] is likely first.\nFINAL: 3,1,2";
        let p = parse_ranking(text, &three()).unwrap();
        assert_eq!(p.items, ["i3", "i1", "i2"]);
        let p = parse_ranking("1. [2] Golden Ember [fantasy]\n2. [3] Iron Tide\n3. [1] Quiet Harbor", &three()).unwrap();
        assert_eq!(p.items, ["i2", "i3", "i1"]);
    }

    #[test]
    fn appends_missing_items() {
        let p = parse_ranking("1. [2]\n2. [1]", &three()).unwrap();
        assert_eq!(p.items, ["i2", "i1", "i3"]);
        assert!(p.repair_applied);
    }

    #[test]
    fn drops_unknown_and_duplicates() {
        let p = parse_ranking("1. [2]\n2. [9]\n3. [2]\n4. Mystery Book\n5. [3]", &three()).unwrap();
        assert_eq!(p.items, ["i2", "i3", "i1"]);
        assert!(p.repair_applied);
    }

    #[test]
    fn refuses_garbage() {
        assert_eq!(
            parse_ranking("I cannot rank these", &three()),
            Err(RerankError::Unparseable { recognized: 0, total: 3 })
        );
        // one of three recognized is below half
        assert!(parse_ranking("1. [1]", &three()).is_err());
    }

    #[test]
    fn single_item_list() {
        let b = baseline(&[("only", "Lone Star [noir]")]);
        assert_eq!(parse_ranking("1. [1] Lone Star", &b).unwrap().items, ["only"]);
    }

    #[test]
    fn mode_strings() {
        for m in [RerankMode::Agp, RerankMode::Dir, RerankMode::Cot, RerankMode::Base] {
            assert_eq!(m.as_str().parse::<RerankMode>().unwrap(), m);
        }
        assert!("best".parse::<RerankMode>().is_err());
    }

    #[test]
    fn permutation_check() {
        let b = three();
        let mut list = RerankedList::baseline(&b);
        assert!(list.is_permutation_of(&b));
        list.items = vec!["i1".into(), "i1".into(), "i3".into()];
        assert!(!list.is_permutation_of(&b));
    }
}
