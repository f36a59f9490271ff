//! A deterministic stand-in for the language model.
//!
//! Every answer is a pure function of the request text and the
//! [`MockWorldState`]. Control tokens written into the profile-generation
//! prompt switch on extraction rules, so a prompt that names more of them
//! yields better profiles:
//!
//! | token                          | rule                                               |
//! |--------------------------------|----------------------------------------------------|
//! | `FOCUS_RECURRING_GENRES`       | drop one-off genres never seen with the main genre |
//! | `WEIGHT_RECENT_ITEMS`          | weight item j of n by j/n instead of 1             |
//! | `IGNORE_NOISE_TITLES`          | drop items lacking the dominant genre              |
//! | `RANK_BY_PREFERENCE_STRENGTH`  | emit numeric strengths the reranker can use        |
//!
//! Without tokens the profile is the plain set of genres in the history.
//! Per purpose:
//!
//! * `profile`: genre extraction from the `[..]` tags of history titles.
//! * `rerank`: candidates by descending profile-genre overlap, ties in
//!   candidate order. Requests without a profile (single-pass baselines) get
//!   the token-free extraction applied to the raw history.
//! * `loss`: for misplaced items, one `SUGGEST` line per control token the
//!   prompt lacks (plus a user-specific `BOOST_TITLE` line when the world has
//!   idiosyncratic feedback). Metric-only requests get no suggestions.
//! * `summarize`: deduplicated generic statements, suggestions first in token
//!   priority order; user-specific lines are collapsed into a count.
//! * `optimize`: the current prompt plus the highest-priority token named in
//!   the summary and absent from the prompt; `BOOST_TITLE` entries rank last.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Purpose};
use crate::prompts::{self, section, FINAL_MARKER};
use crate::synth::{genre_tags, SyntheticWorldSpec};

/// Prefix of the per-item memorization directive.
pub const BOOST_PREFIX: &str = "BOOST_TITLE:";
const SUGGEST: &str = "SUGGEST";
const USER_SPECIFIC: &str = "USER-SPECIFIC";
const BOOST_SCORE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractionRule {
    RecurringGenres,
    RecencyWeighting,
    NoiseFilter,
    StrengthWeights,
}

impl ExtractionRule {
    fn describe(self) -> &'static str {
        match self {
            ExtractionRule::RecurringGenres => "drop one-off genres that never appear alongside the main genre",
            ExtractionRule::RecencyWeighting => "give recent interactions more weight than old ones",
            ExtractionRule::NoiseFilter => "ignore one-off items that do not fit the dominant taste",
            ExtractionRule::StrengthWeights => "state a numeric preference strength for every genre",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlToken {
    pub token: String,
    pub rule: ExtractionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWorldState {
    /// The world the data came from, when synthetic.
    pub world: Option<SyntheticWorldSpec>,
    /// Recognized tokens, highest priority first.
    pub control_tokens: Vec<ControlToken>,
    /// Loss answers include a user-specific memorization suggestion.
    pub idiosyncratic_feedback: bool,
}

impl Default for MockWorldState {
    fn default() -> Self {
        let tokens = [
            ("FOCUS_RECURRING_GENRES", ExtractionRule::RecurringGenres),
            ("WEIGHT_RECENT_ITEMS", ExtractionRule::RecencyWeighting),
            ("IGNORE_NOISE_TITLES", ExtractionRule::NoiseFilter),
            ("RANK_BY_PREFERENCE_STRENGTH", ExtractionRule::StrengthWeights),
        ];
        MockWorldState {
            world: None,
            control_tokens: tokens
                .iter()
                .map(|(t, r)| ControlToken {
                    token: t.to_string(),
                    rule: *r,
                })
                .collect(),
            idiosyncratic_feedback: false,
        }
    }
}

impl MockWorldState {
    pub fn for_world(spec: SyntheticWorldSpec) -> Self {
        MockWorldState {
            world: Some(spec),
            ..Default::default()
        }
    }

    pub fn token_names(&self) -> impl Iterator<Item = &str> {
        self.control_tokens.iter().map(|t| t.token.as_str())
    }

    fn active_rules(&self, prompt: &str) -> BTreeSet<ExtractionRule> {
        self.control_tokens
            .iter()
            .filter(|t| prompt.contains(t.token.as_str()))
            .map(|t| t.rule)
            .collect()
    }
}

/// The mock model as a backend.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub world: MockWorldState,
}

impl MockBackend {
    pub fn new(world: MockWorldState) -> Self {
        MockBackend { world }
    }
}

impl ChatBackend for MockBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        mock_complete(request, &self.world)
    }
}

fn missing(what: &str) -> GatewayError {
    GatewayError::InvalidRequest(format!("mock: request has no {what} section"))
}

pub fn mock_complete(request: &ChatRequest, world: &MockWorldState) -> Result<ChatResponse, GatewayError> {
    let text = match request.purpose {
        Purpose::Profile => mock_profile(request, world)?,
        Purpose::Rerank => mock_rerank(request)?,
        Purpose::Loss => mock_loss(request, world)?,
        Purpose::Summarize => mock_summarize(request, world)?,
        Purpose::Optimize => mock_optimize(request, world)?,
    };
    Ok(ChatResponse::text(text))
}

/// Strips a leading `N.` / `N)` marker.
fn strip_number(line: &str) -> &str {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return line;
    }
    let rest = &line[digits..];
    rest.strip_prefix('.')
        .or_else(|| rest.strip_prefix(')'))
        .map(str::trim_start)
        .unwrap_or(line)
}

fn history_titles(body: &str) -> Vec<&str> {
    body.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(strip_number)
        .collect()
}

fn boost_titles(prompt: &str) -> Vec<String> {
    prompt
        .lines()
        .filter_map(|l| {
            let l = l.trim().trim_start_matches("- ").trim();
            l.strip_prefix(BOOST_PREFIX).map(|t| t.trim().to_string())
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// The genre in most items, ties to the alphabetically first.
fn dominant_genre<'a>(items: &[(f64, Vec<&'a str>)]) -> Option<&'a str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, tags) in items {
        for g in tags {
            *counts.entry(g).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(g, _)| g)
}

/// Genres with weights, strongest first (ties by name).
fn extract_genres(titles: &[&str], rules: &BTreeSet<ExtractionRule>) -> Vec<(String, f64)> {
    let has = |r| rules.contains(&r);
    let n = titles.len();
    let mut items: Vec<(f64, Vec<&str>)> = titles
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let w = if has(ExtractionRule::RecencyWeighting) {
                (j + 1) as f64 / n as f64
            } else {
                1.0
            };
            (w, genre_tags(t))
        })
        .collect();

    let dominant = dominant_genre(&items);
    if has(ExtractionRule::NoiseFilter) {
        if let Some(d) = dominant {
            items.retain(|(_, tags)| tags.contains(&d));
        }
    }

    let mut scores: BTreeMap<&str, (f64, usize, bool)> = BTreeMap::new();
    for (w, tags) in &items {
        let with_dominant = dominant.is_some_and(|d| tags.contains(&d));
        for g in tags {
            let e = scores.entry(g).or_default();
            e.0 += w;
            e.1 += 1;
            e.2 |= with_dominant;
        }
    }
    if has(ExtractionRule::RecurringGenres) {
        scores.retain(|_, (_, count, with_dominant)| *count >= 2 || *with_dominant);
    }
    let mut out: Vec<(String, f64)> = scores.into_iter().map(|(g, (s, _, _))| (g.to_string(), s)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

fn render_profile(genres: &[(String, f64)], with_strength: bool, boosts: &[String]) -> String {
    let mut out = String::from("Preferred genres: ");
    if genres.is_empty() {
        out.push_str("none identified");
    } else if with_strength {
        let total: f64 = genres.iter().map(|g| g.1).sum();
        let parts: Vec<String> = genres
            .iter()
            .map(|(g, s)| format!("{g} ({:.3})", s / total))
            .collect();
        out.push_str(&parts.join(", "));
    } else {
        let parts: Vec<&str> = genres.iter().map(|g| g.0.as_str()).collect();
        out.push_str(&parts.join(", "));
    }
    if !boosts.is_empty() {
        let _ = write!(out, "\nBoost titles: {}", boosts.join(" | "));
    }
    out
}

fn mock_profile(request: &ChatRequest, world: &MockWorldState) -> Result<String, GatewayError> {
    let prompt = request.system();
    let history = section(request.user(), prompts::HISTORY).ok_or_else(|| missing("history"))?;
    let rules = world.active_rules(prompt);
    let genres = extract_genres(&history_titles(history), &rules);
    Ok(render_profile(
        &genres,
        rules.contains(&ExtractionRule::StrengthWeights),
        &boost_titles(prompt),
    ))
}

struct ParsedProfile {
    weights: BTreeMap<String, f64>,
    boosts: Vec<String>,
}

fn parse_profile(profile: &str) -> ParsedProfile {
    let mut weights = BTreeMap::new();
    let mut boosts = Vec::new();
    for line in profile.lines() {
        let line = line.trim();
        if let Some(rest) = line.strip_prefix("Preferred genres:") {
            if rest.trim() == "none identified" {
                continue;
            }
            for entry in rest.split(',') {
                let entry = entry.trim();
                let (name, weight) = match entry.split_once('(') {
                    Some((name, w)) => (name.trim(), w.trim_end_matches(')').trim().parse().unwrap_or(1.0)),
                    None => (entry, 1.0),
                };
                if !name.is_empty() {
                    weights.insert(name.to_string(), weight);
                }
            }
        } else if let Some(rest) = line.strip_prefix("Boost titles:") {
            boosts.extend(rest.split(" | ").map(|t| t.trim().to_string()).filter(|t| !t.is_empty()));
        }
    }
    ParsedProfile { weights, boosts }
}

fn mock_rerank(request: &ChatRequest) -> Result<String, GatewayError> {
    let user = request.user();
    let candidates: Vec<(usize, &str)> = section(user, prompts::CANDIDATES)
        .ok_or_else(|| missing("candidates"))?
        .lines()
        .filter_map(|l| {
            let l = l.trim().strip_prefix('[')?;
            let (idx, title) = l.split_once(']')?;
            Some((idx.trim().parse().ok()?, title.trim()))
        })
        .collect();

    let profile = if let Some(p) = section(user, prompts::USER_PROFILE) {
        parse_profile(p)
    } else {
        let history = section(user, prompts::HISTORY).ok_or_else(|| missing("profile or history"))?;
        let genres = extract_genres(&history_titles(history), &BTreeSet::new());
        ParsedProfile {
            weights: genres.into_iter().map(|(g, _)| (g, 1.0)).collect(),
            boosts: Vec::new(),
        }
    };

    let mut scored: Vec<(f64, usize, &str)> = candidates
        .iter()
        .map(|(idx, title)| {
            let mut score: f64 = genre_tags(title)
                .iter()
                .filter_map(|g| profile.weights.get(*g))
                .sum();
            if profile.boosts.iter().any(|b| b == title) {
                score += BOOST_SCORE;
            }
            (score, *idx, *title)
        })
        .collect();
    // stable: equal scores keep candidate order
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut out = String::new();
    if request.system().contains(FINAL_MARKER) {
        let top: Vec<&str> = profile.weights.keys().map(String::as_str).collect();
        let _ = writeln!(
            out,
            "The history points to these genres: {}.\nCandidates sharing more of them should come first.",
            if top.is_empty() { "none".to_string() } else { top.join(", ") }
        );
        let order: Vec<String> = scored.iter().map(|(_, i, _)| format!("{i}")).collect();
        let _ = write!(out, "{FINAL_MARKER} {}", order.join(","));
    } else {
        for (rank, (_, idx, title)) in scored.iter().enumerate() {
            let _ = writeln!(out, "{}. [{}] {}", rank + 1, idx, title);
        }
    }
    Ok(out)
}

/// `(title, actual, target)` from the position-feedback lines.
fn feedback_rows(body: &str) -> Vec<(String, usize, usize)> {
    body.lines()
        .filter_map(|l| {
            let l = l.trim().strip_prefix("- \"")?;
            let (title, rest) = l.split_once("\" is ranked ")?;
            let (actual, rest) = rest.split_once(" but should be ranked ")?;
            let target = rest.trim_end_matches('.');
            Some((title.to_string(), actual.trim().parse().ok()?, target.trim().parse().ok()?))
        })
        .collect()
}

fn mock_loss(request: &ChatRequest, world: &MockWorldState) -> Result<String, GatewayError> {
    let user = request.user();
    let prompt = section(user, prompts::PROFILE_PROMPT).unwrap_or("");
    if let Some(body) = section(user, prompts::POSITION_FEEDBACK) {
        let rows = feedback_rows(body);
        if rows.iter().all(|(_, a, t)| a == t) {
            return Ok("No correction needed; the profile already surfaces the relevant items.".into());
        }
        let mut out = String::from("The profile did not surface the ground-truth items early enough.\n");
        for t in &world.control_tokens {
            if !prompt.contains(t.token.as_str()) {
                let _ = writeln!(out, "{SUGGEST} {}: {}.", t.token, t.rule.describe());
            }
        }
        if world.idiosyncratic_feedback {
            for (title, a, t) in &rows {
                if a > t {
                    let _ = writeln!(out, "{USER_SPECIFIC} {BOOST_PREFIX} {title}");
                }
            }
        }
        return Ok(out.trim_end().to_string());
    }
    if section(user, prompts::RANKING_METRIC).is_some() {
        return Ok("The profile should describe the user's interests more accurately.".into());
    }
    Err(missing("feedback"))
}

/// Blanks `[LABEL w=..] user:` entry headers.
fn strip_entry_header(line: &str) -> &str {
    if line.starts_with('[') && line.ends_with(':') {
        ""
    } else {
        line
    }
}

fn mock_summarize(request: &ChatRequest, world: &MockWorldState) -> Result<String, GatewayError> {
    let body = section(request.user(), prompts::USER_DIAGNOSES).ok_or_else(|| missing("diagnoses"))?;
    let mut suggestions: BTreeMap<usize, String> = BTreeMap::new();
    let mut generic: BTreeSet<String> = BTreeSet::new();
    let mut user_specific = 0usize;
    let mut misplaced = 0usize;
    for raw in body.lines() {
        let line = strip_entry_header(raw.trim());
        if line.is_empty() {
            continue;
        }
        if line.starts_with(USER_SPECIFIC) {
            user_specific += 1;
        } else if line.starts_with("Position feedback:") {
            if !line.contains("no correction needed") {
                misplaced += 1;
            }
        } else if let Some(rest) = line.strip_prefix(SUGGEST) {
            let rest = rest.trim();
            if let Some(p) = world.control_tokens.iter().position(|t| rest.starts_with(t.token.as_str())) {
                suggestions.insert(p, format!("{SUGGEST} {rest}"));
            } else {
                generic.insert(line.to_string());
            }
        } else {
            generic.insert(line.to_string());
        }
    }
    let mut out = String::new();
    for s in suggestions.values() {
        let _ = writeln!(out, "{s}");
    }
    for g in &generic {
        let _ = writeln!(out, "{g}");
    }
    if misplaced > 0 {
        let _ = writeln!(out, "{misplaced} ground-truth items were ranked below their target position.");
    }
    if user_specific > 0 {
        let _ = writeln!(out, "Omitted {user_specific} user-specific observations.");
    }
    if out.is_empty() {
        out.push_str("No changes suggested.");
    }
    Ok(out.trim_end().to_string())
}

fn mock_optimize(request: &ChatRequest, world: &MockWorldState) -> Result<String, GatewayError> {
    let user = request.user();
    let prompt = section(user, prompts::CURRENT_PROMPT).ok_or_else(|| missing("current prompt"))?;
    let summary = section(user, prompts::FEEDBACK_SUMMARY).ok_or_else(|| missing("summary"))?;
    for t in &world.control_tokens {
        if summary.contains(t.token.as_str()) && !prompt.contains(t.token.as_str()) {
            return Ok(format!("{prompt}\n- {}: {}.", t.token, t.rule.describe()));
        }
    }
    let present = boost_titles(prompt);
    for line in summary.lines() {
        if let Some((_, title)) = line.split_once(BOOST_PREFIX) {
            let title = title.trim();
            if !title.is_empty() && !present.iter().any(|p| p == title) {
                return Ok(format!("{prompt}\n- {BOOST_PREFIX} {title}"));
            }
        }
    }
    Ok(prompt.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BaselineRanking, InteractionRecord, RankedItem};
    use crate::prompts::*;
    use alloc::vec;

    fn history(titles: &[&str]) -> Vec<InteractionRecord> {
        titles
            .iter()
            .enumerate()
            .map(|(i, t)| InteractionRecord {
                item_id: format!("h{i}"),
                title: t.to_string(),
                timestamp: i as i64,
            })
            .collect()
    }

    fn candidates(items: &[(&str, &str)]) -> BaselineRanking {
        BaselineRanking {
            user_id: "u".into(),
            source_model: "t".into(),
            items: items
                .iter()
                .map(|(id, t)| RankedItem {
                    item_id: id.to_string(),
                    title: t.to_string(),
                })
                .collect(),
        }
    }

    fn run(req: &ChatRequest) -> String {
        mock_complete(req, &MockWorldState::default()).unwrap().text
    }

    #[test]
    fn profile_orders_by_frequency() {
        let h = history(&["A [fantasy]", "B [fantasy]", "C [noir]", "D [fantasy]", "E [fantasy]"]);
        let text = run(&profile_request(DEFAULT_PROFILE_PROMPT, &h));
        let f = text.find("fantasy").unwrap();
        let n = text.find("noir").unwrap();
        assert!(f < n, "{text}");
    }

    #[test]
    fn profile_is_pure() {
        let h = history(&["A [fantasy]", "C [noir]"]);
        let req = profile_request("FOCUS_RECURRING_GENRES", &h);
        assert_eq!(run(&req), run(&req));
    }

    #[test]
    fn rerank_by_overlap_with_index_tiebreak() {
        let c = candidates(&[("B", "Bee [noir]"), ("A", "Ay [fantasy]"), ("C", "Cee [fantasy]")]);
        let req = rerank_with_profile_request("Preferred genres: fantasy", &c);
        let parsed = crate::rerank::parse_ranking(&run(&req), &c).unwrap();
        assert_eq!(parsed.items, ["A", "C", "B"]);
        assert!(!parsed.repair_applied);
    }

    #[test]
    fn strengths_shape_the_order() {
        let c = candidates(&[("x", "X [noir]"), ("y", "Y [fantasy]"), ("z", "Z [noir fantasy]")]);
        let req = rerank_with_profile_request("Preferred genres: noir (0.700), fantasy (0.300)", &c);
        let parsed = crate::rerank::parse_ranking(&run(&req), &c).unwrap();
        assert_eq!(parsed.items, ["z", "x", "y"]);
    }

    #[test]
    fn optimize_appends_highest_priority_missing_token() {
        let summary = "SUGGEST RANK_BY_PREFERENCE_STRENGTH: x.\nSUGGEST WEIGHT_RECENT_ITEMS: y.";
        let out = run(&optimize_request("Base prompt.", summary, "LIGHT"));
        assert!(out.starts_with("Base prompt.\n"));
        assert!(out.contains("WEIGHT_RECENT_ITEMS"));
        assert!(!out.contains("RANK_BY_PREFERENCE_STRENGTH"));
        // nothing new to add leaves the prompt unchanged
        let same = run(&optimize_request(&out, "SUGGEST WEIGHT_RECENT_ITEMS: y.", "LIGHT"));
        assert_eq!(same, out);
    }

    #[test]
    fn summarize_deduplicates() {
        let diag = "[HIGH w=0.500] u1:\nSUGGEST IGNORE_NOISE_TITLES: a.\nSUGGEST FOCUS_RECURRING_GENRES: b.\n\
                    [MED w=0.250] u2:\nSUGGEST IGNORE_NOISE_TITLES: a.\nUSER-SPECIFIC BOOST_TITLE: Foo [x]";
        let out = run(&summarize_request(diag));
        assert_eq!(out.matches("IGNORE_NOISE_TITLES").count(), 1);
        let focus = out.find("FOCUS_RECURRING_GENRES").unwrap();
        let noise = out.find("IGNORE_NOISE_TITLES").unwrap();
        assert!(focus < noise, "priority order: {out}");
        assert!(!out.contains(BOOST_PREFIX));
    }

    #[test]
    fn loss_without_positions_names_no_tokens() {
        let req = loss_request("p", "Preferred genres: noir", LossEvidence::Metric { ndcg_at_10: 0.5 });
        let out = run(&req);
        let world = MockWorldState::default();
        assert!(world.token_names().all(|t| !out.contains(t)));
        let rows = vec![("T [noir]".to_string(), 3usize, 1usize)];
        let out = run(&loss_request("p", "Preferred genres: noir", LossEvidence::Positions(&rows)));
        assert!(world.token_names().all(|t| out.contains(t)));
        let rows = vec![("T [noir]".to_string(), 1usize, 1usize)];
        let out = run(&loss_request("p", "x", LossEvidence::Positions(&rows)));
        assert!(out.contains("No correction needed"));
    }

    #[test]
    fn noise_filter_and_recency() {
        let titles = ["N [horror comedy]", "A [fantasy noir]", "B [fantasy]", "C [fantasy noir]"];
        let all = [
            ExtractionRule::NoiseFilter,
            ExtractionRule::RecencyWeighting,
        ]
        .into_iter()
        .collect();
        let g = extract_genres(&titles, &all);
        let names: Vec<&str> = g.iter().map(|x| x.0.as_str()).collect();
        assert_eq!(names, ["fantasy", "noir"]);
    }

    #[test]
    fn missing_sections_are_errors() {
        let req = ChatRequest::new(Purpose::Optimize, "s", "no sections");
        assert!(matches!(
            mock_complete(&req, &MockWorldState::default()),
            Err(GatewayError::InvalidRequest(_))
        ));
    }
}
