//! The batched training loop.
//!
//! Per epoch the train users are shuffled and cut into batches. For each
//! batch: profiles from the current prompt, profile-driven reranks, position
//! feedback with a loss call per user, one summarize call over the
//! weight-ordered diagnoses and one optimize call that revises the prompt.
//! The revised prompt is what the next batch sees. After every epoch the
//! eval users' validation items are scored with the current prompt.
//!
//! A batch's weight `w = 1 / mean(avg_pos)` sets how hard the optimizer may
//! edit:
//!
//! | batch weight   | intensity    | edit budget            |
//! |----------------|--------------|------------------------|
//! | `w >= 0.5`     | light        | at most 1 instruction  |
//! | `0.2..0.5`     | moderate     | at most 3 instructions |
//! | `w < 0.2`      | aggressive   | free rewrite           |
//!
//! A batch with `w == 1` has every ground-truth item on target and leaves
//! the prompt alone without an optimize call.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::{self, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{BaselineRanking, DatasetBundle, DatasetError, UserRecord};
use crate::eval::{build_report, MetricReport, UserResult};
use crate::feedback::{self, compute_feedback, FeedbackError, FeedbackSet};
use crate::gateway::{ChatRequest, GatewayError, LedgerSnapshot, Llm};
use crate::profile::{generate_profiles, ProfileError, PromptState, UserProfile};
use crate::prompts;
use crate::rerank::{self, RerankError, RerankMode, RerankedList};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub history_len: usize,
    pub max_epochs: u32,
    /// Epochs without a validation improvement before stopping.
    pub patience: u32,
    pub summarization_enabled: bool,
    pub pbf_enabled: bool,
    pub seed: u64,
    /// Concurrent calls within a batch (used by parallel gateways).
    pub parallelism: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 10,
            history_len: 5,
            max_epochs: 10,
            patience: 3,
            summarization_enabled: true,
            pbf_enabled: true,
            seed: 0,
            parallelism: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n_train: usize) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if n_train == 0 {
            return fail("the train split is empty".into());
        }
        if self.batch_size > n_train {
            return fail(format!(
                "batch_size {} exceeds the {n_train} train users",
                self.batch_size
            ));
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1".into());
        }
        if self.history_len == 0 {
            return fail("history_len must be positive".into());
        }
        if self.patience == 0 {
            return fail("patience must be at least 1".into());
        }
        if self.parallelism == 0 {
            return fail("parallelism must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub epoch: u32,
    pub index: usize,
    pub user_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchFeedbackSummary {
    pub text: String,
    /// `(user_id, weight)` in presentation order.
    pub contributing: Vec<(String, f64)>,
    pub batch_wt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Light,
    Moderate,
    Aggressive,
}

impl Intensity {
    pub fn from_batch_weight(w: f64) -> Self {
        if w >= 0.5 {
            Intensity::Light
        } else if w >= 0.2 {
            Intensity::Moderate
        } else {
            Intensity::Aggressive
        }
    }

    /// Most instructions the optimizer may edit; `None` is unrestricted.
    pub fn edit_budget(self) -> Option<usize> {
        match self {
            Intensity::Light => Some(1),
            Intensity::Moderate => Some(3),
            Intensity::Aggressive => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Intensity::Light => "light",
            Intensity::Moderate => "moderate",
            Intensity::Aggressive => "aggressive",
        }
    }
}

impl fmt::Display for Intensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The revision directive handed to the optimize call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualGradient {
    pub instruction_text: String,
    pub intensity: Intensity,
}

impl TextualGradient {
    pub fn from_batch_weight(batch_wt: f64) -> Self {
        let intensity = Intensity::from_batch_weight(batch_wt);
        let (magnitude, budget) = match intensity {
            Intensity::Light => ("The ranking errors in this batch are small.", "Edit at most 1 instruction."),
            Intensity::Moderate => (
                "The ranking errors in this batch are noticeable.",
                "Edit at most 3 instructions.",
            ),
            Intensity::Aggressive => (
                "The ranking errors in this batch are severe.",
                "You may rewrite the prompt as much as needed.",
            ),
        };
        TextualGradient {
            instruction_text: format!(
                "{} update (batch weight {batch_wt:.3}). {magnitude} {budget} Keep every instruction that is not affected.",
                intensity.as_str().to_uppercase()
            ),
            intensity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum UpdateError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty feedback summary")]
    EmptySummary,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

fn label_for(rank: usize, n: usize) -> &'static str {
    match 3 * rank / n {
        0 => "HIGH",
        1 => "MED",
        _ => "LOW",
    }
}

/// Diagnoses sorted by descending weight (ties by user id), each under a
/// `[LABEL w=..] user:` line. Equal weights share the label of the first.
pub fn weighted_diagnoses(feedbacks: &[FeedbackSet]) -> (String, Vec<(String, f64)>) {
    let mut order: Vec<&FeedbackSet> = feedbacks.iter().collect();
    order.sort_by(|a, b| b.weight.total_cmp(&a.weight).then_with(|| a.user_id.cmp(&b.user_id)));
    let mut text = String::new();
    let mut label = "HIGH";
    let mut previous: Option<f64> = None;
    for (rank, fs) in order.iter().enumerate() {
        if previous != Some(fs.weight) {
            label = label_for(rank, order.len());
        }
        previous = Some(fs.weight);
        let _ = writeln!(text, "[{label} w={:.3}] {}:\n{}\n", fs.weight, fs.user_id, fs.diagnosis.trim());
    }
    let contributing = order.iter().map(|f| (f.user_id.clone(), f.weight)).collect();
    (text.trim_end().to_string(), contributing)
}

/// One summarize call over the weight-ordered diagnoses, or their plain
/// concatenation when summarization is off.
pub fn summarize_batch(
    feedbacks: &[FeedbackSet],
    cfg: &TrainConfig,
    llm: &(impl Llm + ?Sized),
) -> Result<BatchFeedbackSummary, UpdateError> {
    let batch_wt = feedback::batch_weight(feedbacks).map_err(|_| UpdateError::EmptyBatch)?;
    let (weighted, contributing) = weighted_diagnoses(feedbacks);
    let text = if cfg.summarization_enabled {
        llm.complete(&prompts::summarize_request(&weighted))?.text.trim().to_string()
    } else {
        weighted
    };
    Ok(BatchFeedbackSummary {
        text,
        contributing,
        batch_wt,
    })
}

fn strip_code_fence(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = rest.split_once('\n').map(|(_, b)| b).unwrap_or("");
    body.trim_end().trim_end_matches("```").trim()
}

fn digest(summary: &BatchFeedbackSummary) -> String {
    let first = summary.text.lines().find(|l| !l.trim().is_empty()).unwrap_or("").trim();
    let mut head: String = first.chars().take(100).collect();
    if head.len() < first.len() {
        head.push_str("...");
    }
    format!("batch weight {:.3}: {head}", summary.batch_wt)
}

pub fn optimize_request(prompt: &PromptState, summary: &BatchFeedbackSummary) -> ChatRequest {
    let gradient = TextualGradient::from_batch_weight(summary.batch_wt);
    prompts::optimize_request(&prompt.text, &summary.text, &gradient.instruction_text)
}

/// Applies one textual-gradient step. Returns the prompt unchanged when the
/// batch had nothing to correct or the optimizer's answer is unusable.
pub fn apply_update(
    prompt: &PromptState,
    summary: &BatchFeedbackSummary,
    llm: &(impl Llm + ?Sized),
) -> Result<PromptState, UpdateError> {
    if summary.text.trim().is_empty() {
        return Err(UpdateError::EmptySummary);
    }
    if (summary.batch_wt - 1.0).abs() < 1e-12 {
        return Ok(prompt.clone());
    }
    let response = llm.complete(&optimize_request(prompt, summary))?;
    let revised = strip_code_fence(&response.text);
    if revised.is_empty() || revised == prompt.text.trim() {
        log::warn!(
            "optimizer returned {} text; keeping prompt v{}",
            if revised.is_empty() { "empty" } else { "unchanged" },
            prompt.version
        );
        return Ok(prompt.clone());
    }
    Ok(prompt.child(revised, digest(summary)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub ndcg_at_10: f64,
    pub avg_pos: f64,
    pub repair_rate: f64,
    pub n_users: usize,
}

impl SplitMetrics {
    pub fn from_rows(rows: &[UserResult]) -> Option<Self> {
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some(SplitMetrics {
            ndcg_at_10: rows.iter().map(|r| r.ndcg_at_10).sum::<f64>() / n,
            avg_pos: rows.iter().map(|r| r.gt_avg_pos).sum::<f64>() / n,
            repair_rate: rows.iter().filter(|r| r.repair_applied).count() as f64 / n,
            n_users: rows.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: u32,
    /// Scores of the reranks made during the epoch's batches.
    pub train: SplitMetrics,
    pub validation: Option<SplitMetrics>,
    /// Prompt in effect when the epoch ended.
    pub prompt_version: u32,
    pub training_calls: LedgerSnapshot,
    pub validation_calls: LedgerSnapshot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestPrompt {
    pub version: u32,
    pub score: f64,
    pub epoch: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    Patience,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config: TrainConfig,
    pub lineage: Vec<PromptState>,
    /// Epoch in progress, from 1.
    pub epoch: u32,
    /// Shuffled train users of the current epoch; empty before shuffling.
    pub epoch_order: Vec<String>,
    pub next_batch: usize,
    pub epoch_rows: Vec<UserResult>,
    pub epoch_calls: LedgerSnapshot,
    pub metrics: Vec<EpochMetrics>,
    pub best: Option<BestPrompt>,
    pub stale_epochs: u32,
    pub stopped: Option<StopReason>,
    pub training_calls: LedgerSnapshot,
    pub validation_calls: LedgerSnapshot,
}

impl RunState {
    pub fn new(config: TrainConfig, seed_prompt: PromptState) -> Self {
        RunState {
            config,
            lineage: alloc::vec![seed_prompt],
            epoch: 1,
            epoch_order: Vec::new(),
            next_batch: 0,
            epoch_rows: Vec::new(),
            epoch_calls: LedgerSnapshot::default(),
            metrics: Vec::new(),
            best: None,
            stale_epochs: 0,
            stopped: None,
            training_calls: LedgerSnapshot::default(),
            validation_calls: LedgerSnapshot::default(),
        }
    }

    pub fn current_prompt(&self) -> &PromptState {
        self.lineage.last().expect("lineage always holds the seed")
    }

    pub fn prompt(&self, version: u32) -> Option<&PromptState> {
        self.lineage.iter().find(|p| p.version == version)
    }

    /// The checkpoint with the best validation score, or the current prompt
    /// before any epoch has finished.
    pub fn best_prompt(&self) -> &PromptState {
        self.best
            .and_then(|b| self.prompt(b.version))
            .unwrap_or_else(|| self.current_prompt())
    }

    pub fn is_finished(&self) -> bool {
        self.stopped.is_some()
    }
}

/// What happened in one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: Batch,
    pub lists: Vec<RerankedList>,
    pub feedbacks: Vec<FeedbackSet>,
    pub summary: BatchFeedbackSummary,
    pub prompt_before: u32,
    pub prompt_after: u32,
    pub calls: LedgerSnapshot,
}

/// Hooks for persisting progress. Both are called after the state has been
/// updated, so a snapshot taken there is a valid resume point.
pub trait TrainObserver {
    fn on_batch(&mut self, _record: &BatchRecord, _state: &RunState) {}
    fn on_epoch(&mut self, _metrics: &EpochMetrics, _state: &RunState) {}
}

impl TrainObserver for () {}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error("gateway failure in epoch {}: {source}", state.epoch)]
    Gateway { source: GatewayError, state: Box<RunState> },
}

/// Internal step failure; gateway errors become resumable [`TrainError`]s.
enum StepError {
    Gateway(GatewayError),
    Data(DatasetError),
}

impl From<GatewayError> for StepError {
    fn from(e: GatewayError) -> Self {
        StepError::Gateway(e)
    }
}

fn profile_step_error(e: ProfileError) -> Option<StepError> {
    match e {
        ProfileError::Gateway(g) => Some(StepError::Gateway(g)),
        _ => None,
    }
}

fn missing(user_id: &str) -> DatasetError {
    DatasetError::MissingRanking {
        user_id: user_id.to_string(),
    }
}

/// Which held-out target a scoring pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Ground truth against the baseline without the validation item.
    Test,
    /// Validation item against the baseline without the ground truth.
    Validation,
}

struct Case {
    user: UserRecord,
    candidates: BaselineRanking,
    relevant: Vec<String>,
}

fn cases(bundle: &DatasetBundle, ids: &[String], target: Target, history_len: usize) -> Result<Vec<Case>, DatasetError> {
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let user = bundle.user(id).ok_or_else(|| DatasetError::UnknownUser(id.clone()))?;
        let (candidates, relevant) = match target {
            Target::Test => (
                bundle.test_candidates(id).ok_or_else(|| missing(id))?,
                user.ground_truth.clone(),
            ),
            Target::Validation => match bundle.validation_candidates(id) {
                Some(c) => (c, alloc::vec![user.validation_item.clone()]),
                None => continue,
            },
        };
        out.push(Case {
            user: user.truncated(history_len),
            candidates,
            relevant,
        });
    }
    Ok(out)
}

type ProfilesAndLists = (Vec<Option<UserProfile>>, Vec<Option<RerankedList>>);

/// Profiles and reranks for every case. `None` marks a user whose profile
/// or rerank answer was unusable.
fn agp_rerank(
    cases: &[Case],
    prompt: &PromptState,
    llm: &(impl Llm + ?Sized),
) -> Result<ProfilesAndLists, StepError> {
    let users: Vec<&UserRecord> = cases.iter().map(|c| &c.user).collect();
    let mut profiles = Vec::with_capacity(cases.len());
    for result in generate_profiles(&users, prompt, llm) {
        match result {
            Ok(p) => profiles.push(Some(p)),
            Err(e) => match profile_step_error(e) {
                Some(err) => return Err(err),
                None => profiles.push(None),
            },
        }
    }
    let mut requests = Vec::new();
    for (case, profile) in cases.iter().zip(&profiles) {
        if let Some(p) = profile {
            requests.push(rerank::profile_rerank_request(p, &case.candidates).map_err(rerank_data_error)?);
        }
    }
    let mut responses = llm.complete_all(&requests).into_iter();
    let mut lists = Vec::with_capacity(cases.len());
    for (case, profile) in cases.iter().zip(&profiles) {
        if profile.is_none() {
            lists.push(None);
            continue;
        }
        let text = responses.next().expect("one response per request")?.text;
        match rerank::finish_rerank(&text, &case.candidates, RerankMode::Agp, Some(prompt.version)) {
            Ok(list) => lists.push(Some(list)),
            Err(RerankError::Unparseable { recognized, total }) => {
                log::warn!(
                    "unparseable rerank for {} ({recognized}/{total} entries recognized)",
                    case.user.user_id
                );
                lists.push(None);
            }
            Err(e) => return Err(rerank_data_error(e)),
        }
    }
    Ok((profiles, lists))
}

fn direct_rerank(
    cases: &[Case],
    mode: RerankMode,
    llm: &(impl Llm + ?Sized),
) -> Result<Vec<Option<RerankedList>>, StepError> {
    let requests = cases
        .iter()
        .map(|c| rerank::direct_rerank_request(&c.user, &c.candidates, mode == RerankMode::Cot))
        .collect::<Result<Vec<_>, _>>()
        .map_err(rerank_data_error)?;
    let mut lists = Vec::with_capacity(cases.len());
    for (case, response) in cases.iter().zip(llm.complete_all(&requests)) {
        match rerank::finish_rerank(&response?.text, &case.candidates, mode, None) {
            Ok(list) => lists.push(Some(list)),
            Err(RerankError::Unparseable { .. }) => lists.push(None),
            Err(e) => return Err(rerank_data_error(e)),
        }
    }
    Ok(lists)
}

fn rerank_data_error(e: RerankError) -> StepError {
    match e {
        RerankError::Gateway(g) => StepError::Gateway(g),
        other => StepError::Data(DatasetError::InvalidRanking {
            user_id: String::new(),
            reason: other.to_string(),
        }),
    }
}

fn score(list: &RerankedList, relevant: &[String]) -> Result<UserResult, DatasetError> {
    UserResult::score(&list.user_id, &list.items, relevant, list.repair_applied, list.prompt_version).map_err(|e| {
        DatasetError::InvalidRanking {
            user_id: list.user_id.clone(),
            reason: e.to_string(),
        }
    })
}

struct BatchOutcome {
    record: BatchRecord,
    rows: Vec<UserResult>,
    prompt: PromptState,
}

fn run_batch(
    bundle: &DatasetBundle,
    batch: Batch,
    prompt: &PromptState,
    cfg: &TrainConfig,
    llm: &(impl Llm + ?Sized),
) -> Result<BatchOutcome, StepError> {
    let before = llm.ledger();
    let cases = cases(bundle, &batch.user_ids, Target::Test, cfg.history_len).map_err(StepError::Data)?;
    let (profiles, lists) = agp_rerank(&cases, prompt, llm)?;

    // unusable answers fall back to the baseline order, flagged as repaired
    let lists: Vec<RerankedList> = cases
        .iter()
        .zip(lists)
        .map(|(case, list)| {
            list.unwrap_or_else(|| RerankedList {
                repair_applied: true,
                mode: RerankMode::Agp,
                prompt_version: Some(prompt.version),
                ..RerankedList::baseline(&case.candidates)
            })
        })
        .collect();

    let mut feedbacks = Vec::with_capacity(cases.len());
    let mut requests = Vec::with_capacity(cases.len());
    let mut rows = Vec::with_capacity(cases.len());
    for ((case, list), profile) in cases.iter().zip(&lists).zip(&profiles) {
        let fs = compute_feedback(list, &case.relevant).map_err(|e| match e {
            FeedbackError::Gateway(g) => StepError::Gateway(g),
            other => StepError::Data(DatasetError::InvalidRanking {
                user_id: case.user.user_id.clone(),
                reason: other.to_string(),
            }),
        })?;
        let profile = profile.clone().unwrap_or_else(|| UserProfile {
            user_id: case.user.user_id.clone(),
            text: "(no profile)".into(),
            prompt_version: prompt.version,
        });
        requests.push(feedback::loss_request(
            &fs,
            &profile,
            &prompt.text,
            &case.candidates,
            cfg.pbf_enabled,
        ));
        rows.push(score(list, &case.relevant).map_err(StepError::Data)?);
        feedbacks.push(fs);
    }
    let feedbacks: Vec<FeedbackSet> = feedbacks
        .into_iter()
        .zip(llm.complete_all(&requests))
        .zip(&cases)
        .map(|((fs, response), case)| {
            Ok(feedback::attach_diagnosis(fs, &case.candidates, cfg.pbf_enabled, &response?.text))
        })
        .collect::<Result<_, GatewayError>>()?;

    let summary = summarize_batch(&feedbacks, cfg, llm).map_err(update_step_error)?;
    let updated = apply_update(prompt, &summary, llm).map_err(update_step_error)?;
    let record = BatchRecord {
        batch,
        lists,
        feedbacks,
        summary,
        prompt_before: prompt.version,
        prompt_after: updated.version,
        calls: llm.ledger() - before,
    };
    Ok(BatchOutcome {
        record,
        rows,
        prompt: updated,
    })
}

fn update_step_error(e: UpdateError) -> StepError {
    match e {
        UpdateError::Gateway(g) => StepError::Gateway(g),
        other => StepError::Data(DatasetError::InvalidRanking {
            user_id: String::new(),
            reason: other.to_string(),
        }),
    }
}

fn epoch_order(train: &[String], seed: u64, epoch: u32) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(epoch));
    let mut order = train.to_vec();
    order.shuffle(&mut rng);
    order
}

/// Trains from a seed prompt. See [`resume`].
pub fn train(
    bundle: &DatasetBundle,
    seed_prompt: PromptState,
    cfg: TrainConfig,
    llm: &(impl Llm + ?Sized),
    observer: &mut impl TrainObserver,
) -> Result<RunState, TrainError> {
    resume(bundle, RunState::new(cfg, seed_prompt), llm, observer)
}

/// Runs epochs until the state's stop rule fires. On a gateway failure the
/// error carries the state as of the last completed batch.
pub fn resume(
    bundle: &DatasetBundle,
    mut state: RunState,
    llm: &(impl Llm + ?Sized),
    observer: &mut impl TrainObserver,
) -> Result<RunState, TrainError> {
    let cfg = state.config.clone();
    cfg.validate(bundle.split.train.len())?;
    bundle.validate()?;
    let abort = |source: GatewayError, state: &RunState| TrainError::Gateway {
        source,
        state: Box::new(state.clone()),
    };

    while state.stopped.is_none() {
        if state.epoch_order.is_empty() {
            state.epoch_order = epoch_order(&bundle.split.train, cfg.seed, state.epoch);
            state.next_batch = 0;
            state.epoch_rows.clear();
            state.epoch_calls = LedgerSnapshot::default();
        }
        let batches: Vec<Vec<String>> = state.epoch_order.chunks(cfg.batch_size).map(<[String]>::to_vec).collect();
        while state.next_batch < batches.len() {
            let batch = Batch {
                epoch: state.epoch,
                index: state.next_batch,
                user_ids: batches[state.next_batch].clone(),
            };
            let outcome = match run_batch(bundle, batch, state.current_prompt(), &cfg, llm) {
                Ok(o) => o,
                Err(StepError::Gateway(e)) => return Err(abort(e, &state)),
                Err(StepError::Data(e)) => return Err(e.into()),
            };
            if outcome.prompt.version != state.current_prompt().version {
                log::info!(
                    "epoch {} batch {}: prompt v{} -> v{}",
                    state.epoch,
                    state.next_batch,
                    state.current_prompt().version,
                    outcome.prompt.version
                );
                state.lineage.push(outcome.prompt);
            }
            state.epoch_rows.extend(outcome.rows);
            state.epoch_calls.add(&outcome.record.calls);
            state.training_calls.add(&outcome.record.calls);
            state.next_batch += 1;
            observer.on_batch(&outcome.record, &state);
        }

        let before = llm.ledger();
        let validation = match score_split(
            bundle,
            &bundle.split.eval,
            Target::Validation,
            state.current_prompt(),
            cfg.history_len,
            llm,
        ) {
            Ok(v) => v,
            Err(StepError::Gateway(e)) => return Err(abort(e, &state)),
            Err(StepError::Data(e)) => return Err(e.into()),
        };
        let validation_calls = llm.ledger() - before;
        state.validation_calls.add(&validation_calls);

        let train = SplitMetrics::from_rows(&state.epoch_rows).expect("every epoch has train users");
        let metrics = EpochMetrics {
            epoch: state.epoch,
            train,
            validation,
            prompt_version: state.current_prompt().version,
            training_calls: state.epoch_calls,
            validation_calls,
        };
        let score = validation.unwrap_or(train).ndcg_at_10;
        match state.best {
            Some(best) if score <= best.score => state.stale_epochs += 1,
            _ => {
                state.best = Some(BestPrompt {
                    version: metrics.prompt_version,
                    score,
                    epoch: state.epoch,
                });
                state.stale_epochs = 0;
            }
        }
        log::info!(
            "epoch {}: train NDCG@10 {:.4}, validation {}, prompt v{}",
            state.epoch,
            train.ndcg_at_10,
            validation.map(|v| format!("{:.4}", v.ndcg_at_10)).unwrap_or_else(|| "n/a".into()),
            metrics.prompt_version
        );
        state.metrics.push(metrics);
        if state.stale_epochs >= cfg.patience {
            state.stopped = Some(StopReason::Patience);
        } else if state.epoch >= cfg.max_epochs {
            state.stopped = Some(StopReason::MaxEpochs);
        }
        state.epoch_order.clear();
        state.next_batch = 0;
        if state.stopped.is_none() {
            state.epoch += 1;
        }
        let metrics = state.metrics.last().expect("just pushed").clone();
        observer.on_epoch(&metrics, &state);
    }
    Ok(state)
}

/// Profile-driven scores for `ids`; users whose answer was unusable are left
/// out. `None` when no user could be scored.
fn score_split(
    bundle: &DatasetBundle,
    ids: &[String],
    target: Target,
    prompt: &PromptState,
    history_len: usize,
    llm: &(impl Llm + ?Sized),
) -> Result<Option<SplitMetrics>, StepError> {
    let cases = cases(bundle, ids, target, history_len).map_err(StepError::Data)?;
    let (_, lists) = agp_rerank(&cases, prompt, llm)?;
    let rows = cases
        .iter()
        .zip(lists)
        .filter_map(|(case, list)| list.map(|l| score(&l, &case.relevant)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(StepError::Data)?;
    Ok(SplitMetrics::from_rows(&rows))
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("the eval split is empty")]
    EmptyEval,
    #[error("mode agp needs a prompt checkpoint")]
    MissingPrompt,
    #[error("every eval user failed to rerank ({0} users)")]
    AllFailed(usize),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// A scored evaluation together with the lists it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub lists: Vec<RerankedList>,
}

/// Reranks every eval user's test view in `mode` and scores it against the
/// ground truth. `base` makes no calls.
pub fn evaluate_run(
    bundle: &DatasetBundle,
    prompt: Option<&PromptState>,
    mode: RerankMode,
    history_len: usize,
    llm: &(impl Llm + ?Sized),
) -> Result<Evaluation, EvalError> {
    if bundle.split.eval.is_empty() {
        return Err(EvalError::EmptyEval);
    }
    let cases = cases(bundle, &bundle.split.eval, Target::Test, history_len.max(1))?;
    let step = |e: StepError| match e {
        StepError::Gateway(g) => EvalError::Gateway(g),
        StepError::Data(d) => EvalError::Data(d),
    };
    let lists: Vec<Option<RerankedList>> = match mode {
        RerankMode::Base => cases
            .iter()
            .map(|c| Some(RerankedList::baseline(&c.candidates)))
            .collect(),
        RerankMode::Dir | RerankMode::Cot => direct_rerank(&cases, mode, llm).map_err(step)?,
        RerankMode::Agp => {
            let prompt = prompt.ok_or(EvalError::MissingPrompt)?;
            agp_rerank(&cases, prompt, llm).map_err(step)?.1
        }
    };
    let mut rows = Vec::new();
    let mut failed = Vec::new();
    let mut kept = Vec::new();
    for (case, list) in cases.iter().zip(lists) {
        match list {
            Some(list) => {
                rows.push(score(&list, &case.relevant)?);
                kept.push(list);
            }
            None => failed.push(case.user.user_id.clone()),
        }
    }
    if rows.is_empty() {
        return Err(EvalError::AllFailed(failed.len()));
    }
    let mut report = build_report(rows, mode).expect("rows is non-empty");
    report.failed_users = failed;
    Ok(Evaluation { report, lists: kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedback::FeedbackPair;
    use crate::gateway::{Gateway, Purpose};
    use crate::mock::{MockBackend, MockWorldState};
    use crate::profile::seed_prompt;
    use alloc::vec;

    fn fs(user: &str, avg: f64, diagnosis: &str) -> FeedbackSet {
        FeedbackSet {
            user_id: user.into(),
            items: vec!["x".into()],
            pairs: vec![FeedbackPair {
                actual_pos: avg as usize,
                target_pos: 1,
            }],
            diagnosis: diagnosis.into(),
            avg_pos: avg,
            weight: 1.0 / avg,
            ndcg_at_10: 0.0,
        }
    }

    fn mock() -> Gateway<MockBackend> {
        Gateway::new(MockBackend::new(MockWorldState::default()))
    }

    #[test]
    fn heavier_diagnosis_comes_first() {
        let (text, contributing) = weighted_diagnoses(&[fs("b", 5.0, "low one"), fs("a", 1.0, "high one")]);
        assert!(text.find("high one").unwrap() < text.find("low one").unwrap());
        assert!(text.starts_with("[HIGH w=1.000] a:"));
        assert_eq!(contributing[0], ("a".into(), 1.0));
        assert_eq!(contributing[1].0, "b");
    }

    #[test]
    fn equal_weights_share_a_label() {
        let (text, _) = weighted_diagnoses(&[fs("a", 2.0, "d"), fs("b", 2.0, "d"), fs("c", 2.0, "d")]);
        assert_eq!(text.matches("[HIGH").count(), 3);
    }

    #[test]
    fn summarization_off_concatenates_without_a_call() {
        let llm = mock();
        let cfg = TrainConfig {
            summarization_enabled: false,
            ..TrainConfig::default()
        };
        let batch = [fs("a", 2.0, "first"), fs("b", 3.0, "second"), fs("c", 4.0, "third")];
        let s = summarize_batch(&batch, &cfg, &llm).unwrap();
        for d in ["first", "second", "third"] {
            assert!(s.text.contains(d));
        }
        assert_eq!(llm.ledger().total(), 0);
    }

    #[test]
    fn summary_deduplicates_statements() {
        let llm = mock();
        let d = "SUGGEST WEIGHT_RECENT_ITEMS: give recent interactions more weight.";
        let s = summarize_batch(&[fs("a", 2.0, d), fs("b", 3.0, d)], &TrainConfig::default(), &llm).unwrap();
        assert_eq!(s.text.matches("WEIGHT_RECENT_ITEMS").count(), 1);
        assert_eq!(llm.ledger().get(Purpose::Summarize), 1);
    }

    #[test]
    fn intensity_thresholds() {
        assert_eq!(Intensity::from_batch_weight(1.0), Intensity::Light);
        assert_eq!(Intensity::from_batch_weight(0.5), Intensity::Light);
        assert_eq!(Intensity::from_batch_weight(0.49), Intensity::Moderate);
        assert_eq!(Intensity::from_batch_weight(0.2), Intensity::Moderate);
        assert_eq!(Intensity::from_batch_weight(0.15), Intensity::Aggressive);
        assert_eq!(Intensity::Aggressive.edit_budget(), None);
    }

    fn summary(text: &str, batch_wt: f64) -> BatchFeedbackSummary {
        BatchFeedbackSummary {
            text: text.into(),
            contributing: vec![],
            batch_wt,
        }
    }

    #[test]
    fn zero_gradient_skips_the_optimizer() {
        let llm = mock();
        let p = seed_prompt("default").unwrap();
        let out = apply_update(&p, &summary("SUGGEST WEIGHT_RECENT_ITEMS: x", 1.0), &llm).unwrap();
        assert_eq!(out, p);
        assert_eq!(llm.ledger().total(), 0);
    }

    #[test]
    fn missing_token_is_added() {
        let llm = mock();
        let p = seed_prompt("default").unwrap();
        let out = apply_update(&p, &summary("SUGGEST WEIGHT_RECENT_ITEMS: x", 0.3), &llm).unwrap();
        assert_eq!(out.version, 1);
        assert_eq!(out.parent_version, Some(0));
        assert!(out.text.starts_with(p.text.trim()));
        assert!(out.text.contains("WEIGHT_RECENT_ITEMS"));
        assert_eq!(llm.ledger().get(Purpose::Optimize), 1);
    }

    #[test]
    fn degenerate_answer_keeps_the_prompt() {
        let llm = mock();
        let p = seed_prompt("default").unwrap();
        let out = apply_update(&p, &summary("nothing actionable", 0.3), &llm).unwrap();
        assert_eq!(out, p);
        assert_eq!(llm.ledger().get(Purpose::Optimize), 1);
    }

    #[test]
    fn aggressive_directive_in_request() {
        let p = seed_prompt("default").unwrap();
        let req = optimize_request(&p, &summary("s", 0.15));
        assert!(req.user().contains("AGGRESSIVE"));
    }

    #[test]
    fn code_fences_are_stripped() {
        assert_eq!(strip_code_fence("```text\nhello\n```"), "hello");
        assert_eq!(strip_code_fence("  plain "), "plain");
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate(10).is_ok());
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(10), Err(TrainError::Config(_))));
        assert!(TrainConfig::default().validate(5).is_err());
    }

    #[test]
    fn epoch_orders_depend_on_seed_and_epoch() {
        let ids: Vec<String> = (0..20).map(|i| format!("u{i:02}")).collect();
        assert_eq!(epoch_order(&ids, 3, 1), epoch_order(&ids, 3, 1));
        assert_ne!(epoch_order(&ids, 3, 1), epoch_order(&ids, 3, 2));
    }
}
