//! Chat-completion requests, the call ledger and the backend abstraction.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::ops::Sub;
use core::sync::atomic::{AtomicU64, Ordering};
use core::time::Duration;

use serde::{Deserialize, Serialize};

/// The five kinds of model call the pipeline makes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Profile,
    Rerank,
    Loss,
    Summarize,
    Optimize,
}

impl Purpose {
    pub const ALL: [Purpose; 5] = [
        Purpose::Profile,
        Purpose::Rerank,
        Purpose::Loss,
        Purpose::Summarize,
        Purpose::Optimize,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Purpose::Profile => "profile",
            Purpose::Rerank => "rerank",
            Purpose::Loss => "loss",
            Purpose::Summarize => "summarize",
            Purpose::Optimize => "optimize",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for Purpose {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Purpose::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| GatewayError::UnrecognizedPurpose(s.into()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub purpose: Purpose,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub const DEFAULT_MAX_TOKENS: u32 = 1024;

    pub fn new(purpose: Purpose, system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            messages: alloc::vec![
                Message {
                    role: Role::System,
                    content: system.into(),
                },
                Message {
                    role: Role::User,
                    content: user.into(),
                },
            ],
            purpose,
            temperature: 0.0,
            max_tokens: Self::DEFAULT_MAX_TOKENS,
        }
    }

    pub fn system(&self) -> &str {
        self.first(Role::System)
    }

    pub fn user(&self) -> &str {
        self.first(Role::User)
    }

    fn first(&self, role: Role) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == role)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
    pub latency: Duration,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        ChatResponse {
            text: text.into(),
            usage: None,
            latency: Duration::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("rate limited; gave up after {attempts} attempts")]
    RateLimitExhausted { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unrecognized purpose {0}")]
    UnrecognizedPurpose(String),
    #[error("backend error: {0}")]
    Backend(String),
}

/// Per-purpose call counters. Updates are atomic so one ledger can be shared
/// by concurrent in-flight calls; the total is always the sum of the
/// per-purpose counts.
#[derive(Debug, Default)]
pub struct CallLedger {
    counts: [AtomicU64; 5],
}

impl CallLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, purpose: Purpose) {
        self.counts[purpose.index()].fetch_add(1, Ordering::SeqCst);
    }

    pub fn count(&self, purpose: Purpose) -> u64 {
        self.counts[purpose.index()].load(Ordering::SeqCst)
    }

    pub fn total(&self) -> u64 {
        self.snapshot().total()
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let mut counts = [0; 5];
        for (slot, counter) in counts.iter_mut().zip(&self.counts) {
            *slot = counter.load(Ordering::SeqCst);
        }
        LedgerSnapshot { counts }
    }
}

/// A frozen copy of the ledger; snapshots subtract to give per-batch or
/// per-epoch deltas.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    counts: [u64; 5],
}

impl LedgerSnapshot {
    pub fn get(&self, purpose: Purpose) -> u64 {
        self.counts[purpose.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Purpose, u64)> + '_ {
        Purpose::ALL.into_iter().map(|p| (p, self.get(p)))
    }

    pub fn add(&mut self, other: &LedgerSnapshot) {
        for (a, b) in self.counts.iter_mut().zip(other.counts) {
            *a += b;
        }
    }

    /// `purpose,count` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        use core::fmt::Write;
        let mut out = String::from("purpose,count\n");
        for (purpose, count) in self.iter() {
            let _ = writeln!(out, "{purpose},{count}");
        }
        let _ = writeln!(out, "total,{}", self.total());
        out
    }
}

impl Sub for LedgerSnapshot {
    type Output = LedgerSnapshot;

    fn sub(self, rhs: Self) -> Self::Output {
        let mut counts = [0; 5];
        for (i, slot) in counts.iter_mut().enumerate() {
            *slot = self.counts[i].saturating_sub(rhs.counts[i]);
        }
        LedgerSnapshot { counts }
    }
}

/// Something that can answer one chat request.
pub trait ChatBackend {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).send(request)
    }
}

/// The interface the pipeline talks to.
///
/// `complete_all` answers a set of independent requests and returns results
/// in request order. The default runs them one after another; concurrent
/// implementations must preserve the order.
pub trait Llm {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;

    fn complete_all(&self, requests: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        requests.iter().map(|r| self.complete(r)).collect()
    }

    fn ledger(&self) -> LedgerSnapshot;
}

/// Wraps a backend with request validation and call accounting. Only
/// successful calls are recorded.
#[derive(Debug)]
pub struct Gateway<B> {
    backend: B,
    ledger: CallLedger,
}

impl<B: ChatBackend> Gateway<B> {
    pub fn new(backend: B) -> Self {
        Gateway {
            backend,
            ledger: CallLedger::new(),
        }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn call_ledger(&self) -> &CallLedger {
        &self.ledger
    }
}

impl<B: ChatBackend> Llm for Gateway<B> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let response = self.backend.send(request)?;
        self.ledger.record(request.purpose);
        Ok(response)
    }

    fn ledger(&self) -> LedgerSnapshot {
        self.ledger.snapshot()
    }
}

impl<L: Llm + ?Sized> Llm for &L {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }

    fn complete_all(&self, requests: &[ChatRequest]) -> Vec<Result<ChatResponse, GatewayError>> {
        (**self).complete_all(requests)
    }

    fn ledger(&self) -> LedgerSnapshot {
        (**self).ledger()
    }
}

/// Expected calls for one training epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallEstimate {
    pub per_epoch: u64,
    pub batches: u64,
    /// Set when `batch_size` does not divide `n_train`; the batch count is
    /// rounded up and the figure over-counts the final short batch.
    pub approximate: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BudgetError {
    #[error("batch size must be positive")]
    ZeroBatch,
    #[error("training set size must be positive")]
    ZeroTrain,
}

/// `(batch_size * 3 + 2) * n_train / batch_size`: three calls per user
/// (profile, rerank, loss) and two per batch (summarize, optimize).
pub fn expected_calls(batch_size: u64, n_train: u64) -> Result<CallEstimate, BudgetError> {
    if batch_size == 0 {
        return Err(BudgetError::ZeroBatch);
    }
    if n_train == 0 {
        return Err(BudgetError::ZeroTrain);
    }
    let batches = n_train.div_ceil(batch_size);
    Ok(CallEstimate {
        per_epoch: (batch_size * 3 + 2) * batches,
        batches,
        approximate: !n_train.is_multiple_of(batch_size),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Echo;
    impl ChatBackend for Echo {
        fn send(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            if request.user() == "deny" {
                return Err(GatewayError::Auth("bad key".into()));
            }
            Ok(ChatResponse::text(request.user()))
        }
    }

    #[test]
    fn budget_formula() {
        let calls = |b| expected_calls(b, 100).unwrap();
        assert_eq!(calls(10).per_epoch, 320);
        assert_eq!(calls(5).per_epoch, 340);
        assert_eq!(calls(20).per_epoch, 310);
        assert!(!calls(20).approximate);
        let rough = expected_calls(30, 100).unwrap();
        assert!(rough.approximate);
        assert_eq!(rough.batches, 4);
        assert_eq!(rough.per_epoch, 92 * 4);
        assert_eq!(expected_calls(0, 100), Err(BudgetError::ZeroBatch));
    }

    #[test]
    fn ledger_counts_only_successes() {
        let gw = Gateway::new(Echo);
        gw.complete(&ChatRequest::new(Purpose::Profile, "s", "hi")).unwrap();
        let err = gw.complete(&ChatRequest::new(Purpose::Rerank, "s", "deny"));
        assert!(matches!(err, Err(GatewayError::Auth(_))));
        let snap = gw.ledger();
        assert_eq!(snap.get(Purpose::Profile), 1);
        assert_eq!(snap.get(Purpose::Rerank), 0);
        assert_eq!(snap.total(), 1);
    }

    #[test]
    fn invalid_requests_are_rejected() {
        let gw = Gateway::new(Echo);
        let mut req = ChatRequest::new(Purpose::Loss, "s", "u");
        req.messages.clear();
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
        let mut req = ChatRequest::new(Purpose::Loss, "s", "u");
        req.temperature = -1.0;
        assert!(gw.complete(&req).is_err());
        assert_eq!(gw.ledger().total(), 0);
    }

    #[test]
    fn ledger_csv_has_totals_row() {
        let ledger = CallLedger::new();
        ledger.record(Purpose::Summarize);
        ledger.record(Purpose::Summarize);
        ledger.record(Purpose::Optimize);
        assert_eq!(
            ledger.snapshot().to_csv(),
            "purpose,count\nprofile,0\nrerank,0\nloss,0\nsummarize,2\noptimize,1\ntotal,3\n"
        );
    }

    #[test]
    fn purpose_round_trips_through_str() {
        for p in Purpose::ALL {
            assert_eq!(p.as_str().parse::<Purpose>().unwrap(), p);
        }
        assert!("rank".parse::<Purpose>().is_err());
    }
}
