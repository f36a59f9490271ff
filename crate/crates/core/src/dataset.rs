//! User histories, baseline rankings and the train/eval protocol.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DatasetError {
    #[error("user {user_id}: {reason}")]
    InvalidUser { user_id: String, reason: String },
    #[error("ranking for user {user_id}: {reason}")]
    InvalidRanking { user_id: String, reason: String },
    #[error("duplicate user {0}")]
    DuplicateUser(String),
    #[error("duplicate ranking for user {0}")]
    DuplicateRanking(String),
    #[error("ranking references unknown user {0}")]
    UnknownUser(String),
    #[error("user {user_id} has no baseline ranking")]
    MissingRanking { user_id: String },
    #[error("ground-truth item {item_id} of user {user_id} is absent from the baseline ranking")]
    GroundTruthAbsent { user_id: String, item_id: String },
    #[error("no user has at least 3 interactions (dropped: {})", .dropped.join(", "))]
    TooFewInteractions { dropped: Vec<String> },
    #[error("need {needed} users but only {available} are available")]
    InsufficientUsers { needed: usize, available: usize },
    #[error("infeasible synthetic world: {0}")]
    InfeasibleSpec(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub item_id: String,
    pub title: String,
    pub timestamp: i64,
}

impl InteractionRecord {
    fn order_key(&self) -> (i64, &str) {
        (self.timestamp, self.item_id.as_str())
    }
}

fn chronological(a: &InteractionRecord, b: &InteractionRecord) -> Ordering {
    a.order_key().cmp(&b.order_key())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    /// Oldest first.
    pub history: Vec<InteractionRecord>,
    pub validation_item: String,
    pub ground_truth: Vec<String>,
}

impl UserRecord {
    /// Sorts the history chronologically (ties broken by item id) and checks
    /// the record's invariants.
    pub fn normalized(mut self) -> Result<Self, DatasetError> {
        self.history.sort_by(chronological);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |reason: &str| DatasetError::InvalidUser {
            user_id: self.user_id.clone(),
            reason: reason.to_string(),
        };
        if self.user_id.trim().is_empty() {
            return Err(fail("empty user id"));
        }
        if self.ground_truth.is_empty() {
            return Err(fail("ground_truth is empty"));
        }
        let mut seen = BTreeSet::new();
        if !self.ground_truth.iter().all(|id| seen.insert(id.as_str())) {
            return Err(fail("ground_truth items are not distinct"));
        }
        for rec in &self.history {
            if rec.title.trim().is_empty() {
                return Err(fail(&alloc::format!("history item {} has an empty title", rec.item_id)));
            }
            if rec.item_id == self.validation_item || self.ground_truth.contains(&rec.item_id) {
                return Err(fail(&alloc::format!(
                    "held-out item {} also appears in the history",
                    rec.item_id
                )));
            }
        }
        for pair in self.history.windows(2) {
            if chronological(&pair[0], &pair[1]) != Ordering::Less {
                return Err(fail("history is not strictly ordered by (timestamp, item_id)"));
            }
        }
        Ok(())
    }

    /// Keeps the `max_len` most recent history entries.
    pub fn truncated(&self, max_len: usize) -> UserRecord {
        let mut out = self.clone();
        truncate_history(&mut out, max_len);
        out
    }
}

/// Keeps the `max_len` most recent entries of the history in place.
///
/// A `max_len` of zero is treated as one; callers validate the configured
/// length up front.
pub fn truncate_history(user: &mut UserRecord, max_len: usize) {
    let max_len = max_len.max(1);
    let len = user.history.len();
    if len > max_len {
        user.history.drain(..len - max_len);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineRanking {
    pub user_id: String,
    pub source_model: String,
    pub items: Vec<RankedItem>,
}

impl BaselineRanking {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |reason: String| DatasetError::InvalidRanking {
            user_id: self.user_id.clone(),
            reason,
        };
        if self.items.is_empty() {
            return Err(fail("no items".into()));
        }
        let mut seen = BTreeSet::new();
        for item in &self.items {
            if item.title.trim().is_empty() {
                return Err(fail(alloc::format!("item {} has an empty title", item.item_id)));
            }
            if !seen.insert(item.item_id.as_str()) {
                return Err(fail(alloc::format!("item {} listed twice", item.item_id)));
            }
        }
        Ok(())
    }

    pub fn item_ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.item_id.as_str())
    }

    pub fn position_of(&self, item_id: &str) -> Option<usize> {
        self.items.iter().position(|i| i.item_id == item_id)
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.position_of(item_id).is_some()
    }

    /// The same list with the given items removed, order preserved.
    pub fn without(&self, excluded: &[String]) -> BaselineRanking {
        BaselineRanking {
            user_id: self.user_id.clone(),
            source_model: self.source_model.clone(),
            items: self
                .items
                .iter()
                .filter(|i| !excluded.contains(&i.item_id))
                .cloned()
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub users: BTreeMap<String, UserRecord>,
    pub rankings: BTreeMap<String, BaselineRanking>,
    pub split: Split,
}

impl DatasetBundle {
    /// Builds a bundle, normalizing every history and resolving all
    /// cross-references. The split starts empty; see [`sample_split`].
    pub fn new(
        users: impl IntoIterator<Item = UserRecord>,
        rankings: impl IntoIterator<Item = BaselineRanking>,
    ) -> Result<Self, DatasetError> {
        let mut user_map = BTreeMap::new();
        for user in users {
            let user = user.normalized()?;
            if user_map.contains_key(&user.user_id) {
                return Err(DatasetError::DuplicateUser(user.user_id));
            }
            user_map.insert(user.user_id.clone(), user);
        }
        let mut ranking_map = BTreeMap::new();
        for ranking in rankings {
            ranking.validate()?;
            let Some(user) = user_map.get(&ranking.user_id) else {
                return Err(DatasetError::UnknownUser(ranking.user_id));
            };
            if let Some(gt) = user.ground_truth.iter().find(|id| !ranking.contains(id)) {
                return Err(DatasetError::GroundTruthAbsent {
                    user_id: ranking.user_id.clone(),
                    item_id: gt.clone(),
                });
            }
            if ranking_map.contains_key(&ranking.user_id) {
                return Err(DatasetError::DuplicateRanking(ranking.user_id));
            }
            ranking_map.insert(ranking.user_id.clone(), ranking);
        }
        Ok(DatasetBundle {
            users: user_map,
            rankings: ranking_map,
            split: Split::default(),
        })
    }

    /// Checks every bundle invariant, including the split.
    pub fn validate(&self) -> Result<(), DatasetError> {
        for user in self.users.values() {
            user.validate()?;
        }
        for ranking in self.rankings.values() {
            ranking.validate()?;
            let user = self
                .users
                .get(&ranking.user_id)
                .ok_or_else(|| DatasetError::UnknownUser(ranking.user_id.clone()))?;
            if let Some(gt) = user.ground_truth.iter().find(|id| !ranking.contains(id)) {
                return Err(DatasetError::GroundTruthAbsent {
                    user_id: ranking.user_id.clone(),
                    item_id: gt.clone(),
                });
            }
        }
        for id in self.split.train.iter().chain(&self.split.eval) {
            if !self.users.contains_key(id) {
                return Err(DatasetError::UnknownUser(id.clone()));
            }
            if !self.rankings.contains_key(id) {
                return Err(DatasetError::MissingRanking { user_id: id.clone() });
            }
        }
        Ok(())
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.get(user_id)
    }

    pub fn ranking(&self, user_id: &str) -> Option<&BaselineRanking> {
        self.rankings.get(user_id)
    }

    /// Candidates used when the ground truth is the target: the baseline list
    /// without the (already consumed) validation item.
    pub fn test_candidates(&self, user_id: &str) -> Option<BaselineRanking> {
        let user = self.users.get(user_id)?;
        let ranking = self.rankings.get(user_id)?;
        Some(ranking.without(core::slice::from_ref(&user.validation_item)))
    }

    /// Candidates used for validation scoring: the baseline list without the
    /// ground-truth items. `None` when the validation item is not in the list.
    pub fn validation_candidates(&self, user_id: &str) -> Option<BaselineRanking> {
        let user = self.users.get(user_id)?;
        let ranking = self.rankings.get(user_id)?;
        if !ranking.contains(&user.validation_item) {
            return None;
        }
        Some(ranking.without(&user.ground_truth))
    }
}

/// Result of a leave-one-out split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LooSplit {
    pub users: Vec<UserRecord>,
    /// Users with fewer than three interactions.
    pub dropped: Vec<String>,
}

/// Leave-one-out: the latest interaction is the ground truth, the one before
/// it the validation item and the rest the history.
pub fn loo_split(
    raw: &BTreeMap<String, Vec<InteractionRecord>>,
) -> Result<LooSplit, DatasetError> {
    let mut users = Vec::new();
    let mut dropped = Vec::new();
    for (user_id, interactions) in raw {
        if interactions.len() < 3 {
            log::warn!("dropping user {user_id}: {} interactions", interactions.len());
            dropped.push(user_id.clone());
            continue;
        }
        let mut ordered = interactions.clone();
        ordered.sort_by(chronological);
        let test = ordered.pop().expect("len >= 3");
        let validation = ordered.pop().expect("len >= 3");
        users.push(UserRecord {
            user_id: user_id.clone(),
            history: ordered,
            validation_item: validation.item_id,
            ground_truth: alloc::vec![test.item_id],
        });
    }
    if users.is_empty() {
        return Err(DatasetError::TooFewInteractions { dropped });
    }
    Ok(LooSplit { users, dropped })
}

/// Draws train and eval user sets deterministically from `seed`.
///
/// Only users that have a baseline ranking are eligible. With
/// `allow_overlap` the eval set is drawn independently of the train set.
pub fn sample_split(
    bundle: &DatasetBundle,
    n_train: usize,
    n_eval: usize,
    seed: u64,
    allow_overlap: bool,
) -> Result<DatasetBundle, DatasetError> {
    let mut eligible: Vec<&String> = bundle
        .users
        .keys()
        .filter(|id| bundle.rankings.contains_key(*id))
        .collect();
    let needed = if allow_overlap {
        n_train.max(n_eval)
    } else {
        n_train + n_eval
    };
    if needed > eligible.len() {
        return Err(DatasetError::InsufficientUsers {
            needed,
            available: eligible.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    let mut train: Vec<String> = eligible[..n_train].iter().map(|s| (*s).clone()).collect();
    let mut eval: Vec<String> = if allow_overlap {
        eligible.shuffle(&mut rng);
        eligible[..n_eval].iter().map(|s| (*s).clone()).collect()
    } else {
        eligible[n_train..n_train + n_eval]
            .iter()
            .map(|s| (*s).clone())
            .collect()
    };
    train.sort();
    eval.sort();
    let mut out = bundle.clone();
    out.split = Split { train, eval };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::vec;

    fn rec(id: &str, ts: i64) -> InteractionRecord {
        InteractionRecord {
            item_id: id.into(),
            title: format!("Title {id}"),
            timestamp: ts,
        }
    }

    fn user(id: &str, history: &[&str], val: &str, gt: &str) -> UserRecord {
        UserRecord {
            user_id: id.into(),
            history: history
                .iter()
                .enumerate()
                .map(|(i, h)| rec(h, i as i64))
                .collect(),
            validation_item: val.into(),
            ground_truth: vec![gt.into()],
        }
    }

    fn ranking(uid: &str, items: &[&str]) -> BaselineRanking {
        BaselineRanking {
            user_id: uid.into(),
            source_model: "test".into(),
            items: items
                .iter()
                .map(|i| RankedItem {
                    item_id: (*i).into(),
                    title: format!("Title {i}"),
                })
                .collect(),
        }
    }

    fn fixture() -> DatasetBundle {
        DatasetBundle::new(
            vec![
                user("u1", &["a", "b"], "c", "d"),
                user("u2", &["e", "f"], "g", "h"),
                user("u3", &["a", "e"], "b", "f"),
            ],
            vec![
                ranking("u1", &["x", "d", "c"]),
                ranking("u2", &["h", "y"]),
                ranking("u3", &["z", "b", "f"]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn builds_three_user_fixture() {
        let b = fixture();
        assert_eq!(b.users.len(), 3);
        assert_eq!(b.rankings.len(), 3);
        b.validate().unwrap();
    }

    #[test]
    fn unknown_user_in_ranking_is_rejected() {
        let err = DatasetBundle::new(
            vec![user("u1", &["a"], "c", "d")],
            vec![ranking("u999", &["d"])],
        )
        .unwrap_err();
        assert_eq!(err, DatasetError::UnknownUser("u999".into()));
    }

    #[test]
    fn ranking_without_ground_truth_is_rejected() {
        let err = DatasetBundle::new(
            vec![user("u1", &["a"], "c", "d")],
            vec![ranking("u1", &["x", "y"])],
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::GroundTruthAbsent { ref user_id, .. } if user_id == "u1"));
    }

    #[test]
    fn invariants_on_user_records() {
        let mut u = user("u1", &["a", "b"], "b", "d");
        assert!(u.clone().normalized().is_err(), "validation item in history");
        u.validation_item = "c".into();
        u.ground_truth = vec!["d".into(), "d".into()];
        assert!(u.clone().normalized().is_err(), "duplicate ground truth");
        u.ground_truth = vec!["d".into()];
        u.history[0].title = "   ".into();
        assert!(u.normalized().is_err(), "blank title");
    }

    #[test]
    fn histories_are_sorted_with_item_id_tiebreak() {
        let u = UserRecord {
            user_id: "u".into(),
            history: vec![rec("z", 5), rec("b", 3), rec("a", 3)],
            validation_item: "v".into(),
            ground_truth: vec!["g".into()],
        }
        .normalized()
        .unwrap();
        let ids: Vec<_> = u.history.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "z"]);
    }

    #[test]
    fn loo_on_four_interactions() {
        let mut raw = BTreeMap::new();
        raw.insert(
            "u".to_string(),
            vec![rec("c", 3), rec("a", 1), rec("d", 4), rec("b", 2)],
        );
        let out = loo_split(&raw).unwrap();
        let u = &out.users[0];
        let ids: Vec<_> = u.history.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(u.validation_item, "c");
        assert_eq!(u.ground_truth, ["d"]);
    }

    #[test]
    fn loo_drops_short_users() {
        let mut raw = BTreeMap::new();
        raw.insert("short".to_string(), vec![rec("a", 1), rec("b", 2)]);
        raw.insert("ok".to_string(), vec![rec("a", 1), rec("b", 2), rec("c", 3)]);
        let out = loo_split(&raw).unwrap();
        assert_eq!(out.dropped, ["short"]);
        assert_eq!(out.users.len(), 1);

        raw.remove("ok");
        assert_eq!(
            loo_split(&raw).unwrap_err(),
            DatasetError::TooFewInteractions {
                dropped: vec!["short".into()]
            }
        );
    }

    #[test]
    fn loo_five_users_ten_interactions() {
        let raw: BTreeMap<String, Vec<InteractionRecord>> = (0..5)
            .map(|u| {
                (
                    format!("u{u}"),
                    (0..10).map(|i| rec(&format!("i{i}"), i)).collect(),
                )
            })
            .collect();
        let out = loo_split(&raw).unwrap();
        assert_eq!(out.users.len(), 5);
        assert!(out.users.iter().all(|u| u.history.len() == 8));
    }

    fn many_users(n: usize) -> DatasetBundle {
        let users: Vec<_> = (0..n)
            .map(|i| user(&format!("u{i:03}"), &["a"], "v", "g"))
            .collect();
        let rankings: Vec<_> = (0..n)
            .map(|i| ranking(&format!("u{i:03}"), &["g", "v"]))
            .collect();
        DatasetBundle::new(users, rankings).unwrap()
    }

    #[test]
    fn sample_split_is_deterministic_and_disjoint() {
        let b = many_users(500);
        let s1 = sample_split(&b, 100, 300, 7, false).unwrap();
        let s2 = sample_split(&b, 100, 300, 7, false).unwrap();
        assert_eq!(s1.split, s2.split);
        assert_eq!(s1.split.train.len(), 100);
        assert_eq!(s1.split.eval.len(), 300);
        let train: BTreeSet<_> = s1.split.train.iter().collect();
        assert!(s1.split.eval.iter().all(|u| !train.contains(u)));
        let s3 = sample_split(&b, 100, 300, 8, false).unwrap();
        assert_ne!(s1.split.train, s3.split.train);
    }

    #[test]
    fn sample_split_needs_enough_users() {
        let b = many_users(350);
        assert_eq!(
            sample_split(&b, 100, 300, 7, false).unwrap_err(),
            DatasetError::InsufficientUsers {
                needed: 400,
                available: 350
            }
        );
        let overlapping = sample_split(&b, 100, 300, 7, true).unwrap();
        assert_eq!(overlapping.split.eval.len(), 300);
    }

    #[test]
    fn truncation_keeps_most_recent() {
        let u = user("u", &["a", "b", "c", "d", "e", "f", "g", "h"], "v", "g1");
        let t = u.truncated(5);
        let ids: Vec<_> = t.history.iter().map(|r| r.item_id.as_str()).collect();
        assert_eq!(ids, ["d", "e", "f", "g", "h"]);
        let short = user("u", &["a", "b", "c"], "v", "g1");
        assert_eq!(short.truncated(10), short);
        let exact = user("u", &["a"; 1], "v", "g1");
        assert_eq!(exact.truncated(1), exact);
    }

    #[test]
    fn candidate_views() {
        let b = fixture();
        let test = b.test_candidates("u1").unwrap();
        assert_eq!(test.item_ids().collect::<Vec<_>>(), ["x", "d"]);
        let val = b.validation_candidates("u1").unwrap();
        assert_eq!(val.item_ids().collect::<Vec<_>>(), ["x", "c"]);
        assert!(b.validation_candidates("u2").is_none());
    }
}
