//! Seeded synthetic worlds for offline runs.
//!
//! Items carry their genres in the title, e.g. `Quiet Harbor [noir romance]`.
//! Every user prefers a primary and a secondary genre. Histories mix
//! preferred items with uniformly random "noise" picks; older slots are
//! noisier than recent ones while the mean noise rate stays at
//! `noise_rate`. The held-out validation and ground-truth items carry
//! exactly the two preferred genres, and the baseline list hides them among
//! candidates of mixed relevance at uniformly random positions.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    BaselineRanking, DatasetBundle, DatasetError, InteractionRecord, RankedItem, UserRecord,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticWorldSpec {
    pub seed: u64,
    pub genre_vocabulary: Vec<String>,
    pub n_users: usize,
    pub n_items: usize,
    pub history_length: usize,
    pub list_length: usize,
    pub noise_rate: f64,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        SyntheticWorldSpec {
            seed: 1,
            genre_vocabulary: [
                "fantasy", "noir", "romance", "scifi", "history", "comedy", "horror", "poetry",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            n_users: 100,
            n_items: 600,
            history_length: 10,
            list_length: 10,
            noise_rate: 0.5,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let fail = |msg: String| Err(DatasetError::InfeasibleSpec(msg));
        if self.genre_vocabulary.len() < 4 {
            return fail(format!(
                "need at least 4 genres, got {}",
                self.genre_vocabulary.len()
            ));
        }
        let distinct: BTreeSet<_> = self.genre_vocabulary.iter().collect();
        if distinct.len() != self.genre_vocabulary.len() {
            return fail("genre vocabulary has duplicates".into());
        }
        if let Some(bad) = self
            .genre_vocabulary
            .iter()
            .find(|g| g.is_empty() || g.contains(|c: char| c.is_whitespace() || c == '[' || c == ']'))
        {
            return fail(format!("genre token {bad:?} must be a single bare word"));
        }
        if self.list_length < 2 {
            return fail("list_length must be at least 2 (ground truth and validation)".into());
        }
        if self.n_items < self.list_length {
            return fail(format!(
                "n_items ({}) is smaller than list_length ({})",
                self.n_items, self.list_length
            ));
        }
        if self.history_length == 0 {
            return fail("history_length must be positive".into());
        }
        if self.n_users == 0 {
            return fail("n_users must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return fail(format!("noise_rate {} is outside [0, 1]", self.noise_rate));
        }
        Ok(())
    }
}

/// A user's hidden taste.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenrePreference {
    pub primary: String,
    pub secondary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub bundle: DatasetBundle,
    pub preferences: BTreeMap<String, GenrePreference>,
}

/// Genre tokens of a title: the whitespace-separated words inside its last
/// `[...]` group.
pub fn genre_tags(title: &str) -> Vec<&str> {
    let Some(open) = title.rfind('[') else {
        return Vec::new();
    };
    let rest = &title[open + 1..];
    let Some(close) = rest.find(']') else {
        return Vec::new();
    };
    rest[..close].split_whitespace().collect()
}

const ADJECTIVES: [&str; 24] = [
    "Quiet", "Crimson", "Hollow", "Silver", "Broken", "Endless", "Hidden", "Golden", "Frozen",
    "Distant", "Burning", "Lonely", "Wild", "Gentle", "Shattered", "Forgotten", "Bright",
    "Restless", "Secret", "Ancient", "Velvet", "Iron", "Paper", "Midnight",
];

const NOUNS: [&str; 25] = [
    "Harbor", "Ember", "Orchard", "Lantern", "River", "Crown", "Garden", "Tide", "Mirror",
    "Compass", "Meadow", "Signal", "Tower", "Voyage", "Archive", "Canyon", "Letter", "Circuit",
    "Forest", "Station", "Island", "Engine", "Chorus", "Labyrinth", "Winter",
];

struct Item {
    id: String,
    title: String,
    genres: Vec<usize>,
}

fn title_for(index: usize, genres: &[usize], vocab: &[String]) -> String {
    let combos = ADJECTIVES.len() * NOUNS.len();
    let adj = ADJECTIVES[index % ADJECTIVES.len()];
    let noun = NOUNS[(index / ADJECTIVES.len()) % NOUNS.len()];
    let tags: Vec<&str> = genres.iter().map(|g| vocab[*g].as_str()).collect();
    if index < combos {
        format!("{adj} {noun} [{}]", tags.join(" "))
    } else {
        format!("{adj} {noun} {} [{}]", index / combos + 1, tags.join(" "))
    }
}

/// Builds the catalog with every genre signature (single genres and pairs)
/// represented as evenly as the item count allows.
fn build_catalog(spec: &SyntheticWorldSpec, rng: &mut ChaCha8Rng) -> Vec<Item> {
    let v = spec.genre_vocabulary.len();
    let mut signatures: Vec<Vec<usize>> = (0..v).map(|g| alloc::vec![g]).collect();
    for a in 0..v {
        for b in a + 1..v {
            signatures.push(alloc::vec![a, b]);
        }
    }
    signatures.shuffle(rng);
    (0..spec.n_items)
        .map(|j| {
            let genres = signatures[j % signatures.len()].clone();
            Item {
                id: format!("i{j:05}"),
                title: title_for(j, &genres, &spec.genre_vocabulary),
                genres,
            }
        })
        .collect()
}

fn is_exact(item: &Item, wanted: &[usize]) -> bool {
    item.genres.len() == wanted.len() && wanted.iter().all(|g| item.genres.contains(g))
}

fn pick(
    rng: &mut ChaCha8Rng,
    catalog: &[Item],
    used: &BTreeSet<usize>,
    pred: impl Fn(&Item) -> bool,
) -> Option<usize> {
    let options: Vec<usize> = (0..catalog.len())
        .filter(|j| !used.contains(j) && pred(&catalog[*j]))
        .collect();
    options.choose(rng).copied()
}

/// Generates a world together with each user's hidden preference.
pub fn generate_world(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let catalog = build_catalog(spec, &mut rng);
    let v = spec.genre_vocabulary.len();

    // A pair is usable when it can supply both held-out items.
    let pairs: Vec<(usize, usize)> = (0..v)
        .flat_map(|a| (0..v).filter(move |b| *b != a).map(move |b| (a, b)))
        .filter(|(a, b)| catalog.iter().filter(|it| is_exact(it, &[*a, *b])).count() >= 2)
        .collect();
    if pairs.is_empty() {
        return Err(DatasetError::InfeasibleSpec(
            "catalog too small to give any genre pair two items".into(),
        ));
    }

    let m = spec.history_length;
    let mut users = Vec::with_capacity(spec.n_users);
    let mut rankings = Vec::with_capacity(spec.n_users);
    let mut preferences = BTreeMap::new();
    let infeasible = |what: &str, uid: &str| {
        DatasetError::InfeasibleSpec(format!("ran out of items for {what} of user {uid}"))
    };

    for u in 0..spec.n_users {
        let user_id = format!("u{u:04}");
        let (p1, p2) = *pairs.choose(&mut rng).expect("non-empty");
        let mut used = BTreeSet::new();

        let gt = pick(&mut rng, &catalog, &used, |it| is_exact(it, &[p1, p2]))
            .ok_or_else(|| infeasible("ground truth", &user_id))?;
        used.insert(gt);
        let val = pick(&mut rng, &catalog, &used, |it| is_exact(it, &[p1, p2]))
            .ok_or_else(|| infeasible("validation", &user_id))?;
        used.insert(val);

        let mut history_idx = Vec::with_capacity(m);
        for slot in 0..m {
            let noise_p = (spec.noise_rate * 2.0 * (m - slot) as f64 / (m + 1) as f64).min(1.0);
            let chosen = if rng.random_bool(noise_p) {
                pick(&mut rng, &catalog, &used, |_| true)
            } else {
                let (first, second): (&[usize], &[usize]) = if rng.random_bool(0.6) {
                    (&[p1, p2], &[p1])
                } else {
                    (&[p1], &[p1, p2])
                };
                pick(&mut rng, &catalog, &used, |it| is_exact(it, first))
                    .or_else(|| pick(&mut rng, &catalog, &used, |it| is_exact(it, second)))
                    .or_else(|| pick(&mut rng, &catalog, &used, |it| it.genres.contains(&p1)))
            };
            let j = chosen.ok_or_else(|| infeasible("history", &user_id))?;
            used.insert(j);
            history_idx.push(j);
        }

        // Distractors cycle through: shares the primary genre, shares the
        // secondary genre, anything else.
        let mut distractors = Vec::with_capacity(spec.list_length - 2);
        for slot in 0..spec.list_length - 2 {
            let chosen = match slot % 3 {
                0 => pick(&mut rng, &catalog, &used, |it| {
                    it.genres.contains(&p1) && !it.genres.contains(&p2)
                }),
                1 => pick(&mut rng, &catalog, &used, |it| {
                    it.genres.contains(&p2) && !it.genres.contains(&p1)
                }),
                _ => pick(&mut rng, &catalog, &used, |it| !is_exact(it, &[p1, p2])),
            }
            .or_else(|| pick(&mut rng, &catalog, &used, |it| !is_exact(it, &[p1, p2])))
            .ok_or_else(|| infeasible("baseline list", &user_id))?;
            used.insert(chosen);
            distractors.push(chosen);
        }

        let mut others = distractors;
        others.push(val);
        others.shuffle(&mut rng);
        let gt_slot = rng.random_range(0..spec.list_length);
        others.insert(gt_slot, gt);

        let base_ts = 1_600_000_000_i64 + (u as i64) * 10_000_000;
        let mut ts = base_ts;
        let mut history = Vec::with_capacity(m);
        for j in history_idx {
            ts += rng.random_range(3_600..86_400);
            history.push(InteractionRecord {
                item_id: catalog[j].id.clone(),
                title: catalog[j].title.clone(),
                timestamp: ts,
            });
        }

        users.push(UserRecord {
            user_id: user_id.clone(),
            history,
            validation_item: catalog[val].id.clone(),
            ground_truth: alloc::vec![catalog[gt].id.clone()],
        });
        rankings.push(BaselineRanking {
            user_id: user_id.clone(),
            source_model: "synthetic".into(),
            items: others
                .into_iter()
                .map(|j| RankedItem {
                    item_id: catalog[j].id.clone(),
                    title: catalog[j].title.clone(),
                })
                .collect(),
        });
        preferences.insert(
            user_id,
            GenrePreference {
                primary: spec.genre_vocabulary[p1].clone(),
                secondary: spec.genre_vocabulary[p2].clone(),
            },
        );
    }

    Ok(SyntheticWorld {
        bundle: DatasetBundle::new(users, rankings)?,
        preferences,
    })
}

pub fn generate_synthetic_world(spec: &SyntheticWorldSpec) -> Result<DatasetBundle, DatasetError> {
    generate_world(spec).map(|w| w.bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_world() {
        let spec = SyntheticWorldSpec::default();
        assert_eq!(
            generate_synthetic_world(&spec).unwrap(),
            generate_synthetic_world(&spec).unwrap()
        );
        let other = SyntheticWorldSpec {
            seed: 2,
            ..spec.clone()
        };
        assert_ne!(
            generate_synthetic_world(&spec).unwrap(),
            generate_synthetic_world(&other).unwrap()
        );
    }

    #[test]
    fn noiseless_histories_carry_primary_genre() {
        let spec = SyntheticWorldSpec {
            noise_rate: 0.0,
            ..Default::default()
        };
        let world = generate_world(&spec).unwrap();
        for (uid, user) in &world.bundle.users {
            let primary = &world.preferences[uid].primary;
            for rec in &user.history {
                assert!(
                    genre_tags(&rec.title).contains(&primary.as_str()),
                    "{uid}: {} lacks {primary}",
                    rec.title
                );
            }
        }
    }

    #[test]
    fn too_few_items_is_infeasible() {
        let spec = SyntheticWorldSpec {
            n_items: 5,
            list_length: 10,
            ..Default::default()
        };
        assert!(matches!(
            generate_synthetic_world(&spec),
            Err(DatasetError::InfeasibleSpec(_))
        ));
        let spec = SyntheticWorldSpec {
            genre_vocabulary: alloc::vec!["a".into(), "b".into(), "c".into()],
            ..Default::default()
        };
        assert!(generate_synthetic_world(&spec).is_err());
    }

    #[test]
    fn rankings_hold_both_held_out_items() {
        let world = generate_world(&SyntheticWorldSpec::default()).unwrap();
        let b = &world.bundle;
        for (uid, user) in &b.users {
            let r = &b.rankings[uid];
            assert_eq!(r.items.len(), 10);
            assert!(r.contains(&user.validation_item));
            assert!(r.contains(&user.ground_truth[0]));
            assert_eq!(user.history.len(), 10);
        }
    }

    #[test]
    fn genre_tag_parsing() {
        assert_eq!(genre_tags("Saga of Ember [fantasy adventure]"), ["fantasy", "adventure"]);
        assert!(genre_tags("No tags here").is_empty());
        assert_eq!(genre_tags("A [x] B [y z]"), ["y", "z"]);
    }
}
