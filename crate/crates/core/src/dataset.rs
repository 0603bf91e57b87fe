//! Interaction data: CSV loading, synthetic generation, sequencing, splitting.
//!
//! All construction is validating; once built, an [`InteractionDataset`] is
//! immutable and safe to share across threads.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

/// History length of every sequence.
pub const HISTORY_LEN: usize = 10;
/// History plus one target interaction.
pub const SEQUENCE_LEN: usize = HISTORY_LEN + 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed row: {msg}")]
    Malformed { path: String, line: u64, msg: String },
    #[error("unknown group label {label:?}; declared groups are {groups:?}")]
    UnknownGroup { label: String, groups: Vec<String> },
    #[error("duplicate user id {0:?}")]
    DuplicateUser(String),
    #[error("duplicate item id {0:?}")]
    DuplicateItem(String),
    #[error("item {0:?} has no title tokens")]
    EmptyTitle(String),
    #[error("interaction references unknown user {0:?}")]
    DanglingUser(String),
    #[error("interaction references unknown item {0:?}")]
    DanglingItem(String),
    #[error("rating {rating} outside scale 1..={scale}")]
    RatingOutOfRange { rating: i32, scale: i32 },
    #[error("rating median {median} outside scale 1..={scale}")]
    MedianOutOfScale { median: i32, scale: i32 },
    #[error("at least two groups are required, got {0}")]
    TooFewGroups(usize),
    #[error("no user has at least {SEQUENCE_LEN} interactions")]
    NoEligibleUsers,
    #[error("need at least 10 sequences for an 8:1:1 split, got {0}")]
    TooFewSequences(usize),
    #[error("invalid config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub group: String,
    pub attribute_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemRecord {
    pub item_id: String,
    pub title_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub rating: i32,
    pub timestamp: i64,
}

/// A validated collection of users, items, and timestamped interactions.
#[derive(Debug, Clone)]
pub struct InteractionDataset {
    pub users: Vec<UserRecord>,
    pub items: Vec<ItemRecord>,
    pub interactions: Vec<Interaction>,
    pub group_set: Vec<String>,
    pub rating_median: i32,
    pub rating_scale: i32,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
    /// Per-user interaction indices, sorted by (timestamp, item_id).
    per_user: Vec<Vec<usize>>,
}

impl InteractionDataset {
    pub fn new(
        users: Vec<UserRecord>,
        items: Vec<ItemRecord>,
        interactions: Vec<Interaction>,
        group_set: Vec<String>,
        rating_median: i32,
        rating_scale: i32,
    ) -> Result<Self, DataError> {
        if group_set.len() < 2 {
            return Err(DataError::TooFewGroups(group_set.len()));
        }
        if rating_median < 1 || rating_median > rating_scale {
            return Err(DataError::MedianOutOfScale {
                median: rating_median,
                scale: rating_scale,
            });
        }
        let mut user_index = HashMap::new();
        for (i, u) in users.iter().enumerate() {
            if !group_set.contains(&u.group) {
                return Err(DataError::UnknownGroup {
                    label: u.group.clone(),
                    groups: group_set.clone(),
                });
            }
            if user_index.insert(u.user_id.clone(), i).is_some() {
                return Err(DataError::DuplicateUser(u.user_id.clone()));
            }
        }
        let mut item_index = HashMap::new();
        for (i, it) in items.iter().enumerate() {
            if it.title_tokens.is_empty() {
                return Err(DataError::EmptyTitle(it.item_id.clone()));
            }
            if item_index.insert(it.item_id.clone(), i).is_some() {
                return Err(DataError::DuplicateItem(it.item_id.clone()));
            }
        }
        // De-duplicate on (user, item, timestamp), keeping first occurrence.
        let mut seen = HashSet::new();
        let mut kept = Vec::with_capacity(interactions.len());
        for ix in interactions {
            if !user_index.contains_key(&ix.user_id) {
                return Err(DataError::DanglingUser(ix.user_id));
            }
            if !item_index.contains_key(&ix.item_id) {
                return Err(DataError::DanglingItem(ix.item_id));
            }
            if ix.rating < 1 || ix.rating > rating_scale {
                return Err(DataError::RatingOutOfRange {
                    rating: ix.rating,
                    scale: rating_scale,
                });
            }
            if seen.insert((ix.user_id.clone(), ix.item_id.clone(), ix.timestamp)) {
                kept.push(ix);
            }
        }
        let mut per_user = vec![Vec::new(); users.len()];
        for (i, ix) in kept.iter().enumerate() {
            per_user[user_index[&ix.user_id]].push(i);
        }
        for list in &mut per_user {
            list.sort_by(|&a, &b| {
                let (ia, ib) = (&kept[a], &kept[b]);
                (ia.timestamp, &ia.item_id).cmp(&(ib.timestamp, &ib.item_id))
            });
        }
        Ok(Self {
            users,
            items,
            interactions: kept,
            group_set,
            rating_median,
            rating_scale,
            user_index,
            item_index,
            per_user,
        })
    }

    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.user_index.get(user_id).map(|&i| &self.users[i])
    }

    pub fn item(&self, item_id: &str) -> Option<&ItemRecord> {
        self.item_index.get(item_id).map(|&i| &self.items[i])
    }

    pub fn group_index(&self, group: &str) -> Option<usize> {
        self.group_set.iter().position(|g| g == group)
    }

    /// Index of the group the user belongs to.
    pub fn user_group_index(&self, user_id: &str) -> Option<usize> {
        self.user(user_id).and_then(|u| self.group_index(&u.group))
    }

    /// A user's interactions sorted by (timestamp, item_id).
    pub fn user_interactions(&self, user_id: &str) -> &[usize] {
        match self.user_index.get(user_id) {
            Some(&i) => &self.per_user[i],
            None => &[],
        }
    }

    pub fn interaction(&self, idx: usize) -> &Interaction {
        &self.interactions[idx]
    }

    /// Distinct items a user has interacted with.
    pub fn user_history_items(&self, user_id: &str) -> HashSet<&str> {
        self.user_interactions(user_id)
            .iter()
            .map(|&i| self.interactions[i].item_id.as_str())
            .collect()
    }

    /// Total interaction count per item id.
    pub fn item_interaction_counts(&self) -> HashMap<&str, usize> {
        let mut counts = HashMap::new();
        for ix in &self.interactions {
            *counts.entry(ix.item_id.as_str()).or_insert(0) += 1;
        }
        counts
    }

    /// Dataset with interactions restricted to the given (user, item) pairs.
    ///
    /// Used to compute stereotype artifacts from training interactions only.
    pub fn restricted_to(&self, pairs: &HashSet<(String, String)>) -> Result<Self, DataError> {
        let kept: Vec<Interaction> = self
            .interactions
            .iter()
            .filter(|ix| pairs.contains(&(ix.user_id.clone(), ix.item_id.clone())))
            .cloned()
            .collect();
        Self::new(
            self.users.clone(),
            self.items.clone(),
            kept,
            self.group_set.clone(),
            self.rating_median,
            self.rating_scale,
        )
    }
}

/// One rated interaction inside a sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RatedItem {
    pub item_id: String,
    pub rating: i32,
    pub timestamp: i64,
}

/// Ten chronological history interactions plus the strictly-latest target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub user_id: String,
    pub history: Vec<RatedItem>,
    pub target: RatedItem,
}

#[derive(Debug, Clone)]
pub struct SampledSequences {
    pub sequences: Vec<Sequence>,
    /// Users skipped for having fewer than 11 interactions.
    pub skipped_users: usize,
}

#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Vec<Sequence>,
    pub validation: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

/// `true` iff the rating meets the dataset's median ("like").
pub fn label_from_rating(rating: i32, rating_median: i32) -> bool {
    rating >= rating_median
}

/// Cut 11-interaction windows out of user histories.
///
/// Every contiguous chronological window of 11 interactions is a candidate;
/// candidates are shuffled under `seed` and at most `max_sequences` are kept.
/// Users with fewer than 11 interactions are skipped and counted.
pub fn build_sequences(
    dataset: &InteractionDataset,
    max_sequences: usize,
    seed: u64,
) -> Result<SampledSequences, DataError> {
    let mut windows: Vec<(usize, usize)> = Vec::new();
    let mut skipped_users = 0usize;
    for (uidx, list) in dataset.per_user.iter().enumerate() {
        if list.len() < SEQUENCE_LEN {
            if !list.is_empty() {
                skipped_users += 1;
            }
            continue;
        }
        for start in 0..=(list.len() - SEQUENCE_LEN) {
            windows.push((uidx, start));
        }
    }
    if windows.is_empty() {
        return Err(DataError::NoEligibleUsers);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    windows.shuffle(&mut rng);
    windows.truncate(max_sequences);

    let sequences = windows
        .into_iter()
        .map(|(uidx, start)| {
            let list = &dataset.per_user[uidx];
            let rated = |i: usize| {
                let ix = &dataset.interactions[list[start + i]];
                RatedItem {
                    item_id: ix.item_id.clone(),
                    rating: ix.rating,
                    timestamp: ix.timestamp,
                }
            };
            Sequence {
                user_id: dataset.users[uidx].user_id.clone(),
                history: (0..HISTORY_LEN).map(rated).collect(),
                target: rated(HISTORY_LEN),
            }
        })
        .collect();
    Ok(SampledSequences {
        sequences,
        skipped_users,
    })
}

/// Shuffle sequences under `seed` and partition 8:1:1.
///
/// Validation and test each get `n / 10` sequences (at least one), the rest
/// train.
pub fn leave_one_out_split(sequences: &[Sequence], seed: u64) -> Result<DataSplit, DataError> {
    let n = sequences.len();
    if n < 10 {
        return Err(DataError::TooFewSequences(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let n_val = n / 10;
    let n_test = n / 10;
    let take = |idx: &[usize]| idx.iter().map(|&i| sequences[i].clone()).collect();
    Ok(DataSplit {
        validation: take(&order[..n_val]),
        test: take(&order[n_val..n_val + n_test]),
        train: take(&order[n_val + n_test..]),
    })
}

/// Configuration for the synthetic interaction generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    /// One positive entry per group, summing to 1.
    pub group_ratio: Vec<f64>,
    pub group_labels: Vec<String>,
    /// Probability that a non-neutral draw lands in the user's own group pool.
    pub affinity: f64,
    /// Maximum rating; scale is `1..=rating_scale`.
    pub rating_scale: i32,
    pub interactions_per_user: usize,
    /// Fraction of items planted in the group-neutral pool.
    pub neutral_fraction: f64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.group_ratio.len() < 2 {
            return Err(DataError::BadConfig("need at least two groups".into()));
        }
        if self.group_labels.len() != self.group_ratio.len() {
            return Err(DataError::BadConfig(
                "group_labels and group_ratio lengths differ".into(),
            ));
        }
        if self.group_ratio.iter().any(|&r| r <= 0.0) {
            return Err(DataError::BadConfig("group_ratio entries must be positive".into()));
        }
        if (self.group_ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(DataError::BadConfig("group_ratio must sum to 1".into()));
        }
        if !(0.0..=1.0).contains(&self.affinity) {
            return Err(DataError::BadConfig("affinity must lie in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.neutral_fraction) {
            return Err(DataError::BadConfig("neutral_fraction must lie in [0,1)".into()));
        }
        if self.rating_scale < 2 {
            return Err(DataError::BadConfig("rating_scale must be at least 2".into()));
        }
        if self.n_users == 0 || self.n_items == 0 || self.interactions_per_user == 0 {
            return Err(DataError::BadConfig("counts must be positive".into()));
        }
        Ok(())
    }

    pub fn rating_median(&self) -> i32 {
        (self.rating_scale + 1) / 2
    }
}

/// Which pool an item was planted in (needed only inside the generator; the
/// pool is recoverable from interaction statistics afterwards).
#[derive(Clone, Copy, PartialEq, Eq)]
enum Pool {
    Group(usize),
    Neutral,
}

/// Total fall of the neutral-pool draw probability across a user's stream,
/// centred on `neutral_fraction`; models preferences narrowing from broad
/// exploration toward group-typed items over time. The freed probability
/// mass goes to the group pools, so the last interaction of any
/// chronological window is more group-typed than the window's history
/// average regardless of the user's group.
const PREFERENCE_TREND: f64 = 0.5;

/// Roughly standard-normal noise from three uniforms (Irwin-Hall, std 0.5).
fn noise<R: Rng>(rng: &mut R) -> f64 {
    rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>() - 1.5
}

/// Generate a planted-bias interaction dataset.
///
/// Users are assigned to groups in exact proportion to `group_ratio`. Items
/// are planted in one group pool or a neutral pool. Interaction draws pick
/// the neutral pool with probability `neutral_fraction`, otherwise the user's
/// own pool with probability `affinity` and another group's pool otherwise.
/// Ratings follow item quality closely for own-group interactions and are
/// mostly noise for cross-group ones.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<InteractionDataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let n_groups = config.group_ratio.len();

    // Exact proportional group counts via largest remainder, then shuffle.
    let mut counts: Vec<usize> = config
        .group_ratio
        .iter()
        .map(|&r| (r * config.n_users as f64).floor() as usize)
        .collect();
    let mut assigned: usize = counts.iter().sum();
    let mut rema: Vec<(usize, f64)> = config
        .group_ratio
        .iter()
        .enumerate()
        .map(|(g, &r)| (g, r * config.n_users as f64 - counts[g] as f64))
        .collect();
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut k = 0;
    while assigned < config.n_users {
        counts[rema[k % n_groups].0] += 1;
        assigned += 1;
        k += 1;
    }
    let mut user_groups: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(g, &c)| std::iter::repeat(g).take(c))
        .collect();
    user_groups.shuffle(&mut rng);

    // Item pools and latent qualities.
    let mut pools: Vec<Pool> = Vec::with_capacity(config.n_items);
    let mut quality: Vec<f64> = Vec::with_capacity(config.n_items);
    for _ in 0..config.n_items {
        // Group pools are equal-sized regardless of group ratio: each item in a
        // larger group's pool then absorbs proportionally more interactions, so
        // per-group interaction fractions stay comparable across groups.
        let pool = if rng.gen::<f64>() < config.neutral_fraction {
            Pool::Neutral
        } else {
            Pool::Group(rng.gen_range(0..n_groups))
        };
        pools.push(pool);
        quality.push(rng.gen::<f64>());
    }
    let mut by_pool: Vec<Vec<usize>> = vec![Vec::new(); n_groups + 1];
    for (i, pool) in pools.iter().enumerate() {
        match pool {
            Pool::Group(g) => by_pool[*g].push(i),
            Pool::Neutral => by_pool[n_groups].push(i),
        }
    }
    // Within-pool popularity follows quality, so the most-interacted (and
    // therefore most group-typed) items are also the best-liked — the
    // coupling that lets a score-based recommender over-serve group-typed
    // items while still looking accurate.
    let pool_cdf: Vec<Vec<f64>> = by_pool
        .iter()
        .map(|pool| {
            let mut acc = 0.0;
            pool.iter()
                .map(|&i| {
                    acc += (1.2 * quality[i]).exp();
                    acc
                })
                .collect()
        })
        .collect();
    for g in 0..n_groups {
        if by_pool[g].is_empty() {
            return Err(DataError::BadConfig(format!(
                "group pool {:?} received zero items; increase n_items",
                config.group_labels[g]
            )));
        }
    }
    let have_neutral = !by_pool[n_groups].is_empty();

    // Records. Item title = a single token unique to the item; token ids are
    // laid out after the reserved marker/attribute block.
    let attr_base = 4u32; // 0..=3 are PAD / LIKE / DISLIKE / TARGET markers
    let item_base = attr_base + n_groups as u32;
    let users: Vec<UserRecord> = user_groups
        .iter()
        .enumerate()
        .map(|(i, &g)| UserRecord {
            user_id: format!("u{i:05}"),
            group: config.group_labels[g].clone(),
            attribute_tokens: vec![attr_base + g as u32],
        })
        .collect();
    let items: Vec<ItemRecord> = (0..config.n_items)
        .map(|i| ItemRecord {
            item_id: format!("i{i:05}"),
            title_tokens: vec![item_base + i as u32],
        })
        .collect();

    let median = config.rating_median() as f64;
    let scale = config.rating_scale as f64;
    let span = scale / 5.0;
    let mut interactions = Vec::with_capacity(config.n_users * config.interactions_per_user);
    for (uidx, &ug) in user_groups.iter().enumerate() {
        let mut picked: HashSet<usize> = HashSet::new();
        for t in 0..config.interactions_per_user {
            let drift = if config.interactions_per_user > 1 {
                PREFERENCE_TREND
                    * (t as f64 / (config.interactions_per_user - 1) as f64 - 0.5)
            } else {
                0.0
            };
            let p_neutral = (config.neutral_fraction - drift).clamp(0.0, 1.0);
            let mut item = None;
            for _attempt in 0..64 {
                let pool = if have_neutral && rng.gen::<f64>() < p_neutral {
                    n_groups
                } else if n_groups == 1 || rng.gen::<f64>() < config.affinity {
                    ug
                } else {
                    // Another group, weighted by the remaining ratios.
                    let total: f64 = (0..n_groups)
                        .filter(|&g| g != ug)
                        .map(|g| config.group_ratio[g])
                        .sum();
                    let mut x = rng.gen::<f64>() * total;
                    let mut chosen = if ug == 0 { 1 } else { 0 };
                    for g in (0..n_groups).filter(|&g| g != ug) {
                        if x < config.group_ratio[g] {
                            chosen = g;
                            break;
                        }
                        x -= config.group_ratio[g];
                    }
                    chosen
                };
                let cdf = &pool_cdf[pool];
                let x = rng.gen::<f64>() * cdf[cdf.len() - 1];
                let idx = cdf.partition_point(|&c| c <= x).min(cdf.len() - 1);
                let cand = by_pool[pool][idx];
                if !picked.contains(&cand) {
                    item = Some(cand);
                    break;
                }
            }
            let Some(item) = item else { continue };
            picked.insert(item);

            let q = quality[item];
            let x = match pools[item] {
                Pool::Group(g) if g == ug => {
                    median + span * ((q - 0.5) * 4.0 + 0.5 + 0.6 * noise(&mut rng))
                }
                Pool::Group(_) => median + span * (-1.0 + 2.4 * noise(&mut rng)),
                Pool::Neutral => median + span * ((q - 0.5) * 2.0 + 1.6 * noise(&mut rng)),
            };
            let rating = (x.round() as i32).clamp(1, config.rating_scale);
            interactions.push(Interaction {
                user_id: format!("u{uidx:05}"),
                item_id: format!("i{item:05}"),
                rating,
                timestamp: t as i64,
            });
        }
    }

    InteractionDataset::new(
        users,
        items,
        interactions,
        config.group_labels.clone(),
        config.rating_median(),
        config.rating_scale,
    )
}

fn parse_tokens(field: &str, path: &str, line: u64) -> Result<Vec<TokenId>, DataError> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse::<TokenId>().map_err(|_| DataError::Malformed {
                path: path.to_string(),
                line,
                msg: format!("bad token id {t:?}"),
            })
        })
        .collect()
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>, DataError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: std::io::Error::other(e),
        })
}

fn record_field<'a>(
    rec: &'a csv::StringRecord,
    idx: usize,
    path: &str,
    line: u64,
) -> Result<&'a str, DataError> {
    rec.get(idx).ok_or_else(|| DataError::Malformed {
        path: path.to_string(),
        line,
        msg: format!("missing column {idx}"),
    })
}

/// Load a dataset from the three CSV files.
///
/// Schemas: `user_id,group,attribute_tokens` / `item_id,title_tokens` /
/// `user_id,item_id,rating,timestamp`, with `*_tokens` columns holding
/// space-separated integers.
pub fn load_dataset(
    users_path: &Path,
    items_path: &Path,
    interactions_path: &Path,
    group_set: Vec<String>,
    rating_median: i32,
    rating_scale: i32,
) -> Result<InteractionDataset, DataError> {
    let upath = users_path.display().to_string();
    let mut users = Vec::new();
    for (i, rec) in open_csv(users_path)?.records().enumerate() {
        let line = i as u64 + 2; // 1-based, after header
        let rec = rec.map_err(|e| DataError::Malformed {
            path: upath.clone(),
            line,
            msg: e.to_string(),
        })?;
        let group = record_field(&rec, 1, &upath, line)?.to_string();
        if !group_set.contains(&group) {
            return Err(DataError::UnknownGroup {
                label: group,
                groups: group_set,
            });
        }
        users.push(UserRecord {
            user_id: record_field(&rec, 0, &upath, line)?.to_string(),
            group,
            attribute_tokens: parse_tokens(record_field(&rec, 2, &upath, line)?, &upath, line)?,
        });
    }

    let ipath = items_path.display().to_string();
    let mut items = Vec::new();
    for (i, rec) in open_csv(items_path)?.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| DataError::Malformed {
            path: ipath.clone(),
            line,
            msg: e.to_string(),
        })?;
        items.push(ItemRecord {
            item_id: record_field(&rec, 0, &ipath, line)?.to_string(),
            title_tokens: parse_tokens(record_field(&rec, 1, &ipath, line)?, &ipath, line)?,
        });
    }

    let xpath = interactions_path.display().to_string();
    let mut interactions = Vec::new();
    for (i, rec) in open_csv(interactions_path)?.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.map_err(|e| DataError::Malformed {
            path: xpath.clone(),
            line,
            msg: e.to_string(),
        })?;
        let rating = record_field(&rec, 2, &xpath, line)?
            .parse::<i32>()
            .map_err(|e| DataError::Malformed {
                path: xpath.clone(),
                line,
                msg: format!("bad rating: {e}"),
            })?;
        let timestamp = record_field(&rec, 3, &xpath, line)?
            .parse::<i64>()
            .map_err(|e| DataError::Malformed {
                path: xpath.clone(),
                line,
                msg: format!("bad timestamp: {e}"),
            })?;
        interactions.push(Interaction {
            user_id: record_field(&rec, 0, &xpath, line)?.to_string(),
            item_id: record_field(&rec, 1, &xpath, line)?.to_string(),
            rating,
            timestamp,
        });
    }

    InteractionDataset::new(users, items, interactions, group_set, rating_median, rating_scale)
}

fn write_file(path: &Path, contents: &str) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    f.write_all(contents.as_bytes()).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn join_tokens(tokens: &[TokenId]) -> String {
    tokens
        .iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Write `users.csv`, `items.csv`, `interactions.csv`, and `dataset.conf`
/// into `dir`. Rows are sorted so output bytes are a pure function of the
/// dataset.
pub fn write_dataset_csvs(dataset: &InteractionDataset, dir: &Path) -> Result<(), DataError> {
    let mut users = String::from("user_id,group,attribute_tokens\n");
    let mut sorted_users: Vec<&UserRecord> = dataset.users.iter().collect();
    sorted_users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    for u in sorted_users {
        users.push_str(&format!(
            "{},{},{}\n",
            u.user_id,
            u.group,
            join_tokens(&u.attribute_tokens)
        ));
    }
    write_file(&dir.join("users.csv"), &users)?;

    let mut items = String::from("item_id,title_tokens\n");
    let mut sorted_items: Vec<&ItemRecord> = dataset.items.iter().collect();
    sorted_items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    for it in sorted_items {
        items.push_str(&format!("{},{}\n", it.item_id, join_tokens(&it.title_tokens)));
    }
    write_file(&dir.join("items.csv"), &items)?;

    let mut inter = String::from("user_id,item_id,rating,timestamp\n");
    let mut sorted_ix: Vec<&Interaction> = dataset.interactions.iter().collect();
    sorted_ix.sort_by(|a, b| {
        (&a.user_id, a.timestamp, &a.item_id).cmp(&(&b.user_id, b.timestamp, &b.item_id))
    });
    for ix in sorted_ix {
        inter.push_str(&format!(
            "{},{},{},{}\n",
            ix.user_id, ix.item_id, ix.rating, ix.timestamp
        ));
    }
    write_file(&dir.join("interactions.csv"), &inter)?;

    let mut conf = String::new();
    conf.push_str(&format!("group_set={}\n", dataset.group_set.join(",")));
    conf.push_str(&format!("rating_median={}\n", dataset.rating_median));
    conf.push_str(&format!("rating_scale={}\n", dataset.rating_scale));
    write_file(&dir.join("dataset.conf"), &conf)
}

/// Load a dataset from a directory produced by [`write_dataset_csvs`] (or a
/// compatible export plus a `dataset.conf`).
pub fn load_dataset_dir(dir: &Path) -> Result<InteractionDataset, DataError> {
    let conf = crate::config::read_kv(&dir.join("dataset.conf"))
        .map_err(|e| DataError::BadConfig(e.to_string()))?;
    let group_set: Vec<String> = conf
        .get("group_set")
        .ok_or_else(|| DataError::BadConfig("dataset.conf: missing key group_set".into()))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let median: i32 = conf
        .get("rating_median")
        .ok_or_else(|| DataError::BadConfig("dataset.conf: missing key rating_median".into()))?
        .parse()
        .map_err(|_| DataError::BadConfig("dataset.conf: bad rating_median".into()))?;
    let scale: i32 = conf
        .get("rating_scale")
        .ok_or_else(|| DataError::BadConfig("dataset.conf: missing key rating_scale".into()))?
        .parse()
        .map_err(|_| DataError::BadConfig("dataset.conf: bad rating_scale".into()))?;
    load_dataset(
        &dir.join("users.csv"),
        &dir.join("items.csv"),
        &dir.join("interactions.csv"),
        group_set,
        median,
        scale,
    )
}

/// Parse a [`SynthConfig`] from flat `key=value` text.
pub fn synth_config_from_kv(kv: &BTreeMap<String, String>) -> Result<SynthConfig, DataError> {
    let get = |key: &str| -> Result<&String, DataError> {
        kv.get(key)
            .ok_or_else(|| DataError::BadConfig(format!("missing key {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize, DataError> {
        get(key)?
            .parse()
            .map_err(|_| DataError::BadConfig(format!("bad value for {key}")))
    };
    let parse_f64 = |key: &str| -> Result<f64, DataError> {
        get(key)?
            .parse()
            .map_err(|_| DataError::BadConfig(format!("bad value for {key}")))
    };
    let group_ratio: Vec<f64> = get("group_ratio")?
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| DataError::BadConfig("bad value for group_ratio".into()))
        })
        .collect::<Result<_, _>>()?;
    let group_labels: Vec<String> = match kv.get("group_labels") {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => (1..=group_ratio.len()).map(|i| format!("g{i}")).collect(),
    };
    let config = SynthConfig {
        n_users: parse_usize("n_users")?,
        n_items: parse_usize("n_items")?,
        group_ratio,
        group_labels,
        affinity: parse_f64("affinity")?,
        rating_scale: parse_usize("rating_scale")? as i32,
        interactions_per_user: parse_usize("interactions_per_user")?,
        neutral_fraction: match kv.get("neutral_fraction") {
            Some(v) => v
                .parse()
                .map_err(|_| DataError::BadConfig("bad value for neutral_fraction".into()))?,
            None => 0.2,
        },
    };
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            n_users: 60,
            n_items: 40,
            group_ratio: vec![0.5, 0.5],
            group_labels: vec!["a".into(), "b".into()],
            affinity: 0.8,
            rating_scale: 5,
            interactions_per_user: 15,
            neutral_fraction: 0.2,
        }
    }

    fn user(id: &str, group: &str) -> UserRecord {
        UserRecord {
            user_id: id.into(),
            group: group.into(),
            attribute_tokens: vec![4],
        }
    }

    fn item(id: &str, token: TokenId) -> ItemRecord {
        ItemRecord {
            item_id: id.into(),
            title_tokens: vec![token],
        }
    }

    fn ix(u: &str, v: &str, rating: i32, t: i64) -> Interaction {
        Interaction {
            user_id: u.into(),
            item_id: v.into(),
            rating,
            timestamp: t,
        }
    }

    fn groups() -> Vec<String> {
        vec!["male".into(), "female".into()]
    }

    #[test]
    fn minimal_dataset_builds() {
        let ds = InteractionDataset::new(
            vec![user("u1", "male")],
            vec![item("i1", 10), item("i2", 11)],
            vec![ix("u1", "i1", 4, 0), ix("u1", "i2", 2, 1)],
            groups(),
            3,
            5,
        )
        .unwrap();
        assert_eq!(ds.users.len(), 1);
        assert_eq!(ds.items.len(), 2);
        assert_eq!(ds.interactions.len(), 2);
    }

    #[test]
    fn unknown_group_is_named_in_error() {
        let err = InteractionDataset::new(
            vec![user("u1", "robot")],
            vec![item("i1", 10)],
            vec![],
            groups(),
            3,
            5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("robot"), "{err}");
    }

    #[test]
    fn duplicate_interactions_are_dropped() {
        let ds = InteractionDataset::new(
            vec![user("u1", "male")],
            vec![item("i1", 10)],
            vec![ix("u1", "i1", 4, 0), ix("u1", "i1", 4, 0), ix("u1", "i1", 4, 1)],
            groups(),
            3,
            5,
        )
        .unwrap();
        assert_eq!(ds.interactions.len(), 2);
    }

    #[test]
    fn label_from_rating_cases() {
        assert!(label_from_rating(3, 3));
        assert!(!label_from_rating(2, 3));
        assert!(label_from_rating(5, 5));
    }

    #[test]
    fn exactly_eleven_interactions_give_one_sequence() {
        let mut inter = Vec::new();
        let items: Vec<ItemRecord> = (0..11).map(|i| item(&format!("i{i}"), 10 + i)).collect();
        for i in 0..11 {
            inter.push(ix("u1", &format!("i{i}"), 4, i as i64));
        }
        let ds = InteractionDataset::new(vec![user("u1", "male")], items, inter, groups(), 3, 5)
            .unwrap();
        let sampled = build_sequences(&ds, 100, 0).unwrap();
        assert_eq!(sampled.sequences.len(), 1);
        assert_eq!(sampled.skipped_users, 0);
        let seq = &sampled.sequences[0];
        assert_eq!(seq.history.len(), HISTORY_LEN);
        assert_eq!(seq.target.item_id, "i10");
    }

    #[test]
    fn ten_interactions_skip_the_user() {
        let items: Vec<ItemRecord> = (0..10).map(|i| item(&format!("i{i}"), 10 + i)).collect();
        let inter: Vec<Interaction> = (0..10)
            .map(|i| ix("u1", &format!("i{i}"), 4, i as i64))
            .collect();
        let mut items2 = items.clone();
        items2.push(item("extra", 99));
        let mut inter2 = inter.clone();
        for i in 0..11 {
            inter2.push(Interaction {
                user_id: "u2".into(),
                item_id: if i < 10 { format!("i{i}") } else { "extra".into() },
                rating: 3,
                timestamp: i as i64,
            });
        }
        let ds = InteractionDataset::new(
            vec![user("u1", "male"), user("u2", "female")],
            items2,
            inter2,
            groups(),
            3,
            5,
        )
        .unwrap();
        let sampled = build_sequences(&ds, 100, 0).unwrap();
        assert_eq!(sampled.skipped_users, 1);
        assert!(sampled.sequences.iter().all(|s| s.user_id == "u2"));
    }

    #[test]
    fn sequences_are_deterministic_under_seed() {
        let ds = generate_synthetic(&tiny_config(), 3).unwrap();
        let a = build_sequences(&ds, 50, 7).unwrap();
        let b = build_sequences(&ds, 50, 7).unwrap();
        assert_eq!(a.sequences, b.sequences);
    }

    #[test]
    fn split_sizes() {
        let ds = generate_synthetic(&tiny_config(), 1).unwrap();
        let seqs = build_sequences(&ds, 10, 0).unwrap().sequences;
        assert_eq!(seqs.len(), 10);
        let split = leave_one_out_split(&seqs, 0).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (8, 1, 1)
        );

        // Rounding rule for 11 sequences: val and test take n/10 = 1 each.
        let seqs = build_sequences(&ds, 11, 0).unwrap().sequences;
        let split = leave_one_out_split(&seqs, 0).unwrap();
        assert_eq!(
            (split.train.len(), split.validation.len(), split.test.len()),
            (9, 1, 1)
        );
    }

    #[test]
    fn split_rejects_fewer_than_ten() {
        let ds = generate_synthetic(&tiny_config(), 1).unwrap();
        let seqs = build_sequences(&ds, 9, 0).unwrap().sequences;
        assert!(leave_one_out_split(&seqs, 0).is_err());
    }

    #[test]
    fn synthetic_group_counts_match_ratio() {
        let mut config = tiny_config();
        config.n_users = 1000;
        config.n_items = 200;
        config.group_ratio = vec![0.7, 0.3];
        let ds = generate_synthetic(&config, 11).unwrap();
        let n_a = ds.users.iter().filter(|u| u.group == "a").count();
        assert_eq!(n_a, 700);
    }

    #[test]
    fn sequences_strictly_increasing() {
        let ds = generate_synthetic(&tiny_config(), 5).unwrap();
        for seq in build_sequences(&ds, 200, 1).unwrap().sequences {
            let mut all = seq.history.clone();
            all.push(seq.target.clone());
            for pair in all.windows(2) {
                assert!(
                    (pair[0].timestamp, &pair[0].item_id) < (pair[1].timestamp, &pair[1].item_id)
                );
            }
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&tiny_config(), 9).unwrap();
        write_dataset_csvs(&ds, dir.path()).unwrap();
        let loaded = load_dataset_dir(dir.path()).unwrap();
        assert_eq!(loaded.users.len(), ds.users.len());
        assert_eq!(loaded.items.len(), ds.items.len());
        assert_eq!(loaded.interactions.len(), ds.interactions.len());
        assert_eq!(loaded.group_set, ds.group_set);
    }

    #[test]
    fn loader_reports_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("users.csv"),
            "user_id,group,attribute_tokens\nu1,male,4\nu2,female,bad-token\n",
        )
        .unwrap();
        std::fs::write(dir.path().join("items.csv"), "item_id,title_tokens\ni1,10\n").unwrap();
        std::fs::write(
            dir.path().join("interactions.csv"),
            "user_id,item_id,rating,timestamp\n",
        )
        .unwrap();
        let err = load_dataset(
            &dir.path().join("users.csv"),
            &dir.path().join("items.csv"),
            &dir.path().join("interactions.csv"),
            groups(),
            3,
            5,
        )
        .unwrap_err();
        assert!(err.to_string().contains(":3:"), "{err}");
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn split_partitions_are_disjoint_and_exhaustive(n in 10usize..120, seed in 0u64..50) {
                let config = tiny_config();
                let ds = generate_synthetic(&config, 2).unwrap();
                let seqs = build_sequences(&ds, n, 0).unwrap().sequences;
                prop_assume!(seqs.len() == n);
                let split = leave_one_out_split(&seqs, seed).unwrap();
                let total = split.train.len() + split.validation.len() + split.test.len();
                prop_assert_eq!(total, n);
                let mut seen = std::collections::HashSet::new();
                for s in split.train.iter().chain(&split.validation).chain(&split.test) {
                    // (user, target timestamp, first history timestamp) identifies a window
                    let key = (s.user_id.clone(), s.target.timestamp, s.history[0].timestamp);
                    prop_assert!(seen.insert(key));
                }
            }
        }
    }
}
