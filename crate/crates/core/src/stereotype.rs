//! Item-side stereotype degrees, Z-score thresholds, indicator flags, and
//! user history proportions.
//!
//! An item's per-group bias is the fraction of that group's users who
//! interacted with the item minus the sum of the other groups' fractions.
//! The degree is the maximum bias; items whose degree clears a Z-score
//! threshold are flagged into their dominant group. A user's history
//! proportion `h[G]` is the fraction of history items flagged into `G`.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::InteractionDataset;
use crate::math;

#[derive(Debug, Error)]
pub enum StereotypeError {
    #[error("group {0:?} is not in the dataset's group set")]
    UnknownGroup(String),
    #[error("group {0:?} has no users; fractions are undefined")]
    EmptyGroup(String),
    #[error("unknown item {0:?}")]
    UnknownItem(String),
    #[error("threshold population is empty")]
    EmptyPopulation,
}

/// Per-item stereotype measurement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ItemStereotype {
    pub item_id: String,
    /// Per-group bias: own-group interaction fraction minus the sum of the
    /// other groups' fractions. In [-1, 1].
    pub bias: BTreeMap<String, f64>,
    /// Maximum bias over groups.
    pub degree: f64,
    /// Group attaining the maximum, absent on ties or when the maximum is
    /// non-positive.
    pub dominant_group: Option<String>,
    /// Indicator per group after thresholding; at most one entry is 1.
    pub flagged: BTreeMap<String, u8>,
}

/// Per-user group proportions over an interaction history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserStereotypeProfile {
    pub user_id: String,
    pub h: BTreeMap<String, f64>,
    pub history_len: usize,
    /// Set when the history was empty and the proportions default to zero.
    pub degenerate: bool,
}

impl UserStereotypeProfile {
    /// Proportions in group-set order.
    pub fn h_vec(&self, group_set: &[String]) -> Vec<f64> {
        group_set.iter().map(|g| *self.h.get(g).unwrap_or(&0.0)).collect()
    }
}

/// Z-score threshold over the item degree population.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub z: f64,
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    pub population_size: usize,
    pub min_interactions: usize,
}

/// Fraction of group members whose history contains the item.
pub fn group_interaction_fraction(
    dataset: &InteractionDataset,
    item_id: &str,
    group: &str,
) -> Result<f64, StereotypeError> {
    let gidx = dataset
        .group_index(group)
        .ok_or_else(|| StereotypeError::UnknownGroup(group.to_string()))?;
    dataset
        .item(item_id)
        .ok_or_else(|| StereotypeError::UnknownItem(item_id.to_string()))?;
    let mut members = 0usize;
    let mut interacted = 0usize;
    for user in &dataset.users {
        if dataset.group_index(&user.group) != Some(gidx) {
            continue;
        }
        members += 1;
        if dataset
            .user_interactions(&user.user_id)
            .iter()
            .any(|&i| dataset.interaction(i).item_id == item_id)
        {
            interacted += 1;
        }
    }
    if members == 0 {
        return Err(StereotypeError::EmptyGroup(group.to_string()));
    }
    Ok(interacted as f64 / members as f64)
}

/// Shared tallies for computing many items' biases at once.
struct FractionTable {
    /// fractions[item_idx][group_idx]
    fractions: Vec<Vec<f64>>,
}

fn fraction_table(dataset: &InteractionDataset) -> Result<FractionTable, StereotypeError> {
    let n_groups = dataset.group_set.len();
    let mut group_sizes = vec![0usize; n_groups];
    for user in &dataset.users {
        group_sizes[dataset.group_index(&user.group).expect("validated group")] += 1;
    }
    for (g, &size) in group_sizes.iter().enumerate() {
        if size == 0 {
            return Err(StereotypeError::EmptyGroup(dataset.group_set[g].clone()));
        }
    }
    let item_pos: HashMap<&str, usize> = dataset
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| (it.item_id.as_str(), i))
        .collect();
    let mut counts = vec![vec![0usize; n_groups]; dataset.items.len()];
    for user in &dataset.users {
        let g = dataset.group_index(&user.group).expect("validated group");
        let history: HashSet<&str> = dataset.user_history_items(&user.user_id);
        for item in history {
            counts[item_pos[item]][g] += 1;
        }
    }
    let fractions = counts
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(&group_sizes)
                .map(|(&c, &n)| c as f64 / n as f64)
                .collect()
        })
        .collect();
    Ok(FractionTable { fractions })
}

fn stereotype_from_fractions(
    item_id: &str,
    fractions: &[f64],
    group_set: &[String],
) -> ItemStereotype {
    let total: f64 = fractions.iter().sum();
    let bias_vec: Vec<f64> = fractions.iter().map(|&f| f - (total - f)).collect();
    let degree = bias_vec.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n_max = bias_vec.iter().filter(|&&b| b == degree).count();
    let dominant_group = if degree > 0.0 && n_max == 1 {
        bias_vec
            .iter()
            .position(|&b| b == degree)
            .map(|g| group_set[g].clone())
    } else {
        None
    };
    ItemStereotype {
        item_id: item_id.to_string(),
        bias: group_set
            .iter()
            .cloned()
            .zip(bias_vec.iter().copied())
            .collect(),
        degree,
        dominant_group,
        flagged: group_set.iter().map(|g| (g.clone(), 0u8)).collect(),
    }
}

/// Bias, degree, and dominant group for one item; flags left unset.
pub fn item_bias_degree(
    dataset: &InteractionDataset,
    item_id: &str,
) -> Result<ItemStereotype, StereotypeError> {
    let fractions: Vec<f64> = dataset
        .group_set
        .iter()
        .map(|g| group_interaction_fraction(dataset, item_id, g))
        .collect::<Result<_, _>>()?;
    Ok(stereotype_from_fractions(item_id, &fractions, &dataset.group_set))
}

/// Population mean/std threshold at `mean + z * std`.
pub fn compute_threshold(
    degrees: &[f64],
    z: f64,
    min_interactions: usize,
) -> Result<ThresholdSpec, StereotypeError> {
    if degrees.is_empty() {
        return Err(StereotypeError::EmptyPopulation);
    }
    let (mean, std) = math::mean_std(degrees);
    Ok(ThresholdSpec {
        z,
        mean,
        std,
        threshold: mean + z * std,
        population_size: degrees.len(),
        min_interactions,
    })
}

/// Set the indicator flags: the dominant group is flagged iff the degree
/// meets the threshold.
pub fn apply_threshold(item: &ItemStereotype, spec: &ThresholdSpec) -> ItemStereotype {
    let mut out = item.clone();
    for v in out.flagged.values_mut() {
        *v = 0;
    }
    if let Some(dom) = &out.dominant_group {
        if out.degree >= spec.threshold {
            out.flagged.insert(dom.clone(), 1);
        }
    }
    out
}

/// Index of flagged items for fast lookups during fairness computations.
#[derive(Debug, Clone, Default)]
pub struct FlagIndex {
    /// item_id -> group index of its flag (items without a flag are absent)
    flagged: HashMap<String, usize>,
    /// item_id -> group index of the dominant group (flagged or not)
    dominant: HashMap<String, usize>,
    pub group_set: Vec<String>,
}

impl FlagIndex {
    pub fn from_items(items: &[ItemStereotype], group_set: &[String]) -> Self {
        let gidx: HashMap<&str, usize> = group_set
            .iter()
            .enumerate()
            .map(|(i, g)| (g.as_str(), i))
            .collect();
        let mut flagged = HashMap::new();
        let mut dominant = HashMap::new();
        for it in items {
            if let Some(dom) = &it.dominant_group {
                dominant.insert(it.item_id.clone(), gidx[dom.as_str()]);
            }
            for (g, &flag) in &it.flagged {
                if flag == 1 {
                    flagged.insert(it.item_id.clone(), gidx[g.as_str()]);
                }
            }
        }
        Self {
            flagged,
            dominant,
            group_set: group_set.to_vec(),
        }
    }

    /// Group index of the item's flag, if any.
    pub fn flag_of(&self, item_id: &str) -> Option<usize> {
        self.flagged.get(item_id).copied()
    }

    pub fn dominant_of(&self, item_id: &str) -> Option<usize> {
        self.dominant.get(item_id).copied()
    }

    /// Indicator vector over groups for one item.
    pub fn flag_vec(&self, item_id: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.group_set.len()];
        if let Some(g) = self.flag_of(item_id) {
            v[g] = 1.0;
        }
        v
    }

    pub fn n_flagged(&self) -> usize {
        self.flagged.len()
    }
}

/// Per-group history proportions for one user history.
pub fn user_history_proportion(
    user_id: &str,
    history: &[String],
    flags: &FlagIndex,
) -> UserStereotypeProfile {
    let n_groups = flags.group_set.len();
    let mut counts = vec![0usize; n_groups];
    for item in history {
        if let Some(g) = flags.flag_of(item) {
            counts[g] += 1;
        }
    }
    let degenerate = history.is_empty();
    let denom = if degenerate { 1.0 } else { history.len() as f64 };
    UserStereotypeProfile {
        user_id: user_id.to_string(),
        h: flags
            .group_set
            .iter()
            .cloned()
            .zip(counts.iter().map(|&c| c as f64 / denom))
            .collect(),
        history_len: history.len(),
        degenerate,
    }
}

/// Bias/degree/dominant-group for every item at once, flags unset.
pub fn item_stereotypes(
    dataset: &InteractionDataset,
) -> Result<Vec<ItemStereotype>, StereotypeError> {
    let table = fraction_table(dataset)?;
    Ok(dataset
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            stereotype_from_fractions(&it.item_id, &table.fractions[i], &dataset.group_set)
        })
        .collect())
}

/// Full item-side audit: degrees for every item, a threshold computed over
/// items with at least `min_interactions` interactions, and flags for all.
#[derive(Debug, Clone)]
pub struct StereotypeAudit {
    pub items: Vec<ItemStereotype>,
    pub threshold: ThresholdSpec,
}

impl StereotypeAudit {
    pub fn flag_index(&self, group_set: &[String]) -> FlagIndex {
        FlagIndex::from_items(&self.items, group_set)
    }
}

pub fn audit_items(
    dataset: &InteractionDataset,
    z: f64,
    min_interactions: usize,
) -> Result<StereotypeAudit, StereotypeError> {
    let table = fraction_table(dataset)?;
    let counts = dataset.item_interaction_counts();
    let mut items: Vec<ItemStereotype> = dataset
        .items
        .iter()
        .enumerate()
        .map(|(i, it)| stereotype_from_fractions(&it.item_id, &table.fractions[i], &dataset.group_set))
        .collect();
    items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let degrees: Vec<f64> = items
        .iter()
        .filter(|it| counts.get(it.item_id.as_str()).copied().unwrap_or(0) >= min_interactions)
        .map(|it| it.degree)
        .collect();
    let threshold = compute_threshold(&degrees, z, min_interactions)?;
    let items = items.iter().map(|it| apply_threshold(it, &threshold)).collect();
    Ok(StereotypeAudit { items, threshold })
}
