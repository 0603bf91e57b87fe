//! Stereotype-aware fairness (SF) over recommendation sets, and its
//! differentiable surrogate used as a training loss.
//!
//! For each group the metric compares the summed history proportions of the
//! recommended users against the count of recommended items flagged into
//! that group; SF is one minus the group-averaged ratio. SF = 0 is
//! calibrated, SF > 0 means the recommendations amplify a stereotype,
//! SF < 0 means under-recommendation.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stereotype::{FlagIndex, UserStereotypeProfile};

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("recommendation set has no positively-decided entries")]
    EmptySet,
    #[error("every group has zero flagged recommended items; SF is undefined")]
    AllGroupsExcluded,
    #[error("no stereotype profile for user {0:?}")]
    MissingProfile(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecEntry {
    pub user_id: String,
    pub item_id: String,
    /// Like-probability in [0, 1].
    pub score: f64,
    /// `score >= decision_threshold`.
    pub decision: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecommendationSet {
    pub entries: Vec<RecEntry>,
    pub decision_threshold: f64,
}

impl RecommendationSet {
    pub fn from_scores(
        scored: impl IntoIterator<Item = (String, String, f64)>,
        decision_threshold: f64,
    ) -> Self {
        let entries = scored
            .into_iter()
            .map(|(user_id, item_id, score)| RecEntry {
                decision: score >= decision_threshold,
                user_id,
                item_id,
                score,
            })
            .collect();
        Self {
            entries,
            decision_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupFairness {
    pub h_sum: f64,
    pub flag_count: u64,
    /// `h_sum / flag_count`; absent when the group has no flagged items.
    pub ratio: Option<f64>,
    pub coverage_ok: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FairnessReport {
    pub sf: f64,
    pub per_group: BTreeMap<String, GroupFairness>,
    pub excluded_groups: Vec<String>,
    pub n_entries: usize,
    pub decision_threshold: f64,
}

/// Core SF computation over per-entry (h over groups, flags over groups).
///
/// Returns the signed SF together with per-group sums; groups with zero
/// flagged items are excluded from the average and listed by index.
pub fn sf_from_parts(
    entries: &[(Vec<f64>, Vec<f64>)],
    n_groups: usize,
) -> Result<(f64, Vec<(f64, f64)>, Vec<usize>), FairnessError> {
    if entries.is_empty() {
        return Err(FairnessError::EmptySet);
    }
    let mut sums = vec![(0.0f64, 0.0f64); n_groups];
    for (h, flags) in entries {
        for g in 0..n_groups {
            sums[g].0 += h[g];
            sums[g].1 += flags[g];
        }
    }
    let mut excluded = Vec::new();
    let mut total = 0.0;
    let mut included = 0usize;
    for (g, &(h_sum, flag_sum)) in sums.iter().enumerate() {
        if flag_sum > 0.0 {
            total += h_sum / flag_sum;
            included += 1;
        } else {
            excluded.push(g);
        }
    }
    if included == 0 {
        return Err(FairnessError::AllGroupsExcluded);
    }
    Ok((1.0 - total / included as f64, sums, excluded))
}

/// Hard SF over the positively-decided entries of a recommendation set.
pub fn stereotype_fairness(
    recommendations: &RecommendationSet,
    user_profiles: &HashMap<String, UserStereotypeProfile>,
    item_flags: &FlagIndex,
    group_set: &[String],
) -> Result<FairnessReport, FairnessError> {
    let positive: Vec<&RecEntry> = recommendations
        .entries
        .iter()
        .filter(|e| e.decision)
        .collect();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = positive
        .iter()
        .map(|e| {
            let profile = user_profiles
                .get(&e.user_id)
                .ok_or_else(|| FairnessError::MissingProfile(e.user_id.clone()))?;
            Ok((profile.h_vec(group_set), item_flags.flag_vec(&e.item_id)))
        })
        .collect::<Result<_, FairnessError>>()?;
    let (sf, sums, excluded) = sf_from_parts(&parts, group_set.len())?;
    let per_group = group_set
        .iter()
        .enumerate()
        .map(|(g, name)| {
            let (h_sum, flag_sum) = sums[g];
            let flag_count = flag_sum as u64;
            (
                name.clone(),
                GroupFairness {
                    h_sum,
                    flag_count,
                    ratio: (flag_count > 0).then(|| h_sum / flag_sum),
                    coverage_ok: flag_count > 0,
                },
            )
        })
        .collect();
    Ok(FairnessReport {
        sf,
        per_group,
        excluded_groups: excluded.iter().map(|&g| group_set[g].clone()).collect(),
        n_entries: positive.len(),
        decision_threshold: recommendations.decision_threshold,
    })
}

/// One batch entry of the differentiable surrogate.
#[derive(Debug, Clone)]
pub struct SoftEntry {
    /// User history proportions over groups.
    pub h: Vec<f64>,
    /// Item flag indicators over groups.
    pub flags: Vec<f64>,
    /// Like-probability in (0, 1).
    pub like_prob: f64,
}

/// Probability-weighted SF surrogate:
/// `1 - (1/|G'|) sum_{G in G'} [ sum_i p_i h_i[G] / (sum_i p_i flag_i[G] + eps) ]`
/// where `G'` keeps only groups with at least one flagged item in the batch
/// (mirroring the hard metric's group exclusion; the membership of `G'` does
/// not depend on the probabilities, so the surrogate stays smooth).
///
/// Converges to the hard metric as probabilities approach binary decisions
/// and `eps -> 0`. A batch with no flagged items at all scores 0 with zero
/// gradient.
pub fn soft_stereotype_fairness(batch: &[SoftEntry], n_groups: usize, epsilon: f64) -> f64 {
    soft_sf_with_gradient(batch, n_groups, epsilon).0
}

/// Surrogate value together with its gradient w.r.t. each like-probability.
pub fn soft_sf_with_gradient(
    batch: &[SoftEntry],
    n_groups: usize,
    epsilon: f64,
) -> (f64, Vec<f64>) {
    let mut num = vec![0.0f64; n_groups];
    let mut den = vec![epsilon; n_groups];
    let mut flag_mass = vec![0.0f64; n_groups];
    for entry in batch {
        for g in 0..n_groups {
            num[g] += entry.like_prob * entry.h[g];
            den[g] += entry.like_prob * entry.flags[g];
            flag_mass[g] += entry.flags[g];
        }
    }
    let covered: Vec<usize> = (0..n_groups).filter(|&g| flag_mass[g] > 0.0).collect();
    if covered.is_empty() {
        return (0.0, vec![0.0; batch.len()]);
    }
    let scale = covered.len() as f64;
    let mut sf = 1.0;
    for &g in &covered {
        sf -= num[g] / den[g] / scale;
    }
    let grad = batch
        .iter()
        .map(|entry| {
            let mut d = 0.0;
            for &g in &covered {
                // d/dp of num/den for this entry
                d -= (entry.h[g] * den[g] - num[g] * entry.flags[g]) / (den[g] * den[g]);
            }
            d / scale
        })
        .collect();
    (sf, grad)
}

/// SF computed separately for entries where the user's group matches the
/// recommended item's flagged group ("consistent") and where it does not
/// ("inconsistent"). Entries whose item carries no flag are left out of both
/// partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedFairness {
    pub consistent: Option<FairnessReport>,
    pub inconsistent: Option<FairnessReport>,
    pub n_consistent: usize,
    pub n_inconsistent: usize,
    pub n_unflagged: usize,
}

pub fn fairness_by_pairing(
    recommendations: &RecommendationSet,
    user_groups: &HashMap<String, usize>,
    user_profiles: &HashMap<String, UserStereotypeProfile>,
    item_flags: &FlagIndex,
    group_set: &[String],
) -> Result<PairedFairness, FairnessError> {
    let mut consistent = Vec::new();
    let mut inconsistent = Vec::new();
    let mut n_unflagged = 0usize;
    for entry in recommendations.entries.iter().filter(|e| e.decision) {
        let ug = *user_groups
            .get(&entry.user_id)
            .ok_or_else(|| FairnessError::MissingProfile(entry.user_id.clone()))?;
        match item_flags.flag_of(&entry.item_id) {
            Some(ig) if ig == ug => consistent.push(entry.clone()),
            Some(_) => inconsistent.push(entry.clone()),
            None => n_unflagged += 1,
        }
    }
    let report = |entries: &[RecEntry]| -> Option<FairnessReport> {
        if entries.is_empty() {
            return None;
        }
        stereotype_fairness(
            &RecommendationSet {
                entries: entries.to_vec(),
                decision_threshold: recommendations.decision_threshold,
            },
            user_profiles,
            item_flags,
            group_set,
        )
        .ok()
    };
    Ok(PairedFairness {
        n_consistent: consistent.len(),
        n_inconsistent: inconsistent.len(),
        n_unflagged,
        consistent: report(&consistent),
        inconsistent: report(&inconsistent),
    })
}
