//! Test-split metrics: AUC, precision/recall, and the stereotype-fairness
//! score under the implicit/explicit/counterfactual prompt settings, plus
//! the consistent-vs-inconsistent paired analysis.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use crate::backbone::EvalSetting;
use crate::backbone::{tokenize_rec_prompt, BackboneError, FrozenScorer};
use crate::dataset::{label_from_rating, InteractionDataset, Sequence};
use crate::fairness::sf_from_parts;
use crate::mixture::{mos_forward, MixtureError, MixtureParams, StereotypeTemplateSet};
use crate::stereotype::{user_history_proportion, FlagIndex};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty test split")]
    EmptyTest,
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// Mann-Whitney AUC with ties counted half; `None` when only one class is
/// present.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    // midranks over the pooled sample
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block shares the average rank
        let midrank = (i + j + 2) as f64 / 2.0;
        for &ix in &order[i..=j] {
            if labels[ix] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos as f64 * n_neg as f64))
}

/// Precision and recall of binary decisions; degenerate denominators come
/// back as `None` rather than failing.
pub fn precision_recall(decisions: &[bool], labels: &[bool]) -> (Option<f64>, Option<f64>) {
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut fn_ = 0u64;
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    (precision, recall)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub auc: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    /// Setting name -> signed fairness score; `None` when undefined for
    /// that setting (no positive decisions or no flagged recommendations).
    pub sf: BTreeMap<String, Option<f64>>,
    pub n_test: usize,
    pub decision_threshold: f64,
}

/// Shared read-only inputs for evaluation. The flag index and templates
/// must come from training-split artifacts to avoid leakage.
pub struct EvalContext<'a> {
    pub dataset: &'a InteractionDataset,
    pub flags: &'a FlagIndex,
    pub templates: &'a StereotypeTemplateSet,
    pub decision_threshold: f64,
}

fn score_one(
    params: Option<&MixtureParams>,
    scorer: &FrozenScorer,
    ctx: &EvalContext,
    sequence: &Sequence,
    setting: EvalSetting,
) -> Result<f64, EvalError> {
    let prompt = tokenize_rec_prompt(sequence, ctx.dataset, setting, &scorer.vocab)?;
    match params {
        Some(p) => Ok(mos_forward(p, scorer, &prompt, ctx.templates)?.like_prob),
        None => Ok(scorer.score(&[], &prompt)?),
    }
}

/// Per-sequence fairness ingredients: the history-profile vector and the
/// target item's flag indicator vector.
fn fairness_parts(sequence: &Sequence, ctx: &EvalContext) -> (Vec<f64>, Vec<f64>) {
    let hist: Vec<String> = sequence.history.iter().map(|r| r.item_id.clone()).collect();
    let profile = user_history_proportion(&sequence.user_id, &hist, ctx.flags);
    (
        profile.h_vec(&ctx.dataset.group_set),
        ctx.flags.flag_vec(&sequence.target.item_id),
    )
}

/// Score the test split and report AUC/precision/recall (implicit prompts)
/// together with the fairness score for each requested setting. With no
/// mixture parameters, the bare scorer is the baseline.
pub fn evaluate(
    params: Option<&MixtureParams>,
    scorer: &FrozenScorer,
    test: &[Sequence],
    settings: &[EvalSetting],
    ctx: &EvalContext,
) -> Result<MetricsReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let labels: Vec<bool> = test
        .iter()
        .map(|s| label_from_rating(s.target.rating, ctx.dataset.rating_median))
        .collect();
    let mut setting_scores: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    let mut all_settings: Vec<EvalSetting> = vec![EvalSetting::Implicit];
    all_settings.extend(settings.iter().copied());
    for setting in all_settings {
        if setting_scores.contains_key(setting.as_str()) {
            continue;
        }
        let scores: Vec<f64> = test
            .iter()
            .map(|s| score_one(params, scorer, ctx, s, setting))
            .collect::<Result<_, _>>()?;
        setting_scores.insert(setting.as_str(), scores);
    }

    let implicit = &setting_scores["implicit"];
    let decisions: Vec<bool> = implicit
        .iter()
        .map(|&s| s >= ctx.decision_threshold)
        .collect();
    let (precision, recall) = precision_recall(&decisions, &labels);
    let auc_value = auc(implicit, &labels);

    let n_groups = ctx.dataset.group_set.len();
    let mut sf = BTreeMap::new();
    for setting in settings {
        let scores = &setting_scores[setting.as_str()];
        let entries: Vec<(Vec<f64>, Vec<f64>)> = test
            .iter()
            .zip(scores)
            .filter(|(_, &s)| s >= ctx.decision_threshold)
            .map(|(seq, _)| fairness_parts(seq, ctx))
            .collect();
        let value = if entries.is_empty() {
            None
        } else {
            sf_from_parts(&entries, n_groups).ok().map(|(v, _, _)| v)
        };
        sf.insert(setting.as_str().to_string(), value);
    }

    Ok(MetricsReport {
        auc: auc_value,
        precision,
        recall,
        sf,
        n_test: test.len(),
        decision_threshold: ctx.decision_threshold,
    })
}

/// Metrics for test pairs whose target item is flagged for the user's own
/// group (consistent) versus another group (inconsistent). Targets without
/// a flag fall into neither partition.
#[derive(Debug, Clone, Serialize)]
pub struct PairedEval {
    pub consistent: Option<MetricsReport>,
    pub inconsistent: Option<MetricsReport>,
    pub n_consistent: usize,
    pub n_inconsistent: usize,
    pub n_unflagged: usize,
}

pub fn paired_group_eval(
    params: Option<&MixtureParams>,
    scorer: &FrozenScorer,
    test: &[Sequence],
    setting: EvalSetting,
    ctx: &EvalContext,
) -> Result<PairedEval, EvalError> {
    let mut consistent = Vec::new();
    let mut inconsistent = Vec::new();
    let mut n_unflagged = 0usize;
    for seq in test {
        match (
            ctx.flags.flag_of(&seq.target.item_id),
            ctx.dataset.user_group_index(&seq.user_id),
        ) {
            (Some(item_group), Some(user_group)) => {
                if item_group == user_group {
                    consistent.push(seq.clone());
                } else {
                    inconsistent.push(seq.clone());
                }
            }
            _ => n_unflagged += 1,
        }
    }
    let run = |part: &[Sequence]| -> Result<Option<MetricsReport>, EvalError> {
        if part.is_empty() {
            Ok(None)
        } else {
            evaluate(params, scorer, part, &[setting], ctx).map(Some)
        }
    };
    Ok(PairedEval {
        consistent: run(&consistent)?,
        inconsistent: run(&inconsistent)?,
        n_consistent: consistent.len(),
        n_inconsistent: inconsistent.len(),
        n_unflagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{PlantProfile, TokenVocabulary};
    use crate::dataset::{build_sequences, generate_synthetic, SynthConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn auc_perfect_and_tied() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]), Some(1.0));
        assert_eq!(auc(&[0.4; 6], &[true, false, true, false, true, false]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.9], &[true, false]), Some(0.0));
        assert_eq!(auc(&[0.3, 0.4], &[true, true]), None);
    }

    /// Brute-force all-pairs formulation, ties counted half.
    fn auc_oracle(scores: &[f64], labels: &[bool]) -> Option<f64> {
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &li) in labels.iter().enumerate() {
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
        (pairs > 0.0).then(|| wins / pairs)
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = 50;
            // quantized scores so ties actually occur
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..10) as f64) / 10.0).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
            let got = auc(&scores, &labels);
            let want = auc_oracle(&scores, &labels);
            match (got, want) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
                (a, b) => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let scores = [0.1, 0.7, 0.3, 0.9, 0.5, 0.3];
        let labels = [false, true, false, true, true, false];
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| (5.0 * s).tanh()).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 100.0 * s - 3.0).collect();
        assert_eq!(auc(&squashed, &labels).unwrap(), base);
        assert_eq!(auc(&shifted, &labels).unwrap(), base);
    }

    #[test]
    fn precision_recall_cases() {
        let (p, r) = precision_recall(&[true, false, true], &[true, false, true]);
        assert_eq!((p, r), (Some(1.0), Some(1.0)));

        // predict everything positive: precision = base rate, recall = 1
        let labels = [true, false, false, true];
        let (p, r) = precision_recall(&[true; 4], &labels);
        assert_eq!((p, r), (Some(0.5), Some(1.0)));

        // TP=3, FP=1, FN=2
        let decisions = [true, true, true, true, false, false];
        let labels = [true, true, true, false, true, true];
        let (p, r) = precision_recall(&decisions, &labels);
        assert_eq!((p, r), (Some(0.75), Some(0.6)));

        let (p, r) = precision_recall(&[false, false], &[false, false]);
        assert_eq!((p, r), (None, None));
    }

    fn fixture() -> (
        crate::dataset::InteractionDataset,
        FrozenScorer,
        StereotypeTemplateSet,
        FlagIndex,
        Vec<Sequence>,
    ) {
        let ds = generate_synthetic(
            &SynthConfig {
                n_users: 300,
                n_items: 200,
                group_ratio: vec![0.5, 0.5],
                group_labels: vec!["a".into(), "b".into()],
                affinity: 0.85,
                rating_scale: 5,
                interactions_per_user: 20,
                neutral_fraction: 0.3,
            },
            61,
        )
        .unwrap();
        let vocab = TokenVocabulary::from_dataset(&ds).unwrap();
        let plant = PlantProfile::from_dataset(&ds).unwrap();
        let mut scorer = FrozenScorer::make(vocab.clone(), 16, 24, 3, 1.0, &plant).unwrap();
        let templates = StereotypeTemplateSet::default_for(&vocab);
        let audit = crate::stereotype::audit_items(&ds, 0.5, 3).unwrap();
        let flags = audit.flag_index(&ds.group_set);
        let seqs = build_sequences(&ds, 1000, 7).unwrap().sequences;
        let prompts: Vec<_> = seqs
            .iter()
            .map(|s| {
                crate::backbone::tokenize_rec_prompt(s, &ds, EvalSetting::Implicit, &scorer.vocab)
                    .unwrap()
            })
            .collect();
        scorer.center(prompts.iter(), 0.5).unwrap();
        (ds, scorer, templates, flags, seqs)
    }

    #[test]
    fn flat_scorer_reports_chance_auc_and_forced_recall() {
        let (ds, scorer, templates, flags, seqs) = fixture();
        let zero = FrozenScorer::zeros(scorer.vocab.clone(), 8, 8);
        let ctx = EvalContext {
            dataset: &ds,
            flags: &flags,
            templates: &templates,
            decision_threshold: 0.5,
        };
        let report = evaluate(
            None,
            &zero,
            &seqs,
            &[EvalSetting::Implicit, EvalSetting::Explicit],
            &ctx,
        )
        .unwrap();
        assert_eq!(report.auc, Some(0.5));
        // every score is exactly 0.5, so every pair is recommended
        assert_eq!(report.recall, Some(1.0));
        // identical scores across settings → identical fairness values
        assert_eq!(report.sf["implicit"], report.sf["explicit"]);
    }

    #[test]
    fn attribute_blind_scorer_equates_explicit_and_counterfactual() {
        let (ds, _, templates, flags, seqs) = fixture();
        let vocab = TokenVocabulary::from_dataset(&ds).unwrap();
        let plant = PlantProfile::from_dataset(&ds).unwrap();
        let blind = FrozenScorer::make(vocab, 16, 24, 3, 0.0, &plant).unwrap();
        let ctx = EvalContext {
            dataset: &ds,
            flags: &flags,
            templates: &templates,
            decision_threshold: 0.5,
        };
        let report = evaluate(
            None,
            &blind,
            &seqs,
            &[EvalSetting::Explicit, EvalSetting::Counterfactual],
            &ctx,
        )
        .unwrap();
        assert_eq!(report.sf["explicit"], report.sf["counterfactual"]);
    }

    #[test]
    fn evaluate_is_deterministic_and_leaves_scorer_unchanged() {
        let (ds, scorer, templates, flags, seqs) = fixture();
        let ctx = EvalContext {
            dataset: &ds,
            flags: &flags,
            templates: &templates,
            decision_threshold: 0.5,
        };
        let digest = scorer.weights_digest();
        let settings = [
            EvalSetting::Implicit,
            EvalSetting::Explicit,
            EvalSetting::Counterfactual,
        ];
        let a = evaluate(None, &scorer, &seqs, &settings, &ctx).unwrap();
        let b = evaluate(None, &scorer, &seqs, &settings, &ctx).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(scorer.weights_digest(), digest);
        assert_eq!(a.sf.len(), 3);
        assert_eq!(a.n_test, seqs.len());
        if let Some(v) = a.auc {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn reported_sf_matches_standalone_fairness_run() {
        use std::collections::{HashMap, HashSet};
        let (ds, scorer, templates, flags, seqs) = fixture();
        // one sequence per user so the standalone per-user profile map is
        // well defined
        let mut seen = HashSet::new();
        let unique: Vec<Sequence> = seqs
            .into_iter()
            .filter(|s| seen.insert(s.user_id.clone()))
            .collect();
        let ctx = EvalContext {
            dataset: &ds,
            flags: &flags,
            templates: &templates,
            decision_threshold: 0.5,
        };
        let report = evaluate(None, &scorer, &unique, &[EvalSetting::Implicit], &ctx).unwrap();

        let mut profiles = HashMap::new();
        let mut scored = Vec::new();
        for seq in &unique {
            let hist: Vec<String> = seq.history.iter().map(|r| r.item_id.clone()).collect();
            profiles.insert(
                seq.user_id.clone(),
                user_history_proportion(&seq.user_id, &hist, &flags),
            );
            let prompt =
                tokenize_rec_prompt(seq, &ds, EvalSetting::Implicit, &scorer.vocab).unwrap();
            scored.push((
                seq.user_id.clone(),
                seq.target.item_id.clone(),
                scorer.score(&[], &prompt).unwrap(),
            ));
        }
        let recs = crate::fairness::RecommendationSet::from_scores(scored, 0.5);
        let standalone =
            crate::fairness::stereotype_fairness(&recs, &profiles, &flags, &ds.group_set);
        match (report.sf["implicit"], standalone) {
            (Some(a), Ok(rep)) => assert!((a - rep.sf).abs() < 1e-12),
            (None, Err(_)) => {}
            (a, b) => panic!("mismatch: {a:?} vs {b:?}"),
        }
    }

    #[test]
    fn paired_partition_matches_manual_assignment() {
        let (ds, scorer, templates, flags, seqs) = fixture();
        let ctx = EvalContext {
            dataset: &ds,
            flags: &flags,
            templates: &templates,
            decision_threshold: 0.5,
        };
        let paired =
            paired_group_eval(None, &scorer, &seqs, EvalSetting::Implicit, &ctx).unwrap();
        let mut want = (0usize, 0usize, 0usize);
        for seq in &seqs {
            match flags.flag_of(&seq.target.item_id) {
                Some(g) if g == ds.user_group_index(&seq.user_id).unwrap() => want.0 += 1,
                Some(_) => want.1 += 1,
                None => want.2 += 1,
            }
        }
        assert_eq!(
            (paired.n_consistent, paired.n_inconsistent, paired.n_unflagged),
            want
        );
        assert_eq!(
            paired.n_consistent + paired.n_inconsistent + paired.n_unflagged,
            seqs.len()
        );
    }

    #[test]
    fn planted_bias_favors_consistent_pairs() {
        let (ds, scorer, templates, flags, seqs) = fixture();
        let ctx = EvalContext {
            dataset: &ds,
            flags: &flags,
            templates: &templates,
            decision_threshold: 0.5,
        };
        let paired =
            paired_group_eval(None, &scorer, &seqs, EvalSetting::Implicit, &ctx).unwrap();
        let (c, i) = (paired.consistent.unwrap(), paired.inconsistent.unwrap());
        let (Some(auc_c), Some(auc_i)) = (c.auc, i.auc) else {
            panic!("degenerate partitions: {:?} {:?}", c.auc, i.auc);
        };
        assert!(auc_c > auc_i, "consistent {auc_c} <= inconsistent {auc_i}");
    }

    #[test]
    fn all_neutral_targets_leave_partitions_empty() {
        let (ds, scorer, templates, flags, seqs) = fixture();
        let ctx = EvalContext {
            dataset: &ds,
            flags: &flags,
            templates: &templates,
            decision_threshold: 0.5,
        };
        let unflagged: Vec<Sequence> = seqs
            .into_iter()
            .filter(|s| flags.flag_of(&s.target.item_id).is_none())
            .collect();
        assert!(!unflagged.is_empty());
        let paired =
            paired_group_eval(None, &scorer, &unflagged, EvalSetting::Implicit, &ctx).unwrap();
        assert!(paired.consistent.is_none());
        assert!(paired.inconsistent.is_none());
        assert_eq!(paired.n_unflagged, unflagged.len());
    }
}
