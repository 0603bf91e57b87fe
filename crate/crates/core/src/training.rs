//! Composite loss, manual gradients through the gated-expert path, and the
//! optimizer loop. Only the mixture parameters receive gradients; the
//! scorer stays frozen throughout.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::Serialize;
use thiserror::Error;

use crate::backbone::{FrozenScorer, RecPrompt};
use crate::fairness::{soft_sf_with_gradient, SoftEntry};
use crate::math;
use crate::mixture::{
    mos_forward, MixtureError, MixtureParams, RoutingTrace, StereotypeTemplateSet,
};

/// Denominator guard used by the differentiable fairness surrogate.
pub const SOFT_SF_EPSILON: f64 = 1e-8;
const PROB_CLAMP: f64 = 1e-12;

/// Temperature of the soft decision indicator used by the fairness
/// surrogate. Weighting entries by a sharp sigmoid around the decision
/// threshold (rather than by the raw like-probability) keeps the surrogate
/// faithful to the hard metric: probability moves that do not cross the
/// threshold barely change the loss.
const DECISION_TAU: f64 = 0.04;

/// Soft decision indicator and its derivative w.r.t. the like-probability.
fn decision_weight(like_prob: f64) -> (f64, f64) {
    let w = 1.0 / (1.0 + (-(like_prob - 0.5) / DECISION_TAU).exp());
    (w, w * (1.0 - w) / DECISION_TAU)
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("expert diversity needs at least 2 experts, got {0}")]
    TooFewExperts(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NanLoss { epoch: usize, batch: usize },
    #[error(transparent)]
    Mixture(#[from] MixtureError),
}

/// One supervised example: the prompt to score, the user's per-group
/// history proportions, the target item's per-group flag indicators, and
/// the like/dislike label.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub prompt: RecPrompt,
    pub h: Vec<f64>,
    pub flags: Vec<f64>,
    pub label: bool,
}

/// Where the diversity term applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DiversityTarget {
    /// Spread the expert weights w (the default).
    #[default]
    Weights,
    /// Spread the expert soft-prompt outputs instead.
    ExpertOutputs,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct LossBreakdown {
    pub l_rec: f64,
    pub l_fair: f64,
    pub l_expert: f64,
    pub l_total: f64,
    pub lambda_fair: f64,
    pub lambda_expert: f64,
}

impl LossBreakdown {
    pub fn compose(l_rec: f64, l_fair: f64, l_expert: f64, lf: f64, le: f64) -> Self {
        Self {
            l_rec,
            l_fair,
            l_expert,
            l_total: l_rec + lf * l_fair + le * l_expert,
            lambda_fair: lf,
            lambda_expert: le,
        }
    }
}

/// Negative log-likelihood of the label under the like-probability,
/// clamped away from {0, 1}.
pub fn rec_loss(like_prob: f64, label: bool) -> f64 {
    let p = like_prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

fn rec_loss_grad(like_prob: f64, label: bool) -> f64 {
    let p = like_prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label {
        -1.0 / p
    } else {
        1.0 / (1.0 - p)
    }
}

/// Lowest-index pair attaining the minimum squared difference.
fn min_pair(values: &[f64]) -> (usize, usize, f64) {
    let mut best = (0, 1, f64::INFINITY);
    for i in 0..values.len() {
        for j in (i + 1)..values.len() {
            let sq = (values[i] - values[j]) * (values[i] - values[j]);
            if sq < best.2 {
                best = (i, j, sq);
            }
        }
    }
    best
}

/// Negated minimum pairwise squared weight distance: minimized by pushing
/// the two closest expert weights apart.
pub fn expert_diversity_loss(w: &[f64]) -> Result<f64, TrainError> {
    if w.len() < 2 {
        return Err(TrainError::TooFewExperts(w.len()));
    }
    Ok(-min_pair(w).2)
}

fn expert_output_diversity(experts: &[Vec<f64>]) -> Result<(f64, usize, usize), TrainError> {
    if experts.len() < 2 {
        return Err(TrainError::TooFewExperts(experts.len()));
    }
    let mut best = (0, 1, f64::INFINITY);
    for i in 0..experts.len() {
        for j in (i + 1)..experts.len() {
            let sq: f64 = experts[i]
                .iter()
                .zip(&experts[j])
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum();
            if sq < best.2 {
                best = (i, j, sq);
            }
        }
    }
    Ok((-best.2, best.0, best.1))
}

/// Combine per-term values into a breakdown with the composite total.
pub fn total_loss(l_rec: f64, l_fair: f64, l_expert: f64, lf: f64, le: f64) -> LossBreakdown {
    LossBreakdown::compose(l_rec, l_fair, l_expert, lf, le)
}

/// Forward every example, returning traces alongside the loss breakdown.
pub fn batch_forward(
    params: &MixtureParams,
    scorer: &FrozenScorer,
    templates: &StereotypeTemplateSet,
    batch: &[TrainExample],
    lf: f64,
    le: f64,
    diversity_on: DiversityTarget,
) -> Result<(Vec<RoutingTrace>, LossBreakdown), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let traces: Vec<RoutingTrace> = batch
        .iter()
        .map(|ex| mos_forward(params, scorer, &ex.prompt, templates))
        .collect::<Result<_, _>>()?;
    let b = batch.len() as f64;
    let l_rec = batch
        .iter()
        .zip(&traces)
        .map(|(ex, t)| rec_loss(t.like_prob, ex.label))
        .sum::<f64>()
        / b;
    let entries: Vec<SoftEntry> = batch
        .iter()
        .zip(&traces)
        .map(|(ex, t)| SoftEntry {
            h: ex.h.clone(),
            flags: ex.flags.clone(),
            like_prob: decision_weight(t.like_prob).0,
        })
        .collect();
    let n_groups = batch[0].h.len();
    let (sf, _) = soft_sf_with_gradient(&entries, n_groups, SOFT_SF_EPSILON);
    let l_fair = sf.abs();
    let l_expert = traces
        .iter()
        .map(|t| match diversity_on {
            DiversityTarget::Weights => expert_diversity_loss(&t.w),
            DiversityTarget::ExpertOutputs => {
                expert_output_diversity(&t.experts).map(|(l, _, _)| l)
            }
        })
        .sum::<Result<f64, _>>()?
        / b;
    Ok((traces, total_loss(l_rec, l_fair, l_expert, lf, le)))
}

/// Analytic gradients of the composite loss w.r.t. every mixture parameter
/// block, returned in a parameter-shaped container.
pub fn backward(
    params: &MixtureParams,
    batch: &[TrainExample],
    traces: &[RoutingTrace],
    lf: f64,
    le: f64,
    diversity_on: DiversityTarget,
) -> Result<MixtureParams, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let b = batch.len() as f64;
    let n_groups = batch[0].h.len();
    let entries: Vec<SoftEntry> = batch
        .iter()
        .zip(traces)
        .map(|(ex, t)| SoftEntry {
            h: ex.h.clone(),
            flags: ex.flags.clone(),
            like_prob: decision_weight(t.like_prob).0,
        })
        .collect();
    let (sf, sf_grad) = soft_sf_with_gradient(&entries, n_groups, SOFT_SF_EPSILON);
    let sf_sign = if sf > 0.0 {
        1.0
    } else if sf < 0.0 {
        -1.0
    } else {
        0.0
    };

    let mut grads = MixtureParams::zeros(params.n, params.l, params.k, params.d)?;
    grads.static_experts = params.static_experts;
    let ld = params.l * params.d;

    for (idx, (ex, trace)) in batch.iter().zip(traces).enumerate() {
        // dL/dy: rec term averaged over the batch plus the fairness
        // surrogate chained through the soft decision indicator.
        let dy = rec_loss_grad(trace.like_prob, ex.label) / b
            + lf * sf_sign * sf_grad[idx] * decision_weight(trace.like_prob).1;

        // dL/de: every soft-prompt row sees the same gradient row.
        let d_row: Vec<f64> = trace.grad_row.iter().map(|&g| dy * g).collect();

        // Expert parameters and expert weights.
        let mut dw = vec![0.0; params.n];
        for nx in 0..params.n {
            let wn = trace.w[nx];
            // dL/dE_n = w_n * dL/de (replicated rows)
            if !params.static_experts {
                for r in 0..ld {
                    let g = wn * d_row[r % params.d];
                    math::axpy(
                        g,
                        &trace.u_rec,
                        &mut grads.expert_w[nx][r * params.d..(r + 1) * params.d],
                    );
                }
            }
            for r in 0..ld {
                grads.expert_b[nx][r] += wn * d_row[r % params.d];
            }
            // dL/dw_n = <dL/de, E_n>
            for r in 0..ld {
                dw[nx] += d_row[r % params.d] * trace.experts[nx][r];
            }
        }

        // Diversity term.
        match diversity_on {
            DiversityTarget::Weights => {
                let (i, j, _) = min_pair(&trace.w);
                let diff = trace.w[i] - trace.w[j];
                dw[i] += le / b * (-2.0 * diff);
                dw[j] += le / b * (2.0 * diff);
            }
            DiversityTarget::ExpertOutputs => {
                let (_, i, j) = expert_output_diversity(&trace.experts)?;
                for r in 0..ld {
                    let diff = trace.experts[i][r] - trace.experts[j][r];
                    let gi = le / b * (-2.0 * diff);
                    let gj = -gi;
                    grads.expert_b[i][r] += gi;
                    grads.expert_b[j][r] += gj;
                    if !params.static_experts {
                        math::axpy(
                            gi,
                            &trace.u_rec,
                            &mut grads.expert_w[i][r * params.d..(r + 1) * params.d],
                        );
                        math::axpy(
                            gj,
                            &trace.u_rec,
                            &mut grads.expert_w[j][r * params.d..(r + 1) * params.d],
                        );
                    }
                }
            }
        }

        // Reweighting layer: w = softmax(R*avg + b).
        let ds = math::softmax_backward(&trace.w, &dw);
        math::outer_acc(&mut grads.reweight_w, &ds, &trace.avg);
        math::axpy(1.0, &ds, &mut grads.reweight_b);
        let davg = math::matvec_t(&params.reweight_w, params.n, params.n, &ds);

        // Variant average, then each masked row.
        let n_variants = trace.masked.len() as f64;
        for (v, kept) in trace.kept.iter().enumerate() {
            // Top-K mask: kept entries are a softmax over the kept raw
            // values; the selection itself is piecewise constant.
            let kept_probs: Vec<f64> = kept.iter().map(|&kix| trace.masked[v][kix]).collect();
            let kept_grad: Vec<f64> = kept.iter().map(|&kix| davg[kix] / n_variants).collect();
            let d_raw_kept = math::softmax_backward(&kept_probs, &kept_grad);
            let mut dp = vec![0.0; params.n];
            for (slot, &kix) in kept.iter().enumerate() {
                dp[kix] = d_raw_kept[slot];
            }
            // Router softmax.
            let ds_router = math::softmax_backward(&trace.raw[v], &dp);
            math::outer_acc(&mut grads.router_w, &ds_router, &trace.u_variants[v]);
            math::axpy(1.0, &ds_router, &mut grads.router_b);
        }
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sgd" => Some(Self::Sgd),
            "adam" => Some(Self::Adam),
            _ => None,
        }
    }
}

/// Per-block first/second moment accumulators for the adam-style update;
/// unused for plain sgd.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &MixtureParams) -> Self {
        let shapes: Vec<usize> = params.blocks().iter().map(|(_, b)| b.len()).collect();
        Self {
            kind,
            lr,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut MixtureParams, grads: &MixtureParams) {
        self.t += 1;
        let grad_blocks = grads.blocks();
        for (bix, block) in params.blocks_mut().into_iter().enumerate() {
            let g = grad_blocks[bix].1;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (p, &gi) in block.iter_mut().zip(g) {
                        *p -= self.lr * gi;
                    }
                }
                OptimizerKind::Adam => {
                    let bias1 = 1.0 - ADAM_B1.powi(self.t as i32);
                    let bias2 = 1.0 - ADAM_B2.powi(self.t as i32);
                    for (i, (p, &gi)) in block.iter_mut().zip(g).enumerate() {
                        let m = &mut self.m[bix][i];
                        let v = &mut self.v[bix][i];
                        *m = ADAM_B1 * *m + (1.0 - ADAM_B1) * gi;
                        *v = ADAM_B2 * *v + (1.0 - ADAM_B2) * gi * gi;
                        let mhat = *m / bias1;
                        let vhat = *v / bias2;
                        *p -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub lambda_fair: f64,
    pub lambda_expert: f64,
    pub optimizer: OptimizerKind,
    pub diversity_on: DiversityTarget,
    pub static_experts: bool,
    /// Stop after this many epochs without validation-loss improvement.
    pub early_stop_patience: Option<usize>,
    /// Strength of the history-mass score shift seeded into the experts by
    /// [`fairness_aware_init`].
    pub init_shift: f64,
    /// Scale of the random perturbation added on top of the seeded experts.
    pub init_noise: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 0.01,
            seed: 0,
            n: 4,
            l: 5,
            k: 1,
            lambda_fair: 1.0,
            lambda_expert: 1.0,
            optimizer: OptimizerKind::Adam,
            diversity_on: DiversityTarget::Weights,
            static_experts: false,
            early_stop_patience: None,
            init_shift: 5.0,
            init_noise: 0.02,
        }
    }
}

/// Ridge penalty for the history-mass readout fitted by
/// [`fairness_aware_init`].
const INIT_RIDGE: f64 = 1e-3;

/// Data-dependent initialization that seeds every expert with a score shift
/// proportional to the user's flagged-history mass.
///
/// Two directions are estimated from the training examples: `r`, a ridge
/// least-squares readout of the summed history proportions from the pooled
/// prompt embedding, and `v`, the average direction in which a soft-prompt
/// row raises the like-probability. Each expert starts as the rank-one map
/// `shift * v * (r . u - mean)`, so users with group-heavy histories get a
/// positive score offset from the first step — the configuration the
/// fairness term needs gradient contact with, but which is hard to reach
/// from small random weights while the recommendation term dominates.
/// A small random perturbation breaks expert symmetry.
pub fn fairness_aware_init(
    config: &TrainConfig,
    scorer: &FrozenScorer,
    examples: &[TrainExample],
) -> Result<MixtureParams, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let d = scorer.d;
    let wrap = |e: crate::backbone::BackboneError| TrainError::Mixture(e.into());

    let mut v_out = vec![0.0f64; d];
    let mut ata = vec![0.0f64; d * d];
    let mut aty = vec![0.0f64; d];
    let zero_row = vec![0.0f64; d];
    let mut pooled = Vec::with_capacity(examples.len());
    for ex in examples {
        let u = scorer.mean_pool(&ex.prompt.tokens).map_err(wrap)?;
        let (_, grad) = scorer
            .score_with_input_grad(&zero_row, &ex.prompt)
            .map_err(wrap)?;
        math::axpy(1.0, &grad[..d], &mut v_out);
        let y: f64 = ex.h.iter().sum();
        for i in 0..d {
            aty[i] += u[i] * y;
        }
        math::outer_acc(&mut ata, &u, &u);
        pooled.push(u);
    }
    let n = examples.len() as f64;
    let norm = math::dot(&v_out, &v_out).sqrt();
    if norm == 0.0 {
        // flat scorer: nothing to seed, fall back to random
        return Ok(MixtureParams::init(
            config.n,
            config.l,
            config.k,
            d,
            config.seed,
            config.init_noise,
        )?);
    }
    for x in &mut v_out {
        *x /= norm;
    }
    for i in 0..d {
        ata[i * d + i] += INIT_RIDGE;
    }
    let readout = match math::solve(ata, aty) {
        Some(r) => r,
        None => {
            return Ok(MixtureParams::init(
                config.n,
                config.l,
                config.k,
                d,
                config.seed,
                config.init_noise,
            )?)
        }
    };
    let mean_pred: f64 = pooled.iter().map(|u| math::dot(u, &readout)).sum::<f64>() / n;

    let mut params = MixtureParams::init(
        config.n,
        config.l,
        config.k,
        d,
        config.seed,
        config.init_noise,
    )?;
    for nx in 0..config.n {
        for row in 0..config.l {
            for j in 0..d {
                let rr = row * d + j;
                params.expert_b[nx][rr] -= config.init_shift * v_out[j] * mean_pred;
                math::axpy(
                    config.init_shift * v_out[j],
                    &readout,
                    &mut params.expert_w[nx][rr * d..(rr + 1) * d],
                );
            }
        }
    }
    Ok(params)
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_rec: f64,
    pub l_fair: f64,
    pub l_expert: f64,
    pub l_total: f64,
    pub val_auc: Option<f64>,
    pub val_sf: Option<f64>,
}

/// Hard SF over positively-decided validation examples; `None` when the
/// metric is undefined (no positive decisions or no flagged items).
fn validation_sf(examples: &[TrainExample], probs: &[f64], threshold: f64) -> Option<f64> {
    let entries: Vec<(Vec<f64>, Vec<f64>)> = examples
        .iter()
        .zip(probs)
        .filter(|(_, &p)| p >= threshold)
        .map(|(ex, _)| (ex.h.clone(), ex.flags.clone()))
        .collect();
    if entries.is_empty() {
        return None;
    }
    crate::fairness::sf_from_parts(&entries, examples[0].h.len())
        .ok()
        .map(|(sf, _, _)| sf)
}

/// Train the mixture parameters against the frozen scorer.
///
/// Deterministic under `config.seed`; the scorer is never mutated. Returns
/// the trained parameters and one log entry per completed epoch.
pub fn fit(
    config: &TrainConfig,
    scorer: &FrozenScorer,
    templates: &StereotypeTemplateSet,
    train: &[TrainExample],
    validation: &[TrainExample],
    initial: MixtureParams,
) -> Result<(MixtureParams, Vec<EpochLog>), TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut params = initial;
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate, &params);
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut logs = Vec::with_capacity(config.epochs);
    let mut best_val = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        let mut n_batches = 0usize;
        for (bix, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<TrainExample> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let (traces, loss) = batch_forward(
                &params,
                scorer,
                templates,
                &batch,
                config.lambda_fair,
                config.lambda_expert,
                config.diversity_on,
            )?;
            if !loss.l_total.is_finite() {
                return Err(TrainError::NanLoss { epoch, batch: bix });
            }
            let grads = backward(
                &params,
                &batch,
                &traces,
                config.lambda_fair,
                config.lambda_expert,
                config.diversity_on,
            )?;
            optimizer.step(&mut params, &grads);
            sums.0 += loss.l_rec;
            sums.1 += loss.l_fair;
            sums.2 += loss.l_expert;
            sums.3 += loss.l_total;
            n_batches += 1;
        }
        let nb = n_batches as f64;

        // Validation pass.
        let (val_auc, val_sf, val_total) = if validation.is_empty() {
            (None, None, f64::NAN)
        } else {
            let (_, val_loss) = batch_forward(
                &params,
                scorer,
                templates,
                validation,
                config.lambda_fair,
                config.lambda_expert,
                config.diversity_on,
            )?;
            let probs: Vec<f64> = validation
                .iter()
                .map(|ex| mos_forward(&params, scorer, &ex.prompt, templates).map(|t| t.like_prob))
                .collect::<Result<_, _>>()?;
            let labels: Vec<bool> = validation.iter().map(|ex| ex.label).collect();
            (
                crate::evaluation::auc(&probs, &labels),
                validation_sf(validation, &probs, 0.5),
                val_loss.l_total,
            )
        };

        logs.push(EpochLog {
            epoch,
            l_rec: sums.0 / nb,
            l_fair: sums.1 / nb,
            l_expert: sums.2 / nb,
            l_total: sums.3 / nb,
            val_auc,
            val_sf,
        });

        if let Some(patience) = config.early_stop_patience {
            if val_total.is_finite() {
                if val_total + 1e-12 < best_val {
                    best_val = val_total;
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= patience {
                        break;
                    }
                }
            }
        }
    }
    Ok((params, logs))
}
