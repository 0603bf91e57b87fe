//! Frozen sequence scorer standing in for a pre-trained recommender.
//!
//! The scorer embeds token sequences, mean-pools the embeddings together
//! with any soft-prompt rows, and maps the pooled vector through a frozen
//! two-layer tanh network with a logistic output. A planted-bias mechanism
//! shifts the embeddings of group-dominated item tokens and the matching
//! group-attribute tokens along a shared per-group direction, so prompts
//! whose history and target share a group score higher; a second direction
//! carries an item-quality signal so scores correlate with like rates.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{label_from_rating, InteractionDataset, Sequence, TokenId};
use crate::math;

/// Maximum prompt length in tokens; overflow truncates oldest history.
pub const MAX_PROMPT_LEN: usize = 128;

const MAGIC: &[u8; 5] = b"SFSC1";

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("soft prompt width {got} does not match embedding dim {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("token id {0} out of vocabulary range")]
    TokenOutOfRange(TokenId),
    #[error("item title token {token} collides with the reserved block (< {floor})")]
    ReservedToken { token: TokenId, floor: TokenId },
    #[error("sequence references unknown item {0:?}")]
    UnknownItem(String),
    #[error("sequence references unknown user {0:?}")]
    UnknownUser(String),
    #[error("hidden width {hidden} too small for {needed} planted units")]
    HiddenTooSmall { hidden: usize, needed: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt scorer file: {0}")]
    Corrupt(String),
}

/// Vocabulary layout: ids 0..=3 are PAD / LIKE / DISLIKE / TARGET markers,
/// followed by one attribute token per group; item title tokens live above
/// the reserved block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenVocabulary {
    pub size: u32,
    pub n_groups: u32,
}

impl TokenVocabulary {
    pub const PAD: TokenId = 0;
    pub const LIKE_MARKER: TokenId = 1;
    pub const DISLIKE_MARKER: TokenId = 2;
    pub const TARGET_MARKER: TokenId = 3;

    pub fn new(n_groups: u32, size: u32) -> Self {
        assert!(size >= 4 + n_groups);
        Self { size, n_groups }
    }

    pub fn group_attr(&self, group: usize) -> TokenId {
        debug_assert!((group as u32) < self.n_groups);
        4 + group as TokenId
    }

    /// First id available to item title tokens.
    pub fn item_floor(&self) -> TokenId {
        4 + self.n_groups
    }

    /// Derive a vocabulary covering all tokens in the dataset.
    pub fn from_dataset(dataset: &InteractionDataset) -> Result<Self, BackboneError> {
        let n_groups = dataset.group_set.len() as u32;
        let floor = 4 + n_groups;
        let mut max_token = floor - 1;
        for item in &dataset.items {
            for &t in &item.title_tokens {
                if t < floor {
                    return Err(BackboneError::ReservedToken { token: t, floor });
                }
                max_token = max_token.max(t);
            }
        }
        for user in &dataset.users {
            for &t in &user.attribute_tokens {
                max_token = max_token.max(t);
            }
        }
        Ok(Self::new(n_groups, max_token + 1))
    }
}

/// Token sequence fed to the backbone (no stereotype templates).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecPrompt {
    pub tokens: Vec<TokenId>,
}

/// Which user attribute, if any, appears in the prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSetting {
    /// Item titles only.
    Implicit,
    /// The user's true group-attribute token is prepended.
    Explicit,
    /// A different group's attribute token is prepended (next in declared
    /// order for more than two groups).
    Counterfactual,
}

impl EvalSetting {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalSetting::Implicit => "implicit",
            EvalSetting::Explicit => "explicit",
            EvalSetting::Counterfactual => "counterfactual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "implicit" => Some(Self::Implicit),
            "explicit" => Some(Self::Explicit),
            "counterfactual" => Some(Self::Counterfactual),
            _ => None,
        }
    }
}

/// Build the recommendation prompt for a sequence: liked block, disliked
/// block, target block, with the group-attribute token prepended in explicit
/// and counterfactual settings. Oldest history items are dropped first when
/// the prompt exceeds [`MAX_PROMPT_LEN`].
pub fn tokenize_rec_prompt(
    sequence: &Sequence,
    dataset: &InteractionDataset,
    setting: EvalSetting,
    vocab: &TokenVocabulary,
) -> Result<RecPrompt, BackboneError> {
    let item_tokens = |item_id: &str| -> Result<&[TokenId], BackboneError> {
        dataset
            .item(item_id)
            .map(|it| it.title_tokens.as_slice())
            .ok_or_else(|| BackboneError::UnknownItem(item_id.to_string()))
    };
    let target_tokens = item_tokens(&sequence.target.item_id)?;

    let attr = match setting {
        EvalSetting::Implicit => None,
        EvalSetting::Explicit | EvalSetting::Counterfactual => {
            let g = dataset
                .user_group_index(&sequence.user_id)
                .ok_or_else(|| BackboneError::UnknownUser(sequence.user_id.clone()))?;
            let g = if setting == EvalSetting::Counterfactual {
                (g + 1) % dataset.group_set.len()
            } else {
                g
            };
            Some(vocab.group_attr(g))
        }
    };

    // Drop oldest history items until the prompt fits.
    let mut start = 0usize;
    loop {
        let history = &sequence.history[start..];
        let mut len = attr.map_or(0, |_| 1) + 3 + target_tokens.len();
        for item in history {
            len += item_tokens(&item.item_id)?.len();
        }
        if len <= MAX_PROMPT_LEN || start + 1 >= sequence.history.len() {
            let mut tokens = Vec::with_capacity(len);
            if let Some(a) = attr {
                tokens.push(a);
            }
            tokens.push(TokenVocabulary::LIKE_MARKER);
            for item in history {
                if label_from_rating(item.rating, dataset.rating_median) {
                    tokens.extend_from_slice(item_tokens(&item.item_id)?);
                }
            }
            tokens.push(TokenVocabulary::DISLIKE_MARKER);
            for item in history {
                if !label_from_rating(item.rating, dataset.rating_median) {
                    tokens.extend_from_slice(item_tokens(&item.item_id)?);
                }
            }
            tokens.push(TokenVocabulary::TARGET_MARKER);
            tokens.extend_from_slice(target_tokens);
            return Ok(RecPrompt { tokens });
        }
        start += 1;
    }
}

/// Per-token planting weights derived from interaction statistics.
#[derive(Debug, Clone)]
pub struct PlantProfile {
    /// token id -> near-binary per-group "audit would flag this item for
    /// group g" weights in [0, 1]
    pub group_weight: HashMap<TokenId, Vec<f64>>,
    /// token id -> centered like-rate in [-1, 1]
    pub quality: HashMap<TokenId, f64>,
    /// interaction-weighted mean of the centered like-rate; the typical
    /// per-row quality mass of a history prompt
    pub mean_quality: f64,
    /// interaction-weighted mean of the dominant group weight; the typical
    /// per-row group mass of a history prompt
    pub mean_flag: f64,
}

impl PlantProfile {
    pub fn neutral() -> Self {
        Self {
            group_weight: HashMap::new(),
            quality: HashMap::new(),
            mean_quality: 0.0,
            mean_flag: 0.0,
        }
    }

    /// Derive planting weights from a dataset: each item's title tokens get
    /// the positive part of the item's per-group bias and its centered like
    /// rate. This mirrors a backbone that was pre-trained on the biased
    /// interaction data.
    pub fn from_dataset(dataset: &InteractionDataset) -> Result<Self, BackboneError> {
        let stereotypes = crate::stereotype::item_stereotypes(dataset)
            .map_err(|e| BackboneError::Corrupt(format!("stereotype derivation failed: {e}")))?;
        let mut likes: HashMap<&str, (usize, usize)> = HashMap::new();
        for ix in &dataset.interactions {
            let entry = likes.entry(ix.item_id.as_str()).or_insert((0, 0));
            if label_from_rating(ix.rating, dataset.rating_median) {
                entry.0 += 1;
            }
            entry.1 += 1;
        }
        let by_id: HashMap<&str, &crate::stereotype::ItemStereotype> = stereotypes
            .iter()
            .map(|s| (s.item_id.as_str(), s))
            .collect();
        // Near-binary per-group weights: a steep logistic over each item's
        // per-group bias degree, centred at mean + sigma/2 of the dominant
        // degree population, approximating which items a stereotype audit
        // will flag for which group. Flagged and unflagged items then get
        // clearly different embeddings, so a prompt's group mass tracks its
        // flagged fraction and a flagged target adds a discrete bump.
        let degrees: Vec<f64> = stereotypes
            .iter()
            .map(|s| s.bias.values().fold(0.0f64, |m, &b| m.max(b)))
            .collect();
        let n = degrees.len() as f64;
        let mean = degrees.iter().sum::<f64>() / n;
        let var = degrees.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let steep = (0.2 * std).max(1e-12);
        let flag_thr = mean + 0.5 * std;
        let mut group_weight = HashMap::new();
        let mut quality = HashMap::new();
        for item in &dataset.items {
            let st = by_id[item.item_id.as_str()];
            let weights: Vec<f64> = dataset
                .group_set
                .iter()
                .map(|g| 1.0 / (1.0 + (-(st.bias[g] - flag_thr) / steep).exp()))
                .collect();
            let q = likes
                .get(item.item_id.as_str())
                .filter(|&&(_, n)| n > 0)
                .map_or(0.0, |&(l, n)| 2.0 * (l as f64 / n as f64) - 1.0);
            for &t in &item.title_tokens {
                group_weight.insert(t, weights.clone());
                quality.insert(t, q);
            }
        }
        let mut q_sum = 0.0;
        let mut f_sum = 0.0;
        let mut q_n = 0usize;
        for ix in &dataset.interactions {
            if let Some(item) = dataset.item(&ix.item_id) {
                if let Some(&t) = item.title_tokens.first() {
                    if let Some(&q) = quality.get(&t) {
                        q_sum += q;
                        q_n += 1;
                    }
                    if let Some(w) = group_weight.get(&t) {
                        f_sum += w.iter().fold(0.0f64, |m, &x| m.max(x));
                    }
                }
            }
        }
        let mean_quality = if q_n > 0 { q_sum / q_n as f64 } else { 0.0 };
        let mean_flag = if q_n > 0 { f_sum / q_n as f64 } else { 0.0 };
        Ok(Self {
            group_weight,
            quality,
            mean_quality,
            mean_flag,
        })
    }
}

/// Immutable scoring backbone.
#[derive(Debug, Clone)]
pub struct FrozenScorer {
    pub vocab: TokenVocabulary,
    pub d: usize,
    pub hidden: usize,
    pub seed: u64,
    pub beta: f64,
    embed: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
}

// Planted-unit shape constants; chosen so association and quality shifts
// move logits by a few tenths at beta = 1 while random weights keep base
// scores near 0.5.
const EMBED_SCALE: f64 = 0.08;
const ATTR_SCALE: f64 = 6.0;
const QUALITY_SCALE: f64 = 3.0;
const KAPPA_ASSOC: f64 = 2.5;
/// Fraction of a typical prompt's pooled group mass attributed to the
/// user's own group: history rows dominate the pool and most of them are
/// own-group items.
const ASSOC_CENTER: f64 = 0.75;
/// Places the own-group association unit below the tanh knee for a plain
/// history, so the explicit attribute shift moves it onto the steepest
/// region and amplifies the target's flag contribution.
const ASSOC_MARGIN: f64 = 1.0;
const GAIN_ASSOC: f64 = 5.0;
const KAPPA_QUALITY: f64 = 1.5;
const GAIN_QUALITY: f64 = 4.0;
const W2_SCALE: f64 = 0.15;

/// Intermediate forward state; reused by gradient computations.
pub(crate) struct ForwardState {
    #[cfg_attr(not(test), allow(dead_code))]
    pub pooled: Vec<f64>,
    pub hidden_act: Vec<f64>,
    pub like_prob: f64,
    pub rows: usize,
}

impl FrozenScorer {
    /// Deterministically construct a scorer from a seed.
    ///
    /// `beta` scales the planted-bias shifts; `beta = 0` leaves all
    /// group-attribute embeddings identical (zero).
    pub fn make(
        vocab: TokenVocabulary,
        d: usize,
        hidden: usize,
        seed: u64,
        beta: f64,
        plant: &PlantProfile,
    ) -> Result<Self, BackboneError> {
        let n_groups = vocab.n_groups as usize;
        if hidden < n_groups + 2 {
            return Err(BackboneError::HiddenTooSmall {
                hidden,
                needed: n_groups + 2,
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);

        // Orthonormal planted directions: one per group plus one for quality.
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(n_groups + 1);
        for _ in 0..=n_groups {
            let mut v: Vec<f64> = (0..d).map(|_| math::randn(&mut rng)).collect();
            for prev in &dirs {
                let proj = math::dot(&v, prev);
                math::axpy(-proj, prev, &mut v);
            }
            let norm = math::dot(&v, &v).sqrt();
            for x in &mut v {
                *x /= norm;
            }
            dirs.push(v);
        }
        let (group_dirs, quality_dir) = (&dirs[..n_groups], &dirs[n_groups]);

        let size = vocab.size as usize;
        let mut embed = vec![0.0; size * d];
        for t in 0..size {
            let token = t as TokenId;
            let is_attr = token >= 4 && token < vocab.item_floor();
            let row = &mut embed[t * d..(t + 1) * d];
            if !is_attr {
                for x in row.iter_mut() {
                    *x = EMBED_SCALE * math::randn(&mut rng);
                }
            } else {
                // Shared zero base so beta = 0 makes all attribute tokens
                // indistinguishable; the randn draws are still consumed to
                // keep the rest of the table independent of beta.
                for _ in 0..d {
                    math::randn(&mut rng);
                }
            }
            if is_attr {
                let g = (token - 4) as usize;
                // A single attribute token competes with every history row in
                // the mean pool, so it carries extra weight to stay audible.
                // The shift is centred across group directions: it raises the
                // token's own group projection and lowers the others, moving
                // decisions toward the group rather than uniformly upward.
                for (gi, dir) in group_dirs.iter().enumerate() {
                    let sign = if gi == g {
                        1.0 - 1.0 / n_groups as f64
                    } else {
                        -1.0 / n_groups as f64
                    };
                    math::axpy(beta * ATTR_SCALE * sign, dir, row);
                }
            }
            if let Some(weights) = plant.group_weight.get(&token) {
                for (g, &wgt) in weights.iter().enumerate() {
                    math::axpy(beta * wgt, &group_dirs[g], row);
                }
            }
            if let Some(&q) = plant.quality.get(&token) {
                // The target's quality row is diluted by the rest of the
                // prompt in the mean pool, so it also carries extra weight.
                math::axpy(beta * QUALITY_SCALE * q, quality_dir, row);
            }
        }

        let mut w1: Vec<f64> = (0..hidden * d)
            .map(|_| math::randn(&mut rng) / (d as f64).sqrt())
            .collect();
        let mut b1 = vec![0.0; hidden];
        let mut w2: Vec<f64> = (0..hidden)
            .map(|_| W2_SCALE * math::randn(&mut rng) / (hidden as f64).sqrt())
            .collect();
        // Planted hidden units: one association unit per group operating in
        // the convex region of tanh (negative bias), so aligned history and
        // target compound superlinearly, plus one monotone quality unit.
        // Centre each unit at the typical own-group flag mass of a history,
        // minus a margin keeping the resting point below the tanh knee.
        let assoc_bias = KAPPA_ASSOC * beta * plant.mean_flag * ASSOC_CENTER + ASSOC_MARGIN;
        for g in 0..n_groups {
            for (x, &dx) in w1[g * d..(g + 1) * d].iter_mut().zip(&group_dirs[g]) {
                *x = KAPPA_ASSOC * dx;
            }
            b1[g] = -assoc_bias;
            w2[g] = GAIN_ASSOC;
        }
        let qu = n_groups;
        for (x, &dx) in w1[qu * d..(qu + 1) * d].iter_mut().zip(quality_dir) {
            *x = KAPPA_QUALITY * dx;
        }
        // Centre at the typical history quality mass so the unit keeps its
        // slope where the target's quality contribution lands.
        b1[qu] = -KAPPA_QUALITY * beta * QUALITY_SCALE * plant.mean_quality * 0.85;
        w2[qu] = GAIN_QUALITY;

        // Cancel the planted units' resting activation so a typical prompt
        // scores near 0.5 instead of saturating low: the own-group unit sits
        // at -margin, the cross-group units near -assoc_bias.
        let b2 = GAIN_ASSOC
            * (ASSOC_MARGIN.tanh() + (n_groups as f64 - 1.0) * assoc_bias.tanh());

        Ok(Self {
            vocab,
            d,
            hidden,
            seed,
            beta,
            embed,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Shift the output bias so the median score over the given prompts
    /// lands exactly at `target` (in probability space). Keeps decisions
    /// selective instead of letting the planted units saturate every prompt
    /// above or below the threshold. No-op on an empty sample.
    pub fn center<'a, I>(&mut self, prompts: I, target: f64) -> Result<(), BackboneError>
    where
        I: IntoIterator<Item = &'a RecPrompt>,
    {
        let mut logits: Vec<f64> = prompts
            .into_iter()
            .map(|p| {
                let state = self.forward(&[], p)?;
                let y = state.like_prob.clamp(1e-12, 1.0 - 1e-12);
                Ok((y / (1.0 - y)).ln())
            })
            .collect::<Result<_, BackboneError>>()?;
        if logits.is_empty() {
            return Ok(());
        }
        logits.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mid = logits.len() / 2;
        let median = if logits.len() % 2 == 1 {
            logits[mid]
        } else {
            0.5 * (logits[mid - 1] + logits[mid])
        };
        let t = target.clamp(1e-12, 1.0 - 1e-12);
        self.b2 += (t / (1.0 - t)).ln() - median;
        Ok(())
    }

    /// Scorer with all weights zero: scores exactly 0.5 everywhere.
    pub fn zeros(vocab: TokenVocabulary, d: usize, hidden: usize) -> Self {
        let size = vocab.size as usize;
        Self {
            vocab,
            d,
            hidden,
            seed: 0,
            beta: 0.0,
            embed: vec![0.0; size * d],
            w1: vec![0.0; hidden * d],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    pub fn embedding(&self, token: TokenId) -> Result<&[f64], BackboneError> {
        if token >= self.vocab.size {
            return Err(BackboneError::TokenOutOfRange(token));
        }
        let t = token as usize;
        Ok(&self.embed[t * self.d..(t + 1) * self.d])
    }

    /// Mean-pooled embedding of a token sequence.
    pub fn mean_pool(&self, tokens: &[TokenId]) -> Result<Vec<f64>, BackboneError> {
        let mut pooled = vec![0.0; self.d];
        for &t in tokens {
            math::axpy(1.0, self.embedding(t)?, &mut pooled);
        }
        if !tokens.is_empty() {
            for x in &mut pooled {
                *x /= tokens.len() as f64;
            }
        }
        Ok(pooled)
    }

    pub(crate) fn forward(
        &self,
        soft_prompt: &[f64],
        prompt: &RecPrompt,
    ) -> Result<ForwardState, BackboneError> {
        if soft_prompt.len() % self.d != 0 {
            return Err(BackboneError::DimMismatch {
                got: soft_prompt.len(),
                want: self.d,
            });
        }
        let soft_rows = soft_prompt.len() / self.d;
        let rows = soft_rows + prompt.tokens.len();
        let mut pooled = vec![0.0; self.d];
        for r in 0..soft_rows {
            math::axpy(1.0, &soft_prompt[r * self.d..(r + 1) * self.d], &mut pooled);
        }
        for &t in &prompt.tokens {
            math::axpy(1.0, self.embedding(t)?, &mut pooled);
        }
        if rows > 0 {
            for x in &mut pooled {
                *x /= rows as f64;
            }
        }
        let pre = math::matvec(&self.w1, self.hidden, self.d, &pooled);
        let hidden_act: Vec<f64> = pre
            .iter()
            .zip(&self.b1)
            .map(|(&p, &b)| (p + b).tanh())
            .collect();
        let logit = math::dot(&self.w2, &hidden_act) + self.b2;
        Ok(ForwardState {
            pooled,
            hidden_act,
            like_prob: math::sigmoid(logit),
            rows,
        })
    }

    /// Like-probability for a prompt with an optional soft prompt prefix
    /// (`soft_prompt` is a row-major `L x d` block; empty slice for none).
    pub fn score(&self, soft_prompt: &[f64], prompt: &RecPrompt) -> Result<f64, BackboneError> {
        Ok(self.forward(soft_prompt, prompt)?.like_prob)
    }

    /// Gradient of the like-probability w.r.t. the pooled mean, divided by
    /// the row count: the shared row of the soft-prompt input gradient.
    pub(crate) fn input_grad_row(&self, state: &ForwardState) -> Vec<f64> {
        let dy = state.like_prob * (1.0 - state.like_prob);
        let dhidden: Vec<f64> = self
            .w2
            .iter()
            .zip(&state.hidden_act)
            .map(|(&w, &z)| dy * w * (1.0 - z * z))
            .collect();
        let mut row = math::matvec_t(&self.w1, self.hidden, self.d, &dhidden);
        let denom = state.rows.max(1) as f64;
        for x in &mut row {
            *x /= denom;
        }
        row
    }

    /// Like-probability and the full `L x d` gradient of the probability
    /// w.r.t. the soft-prompt rows (all rows identical under mean pooling).
    pub fn score_with_input_grad(
        &self,
        soft_prompt: &[f64],
        prompt: &RecPrompt,
    ) -> Result<(f64, Vec<f64>), BackboneError> {
        let state = self.forward(soft_prompt, prompt)?;
        let row = self.input_grad_row(&state);
        let soft_rows = soft_prompt.len() / self.d;
        let mut grad = Vec::with_capacity(soft_rows * self.d);
        for _ in 0..soft_rows {
            grad.extend_from_slice(&row);
        }
        Ok((state.like_prob, grad))
    }

    fn serialize_weights(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&self.vocab.size.to_le_bytes());
        buf.extend_from_slice(&self.vocab.n_groups.to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.hidden as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.beta as f32).to_le_bytes());
        for arr in [&self.embed, &self.w1, &self.b1, &self.w2] {
            for &x in arr.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&(self.b2 as f32).to_le_bytes());
        buf
    }

    /// Content hash of the frozen weights.
    pub fn weights_digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize_weights());
        hex(&hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<(), BackboneError> {
        let mut buf = self.serialize_weights();
        let mut hasher = Sha256::new();
        hasher.update(&buf);
        buf.extend_from_slice(&hasher.finalize());
        std::fs::write(path, &buf).map_err(|e| BackboneError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, BackboneError> {
        let buf = std::fs::read(path).map_err(|e| BackboneError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let corrupt = |msg: &str| BackboneError::Corrupt(msg.to_string());
        if buf.len() < MAGIC.len() + 24 + 32 || &buf[..5] != MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let (payload, digest) = buf.split_at(buf.len() - 32);
        let mut hasher = Sha256::new();
        hasher.update(payload);
        if hasher.finalize().as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let mut off = 5usize;
        let mut read_u32 = |buf: &[u8]| -> u32 {
            let v = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap());
            off += 4;
            v
        };
        let size = read_u32(payload);
        let n_groups = read_u32(payload);
        let d = read_u32(payload) as usize;
        let hidden = read_u32(payload) as usize;
        let seed = u64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
        off += 8;
        let mut read_f32s = |n: usize| -> Result<Vec<f64>, BackboneError> {
            if payload.len() < off + 4 * n {
                return Err(BackboneError::Corrupt("truncated weights".into()));
            }
            let out = (0..n)
                .map(|i| {
                    f32::from_le_bytes(payload[off + 4 * i..off + 4 * i + 4].try_into().unwrap())
                        as f64
                })
                .collect();
            off += 4 * n;
            Ok(out)
        };
        let beta = read_f32s(1)?[0];
        let embed = read_f32s(size as usize * d)?;
        let w1 = read_f32s(hidden * d)?;
        let b1 = read_f32s(hidden)?;
        let w2 = read_f32s(hidden)?;
        let b2 = read_f32s(1)?[0];
        if off != payload.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Self {
            vocab: TokenVocabulary::new(n_groups, size),
            d,
            hidden,
            seed,
            beta,
            embed,
            w1,
            b1,
            w2,
            b2,
        })
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};

    fn synth() -> InteractionDataset {
        generate_synthetic(
            &SynthConfig {
                n_users: 80,
                n_items: 60,
                group_ratio: vec![0.5, 0.5],
                group_labels: vec!["a".into(), "b".into()],
                affinity: 0.85,
                rating_scale: 5,
                interactions_per_user: 15,
                neutral_fraction: 0.2,
            },
            21,
        )
        .unwrap()
    }

    fn scorer_for(ds: &InteractionDataset, beta: f64, seed: u64) -> FrozenScorer {
        let vocab = TokenVocabulary::from_dataset(ds).unwrap();
        let plant = PlantProfile::from_dataset(ds).unwrap();
        FrozenScorer::make(vocab, 16, 24, seed, beta, &plant).unwrap()
    }

    fn some_sequences(ds: &InteractionDataset, n: usize) -> Vec<Sequence> {
        crate::dataset::build_sequences(ds, n, 3).unwrap().sequences
    }

    #[test]
    fn zero_weight_scorer_gives_half() {
        let ds = synth();
        let vocab = TokenVocabulary::from_dataset(&ds).unwrap();
        let scorer = FrozenScorer::zeros(vocab.clone(), 8, 8);
        let seq = &some_sequences(&ds, 1)[0];
        let prompt = tokenize_rec_prompt(seq, &ds, EvalSetting::Implicit, &vocab).unwrap();
        assert_eq!(scorer.score(&[], &prompt).unwrap(), 0.5);
    }

    #[test]
    fn same_seed_same_digest() {
        let ds = synth();
        let a = scorer_for(&ds, 1.0, 7);
        let b = scorer_for(&ds, 1.0, 7);
        assert_eq!(a.weights_digest(), b.weights_digest());
        let c = scorer_for(&ds, 1.0, 8);
        assert_ne!(a.weights_digest(), c.weights_digest());
    }

    #[test]
    fn beta_zero_makes_attribute_swap_invisible() {
        let ds = synth();
        let scorer = scorer_for(&ds, 0.0, 5);
        let vocab = scorer.vocab.clone();
        for seq in some_sequences(&ds, 100) {
            let explicit =
                tokenize_rec_prompt(&seq, &ds, EvalSetting::Explicit, &vocab).unwrap();
            let counter =
                tokenize_rec_prompt(&seq, &ds, EvalSetting::Counterfactual, &vocab).unwrap();
            let ye = scorer.score(&[], &explicit).unwrap();
            let yc = scorer.score(&[], &counter).unwrap();
            assert!((ye - yc).abs() < 1e-12);
        }
    }

    #[test]
    fn implicit_prompt_ignores_group_field() {
        let ds = synth();
        let vocab = TokenVocabulary::from_dataset(&ds).unwrap();
        for seq in some_sequences(&ds, 20) {
            let prompt = tokenize_rec_prompt(&seq, &ds, EvalSetting::Implicit, &vocab).unwrap();
            let attrs: Vec<TokenId> = (0..ds.group_set.len())
                .map(|g| vocab.group_attr(g))
                .collect();
            assert!(prompt.tokens.iter().all(|t| !attrs.contains(t)));
        }
    }

    #[test]
    fn explicit_and_counterfactual_prefix() {
        let ds = synth();
        let vocab = TokenVocabulary::from_dataset(&ds).unwrap();
        let seq = &some_sequences(&ds, 1)[0];
        let g = ds.user_group_index(&seq.user_id).unwrap();
        let explicit = tokenize_rec_prompt(seq, &ds, EvalSetting::Explicit, &vocab).unwrap();
        assert_eq!(explicit.tokens[0], vocab.group_attr(g));
        let counter = tokenize_rec_prompt(seq, &ds, EvalSetting::Counterfactual, &vocab).unwrap();
        assert_eq!(counter.tokens[0], vocab.group_attr((g + 1) % 2));
        assert_eq!(explicit.tokens.len(), counter.tokens.len());
    }

    #[test]
    fn score_is_permutation_invariant() {
        let ds = synth();
        let scorer = scorer_for(&ds, 1.0, 9);
        let seq = &some_sequences(&ds, 1)[0];
        let prompt = tokenize_rec_prompt(seq, &ds, EvalSetting::Implicit, &scorer.vocab).unwrap();
        let mut reversed = prompt.clone();
        reversed.tokens.reverse();
        let a = scorer.score(&[], &prompt).unwrap();
        let b = scorer.score(&[], &reversed).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let ds = synth();
        let scorer = scorer_for(&ds, 1.0, 11);
        let seqs = some_sequences(&ds, 5);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        for seq in &seqs {
            let prompt =
                tokenize_rec_prompt(seq, &ds, EvalSetting::Implicit, &scorer.vocab).unwrap();
            let l = 3;
            let mut e: Vec<f64> = (0..l * scorer.d).map(|_| 0.5 * rng.gen::<f64>()).collect();
            let (_, grad) = scorer.score_with_input_grad(&e, &prompt).unwrap();
            let h = 1e-5;
            for i in (0..e.len()).step_by(7) {
                let orig = e[i];
                e[i] = orig + h;
                let yp = scorer.score(&e, &prompt).unwrap();
                e[i] = orig - h;
                let ym = scorer.score(&e, &prompt).unwrap();
                e[i] = orig;
                let numeric = (yp - ym) / (2.0 * h);
                let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
                assert!(
                    ((grad[i] - numeric) / denom).abs() < 1e-5,
                    "{} vs {}",
                    grad[i],
                    numeric
                );
            }
            // rows identical under mean pooling
            for r in 1..l {
                for c in 0..scorer.d {
                    assert_eq!(grad[c], grad[r * scorer.d + c]);
                }
            }
        }
    }

    #[test]
    fn zero_weight_scorer_has_zero_gradient() {
        let ds = synth();
        let vocab = TokenVocabulary::from_dataset(&ds).unwrap();
        let scorer = FrozenScorer::zeros(vocab.clone(), 8, 8);
        let seq = &some_sequences(&ds, 1)[0];
        let prompt = tokenize_rec_prompt(seq, &ds, EvalSetting::Implicit, &vocab).unwrap();
        let e = vec![0.3; 2 * 8];
        let (y, grad) = scorer.score_with_input_grad(&e, &prompt).unwrap();
        assert_eq!(y, 0.5);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_soft_prompt_changes_only_the_denominator() {
        let ds = synth();
        let scorer = scorer_for(&ds, 1.0, 2);
        let seq = &some_sequences(&ds, 1)[0];
        let prompt = tokenize_rec_prompt(seq, &ds, EvalSetting::Implicit, &scorer.vocab).unwrap();
        let zeros = vec![0.0; 4 * scorer.d];
        let with_rows = scorer.forward(&zeros, &prompt).unwrap();
        let without = scorer.forward(&[], &prompt).unwrap();
        // direct re-evaluation: pooled means differ exactly by the row count
        let t = prompt.tokens.len() as f64;
        for (a, b) in with_rows.pooled.iter().zip(&without.pooled) {
            assert!((a * (t + 4.0) - b * t).abs() < 1e-12);
        }
    }

    #[test]
    fn planted_bias_raises_consistent_scores() {
        let ds = synth();
        let scorer = scorer_for(&ds, 1.0, 13);
        let audit = crate::stereotype::audit_items(&ds, 1.0, 3).unwrap();
        let flags = audit.flag_index(&ds.group_set);
        let mut consistent = Vec::new();
        let mut inconsistent = Vec::new();
        for seq in some_sequences(&ds, 400) {
            let Some(item_group) = flags.flag_of(&seq.target.item_id) else {
                continue;
            };
            let prompt =
                tokenize_rec_prompt(&seq, &ds, EvalSetting::Implicit, &scorer.vocab).unwrap();
            let y = scorer.score(&[], &prompt).unwrap();
            if ds.user_group_index(&seq.user_id).unwrap() == item_group {
                consistent.push(y);
            } else {
                inconsistent.push(y);
            }
        }
        assert!(consistent.len() > 10 && inconsistent.len() > 10);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&consistent) > mean(&inconsistent),
            "consistent {} <= inconsistent {}",
            mean(&consistent),
            mean(&inconsistent)
        );
    }

    #[test]
    fn save_load_round_trip_preserves_digest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth();
        let scorer = scorer_for(&ds, 1.0, 17);
        let path = dir.path().join("scorer.bin");
        scorer.save(&path).unwrap();
        let loaded = FrozenScorer::load(&path).unwrap();
        assert_eq!(loaded.weights_digest(), {
            // digest is defined over the f32 serialization, so save/load
            // must be a fixed point
            let mut resaved = dir.path().join("scorer2.bin");
            loaded.save(&resaved).unwrap();
            resaved = path;
            let again = FrozenScorer::load(&resaved).unwrap();
            again.weights_digest()
        });
        assert_eq!(loaded.d, scorer.d);
        assert_eq!(loaded.vocab, scorer.vocab);
    }
}
