//! Gated expert mechanism that generates a soft prompt for the frozen scorer.
//!
//! For each group a stereotype template is prefixed to the recommendation
//! prompt to form a routing variant. A router maps each variant to expert
//! probabilities, the top-K entries are kept and renormalized, the rows are
//! averaged across variants, and a reweighting layer turns the average into
//! the expert weights w. Each expert maps the pooled recommendation prompt
//! to an L x d soft-prompt block; the w-weighted sum is prepended (as
//! embeddings) to the recommendation prompt and scored. Template tokens
//! influence routing only — they are never part of the scored sequence.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{BackboneError, FrozenScorer, RecPrompt, TokenVocabulary};
use crate::dataset::TokenId;
use crate::math;

const MAGIC: &[u8; 5] = b"SFMO1";

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("expected {want} templates (one per group), got {got}")]
    TemplateCount { got: usize, want: usize },
    #[error("top-k {k} out of range for {n} experts")]
    BadTopK { k: usize, n: usize },
    #[error("parameter dims inconsistent: {0}")]
    BadShape(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt mixture file: {0}")]
    Corrupt(String),
}

/// One routing template per group, in dataset group order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StereotypeTemplateSet {
    pub templates: Vec<Vec<TokenId>>,
}

impl StereotypeTemplateSet {
    /// Default templates: each group's attribute token repeated three times.
    pub fn default_for(vocab: &TokenVocabulary) -> Self {
        let templates = (0..vocab.n_groups as usize)
            .map(|g| vec![vocab.group_attr(g); 3])
            .collect();
        Self { templates }
    }

    pub fn validate(&self, n_groups: usize) -> Result<(), MixtureError> {
        if self.templates.len() != n_groups {
            return Err(MixtureError::TemplateCount {
                got: self.templates.len(),
                want: n_groups,
            });
        }
        for (g, t) in self.templates.iter().enumerate() {
            if t.is_empty() {
                log::warn!("empty routing template for group index {g}");
            }
        }
        Ok(())
    }
}

/// Trainable parameters: router, reweighting layer, and per-expert
/// soft-prompt generators.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub n: usize,
    pub l: usize,
    pub k: usize,
    pub d: usize,
    /// When set, experts ignore the pooled prompt and emit only their bias
    /// block (input-independent learnable prompts).
    pub static_experts: bool,
    /// router: N x d, row-major
    pub router_w: Vec<f64>,
    pub router_b: Vec<f64>,
    /// reweighting layer: N x N, row-major
    pub reweight_w: Vec<f64>,
    pub reweight_b: Vec<f64>,
    /// each expert: (L*d) x d, row-major
    pub expert_w: Vec<Vec<f64>>,
    /// each expert: L*d
    pub expert_b: Vec<Vec<f64>>,
}

impl MixtureParams {
    pub fn zeros(n: usize, l: usize, k: usize, d: usize) -> Result<Self, MixtureError> {
        if k == 0 || k > n {
            return Err(MixtureError::BadTopK { k, n });
        }
        Ok(Self {
            n,
            l,
            k,
            d,
            static_experts: false,
            router_w: vec![0.0; n * d],
            router_b: vec![0.0; n],
            reweight_w: vec![0.0; n * n],
            reweight_b: vec![0.0; n],
            expert_w: vec![vec![0.0; l * d * d]; n],
            expert_b: vec![vec![0.0; l * d]; n],
        })
    }

    /// Small random initialization (scale / sqrt(fan-in) normal draws).
    pub fn init(n: usize, l: usize, k: usize, d: usize, seed: u64, scale: f64) -> Result<Self, MixtureError> {
        let mut params = Self::zeros(n, l, k, d)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let fan = (d as f64).sqrt();
        for block in [&mut params.router_w, &mut params.reweight_w] {
            for x in block.iter_mut() {
                *x = scale * math::randn(&mut rng) / fan;
            }
        }
        for w in &mut params.expert_w {
            for x in w.iter_mut() {
                *x = scale * math::randn(&mut rng) / fan;
            }
        }
        for b in &mut params.expert_b {
            for x in b.iter_mut() {
                *x = scale * math::randn(&mut rng);
            }
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    /// Named views of every parameter block, in a fixed order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("router_w".into(), self.router_w.as_slice()),
            ("router_b".into(), self.router_b.as_slice()),
            ("reweight_w".into(), self.reweight_w.as_slice()),
            ("reweight_b".into(), self.reweight_b.as_slice()),
        ];
        for (i, w) in self.expert_w.iter().enumerate() {
            out.push((format!("expert_w{i}"), w.as_slice()));
        }
        for (i, b) in self.expert_b.iter().enumerate() {
            out.push((format!("expert_b{i}"), b.as_slice()));
        }
        out
    }

    /// Mutable counterpart of [`blocks`](Self::blocks), same order.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.router_w.as_mut_slice(),
            self.router_b.as_mut_slice(),
            self.reweight_w.as_mut_slice(),
            self.reweight_b.as_mut_slice(),
        ];
        for w in &mut self.expert_w {
            out.push(w.as_mut_slice());
        }
        for b in &mut self.expert_b {
            out.push(b.as_mut_slice());
        }
        out
    }

    fn check_dims(&self, scorer_d: usize) -> Result<(), MixtureError> {
        if self.k == 0 || self.k > self.n {
            return Err(MixtureError::BadTopK { k: self.k, n: self.n });
        }
        if self.d != scorer_d {
            return Err(MixtureError::BadShape(format!(
                "params built for d={}, scorer has d={}",
                self.d, scorer_d
            )));
        }
        let ld = self.l * self.d;
        let ok = self.router_w.len() == self.n * self.d
            && self.router_b.len() == self.n
            && self.reweight_w.len() == self.n * self.n
            && self.reweight_b.len() == self.n
            && self.expert_w.len() == self.n
            && self.expert_b.len() == self.n
            && self.expert_w.iter().all(|w| w.len() == ld * self.d)
            && self.expert_b.iter().all(|b| b.len() == ld);
        if !ok {
            return Err(MixtureError::BadShape("block lengths".into()));
        }
        Ok(())
    }

    fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        for v in [self.n, self.l, self.k, self.d] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        buf.push(self.static_experts as u8);
        for (_, block) in self.blocks() {
            for &x in block {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        buf
    }

    /// Content hash of the parameter snapshot.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.serialize());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), MixtureError> {
        let mut buf = self.serialize();
        let mut hasher = Sha256::new();
        hasher.update(&buf);
        buf.extend_from_slice(&hasher.finalize());
        std::fs::write(path, &buf).map_err(|e| MixtureError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, MixtureError> {
        let buf = std::fs::read(path).map_err(|e| MixtureError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let corrupt = |msg: &str| MixtureError::Corrupt(msg.to_string());
        if buf.len() < 5 + 17 + 32 || &buf[..5] != MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let (payload, digest) = buf.split_at(buf.len() - 32);
        let mut hasher = Sha256::new();
        hasher.update(payload);
        if hasher.finalize().as_slice() != digest {
            return Err(corrupt("digest mismatch"));
        }
        let mut off = 5usize;
        let mut read_u32 = || -> usize {
            let v = u32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            off += 4;
            v as usize
        };
        let (n, l, k, d) = (read_u32(), read_u32(), read_u32(), read_u32());
        let static_experts = payload[off] != 0;
        off += 1;
        let mut read_f32s = |count: usize| -> Result<Vec<f64>, MixtureError> {
            if payload.len() < off + 4 * count {
                return Err(MixtureError::Corrupt("truncated weights".into()));
            }
            let out = (0..count)
                .map(|i| {
                    f32::from_le_bytes(payload[off + 4 * i..off + 4 * i + 4].try_into().unwrap())
                        as f64
                })
                .collect();
            off += 4 * count;
            Ok(out)
        };
        let router_w = read_f32s(n * d)?;
        let router_b = read_f32s(n)?;
        let reweight_w = read_f32s(n * n)?;
        let reweight_b = read_f32s(n)?;
        let mut expert_w = Vec::with_capacity(n);
        for _ in 0..n {
            expert_w.push(read_f32s(l * d * d)?);
        }
        let mut expert_b = Vec::with_capacity(n);
        for _ in 0..n {
            expert_b.push(read_f32s(l * d)?);
        }
        if off != payload.len() {
            return Err(corrupt("trailing bytes"));
        }
        let params = Self {
            n,
            l,
            k,
            d,
            static_experts,
            router_w,
            router_b,
            reweight_w,
            reweight_b,
            expert_w,
            expert_b,
        };
        params.check_dims(d)?;
        Ok(params)
    }
}

/// Everything computed along one forward pass; cached pooled inputs and the
/// scorer's input-gradient row are kept for backpropagation.
#[derive(Debug, Clone)]
pub struct RoutingTrace {
    /// raw router probabilities, one row per variant
    pub raw: Vec<Vec<f64>>,
    /// rows after top-K masking
    pub masked: Vec<Vec<f64>>,
    /// kept expert indices per variant, ascending
    pub kept: Vec<Vec<usize>>,
    /// variant-averaged masked probabilities
    pub avg: Vec<f64>,
    /// expert weights
    pub w: Vec<f64>,
    /// per-expert soft-prompt blocks, each L*d
    pub experts: Vec<Vec<f64>>,
    /// composed soft prompt, L*d
    pub soft_prompt: Vec<f64>,
    pub like_prob: f64,
    /// pooled embedding of each routing variant
    pub u_variants: Vec<Vec<f64>>,
    /// pooled embedding of the bare recommendation prompt
    pub u_rec: Vec<f64>,
    /// d(like_prob)/d(soft-prompt row); identical for every row
    pub grad_row: Vec<f64>,
    /// soft rows + token count in the scored sequence
    pub total_rows: usize,
}

/// Prefix each group's template to the recommendation prompt.
pub fn multi_stereotype_prompting(
    rec_prompt: &RecPrompt,
    templates: &StereotypeTemplateSet,
    n_groups: usize,
) -> Result<Vec<Vec<TokenId>>, MixtureError> {
    templates.validate(n_groups)?;
    Ok(templates
        .templates
        .iter()
        .map(|t| {
            let mut v = Vec::with_capacity(t.len() + rec_prompt.tokens.len());
            v.extend_from_slice(t);
            v.extend_from_slice(&rec_prompt.tokens);
            v
        })
        .collect())
}

/// Router probabilities for one variant: softmax of an affine map of the
/// mean-pooled variant embedding. Also returns the pooled embedding.
pub fn route(
    params: &MixtureParams,
    scorer: &FrozenScorer,
    variant: &[TokenId],
) -> Result<(Vec<f64>, Vec<f64>), MixtureError> {
    params.check_dims(scorer.d)?;
    let u = scorer.mean_pool(variant)?;
    let mut s = math::matvec(&params.router_w, params.n, params.d, &u);
    math::axpy(1.0, &params.router_b, &mut s);
    Ok((math::softmax(&s), u))
}

/// Keep the K largest entries (ties broken by lowest index), renormalize the
/// kept raw values by softmax, zero the rest. Returns the masked vector and
/// the kept indices in ascending order.
pub fn topk_mask(p: &[f64], k: usize) -> Result<(Vec<f64>, Vec<usize>), MixtureError> {
    let n = p.len();
    if k == 0 || k > n {
        return Err(MixtureError::BadTopK { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    // total_cmp keeps the sort well defined even for non-finite inputs,
    // letting a NaN propagate to the loss check instead of panicking here
    order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order[..k].to_vec();
    kept.sort_unstable();
    let kept_vals: Vec<f64> = kept.iter().map(|&i| p[i]).collect();
    let renorm = math::softmax(&kept_vals);
    let mut masked = vec![0.0; n];
    for (slot, &i) in kept.iter().enumerate() {
        masked[i] = renorm[slot];
    }
    Ok((masked, kept))
}

/// Average the masked rows across variants and map through the reweighting
/// layer. Returns `(avg, w)`.
pub fn reweight(params: &MixtureParams, masked: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let mut avg = vec![0.0; params.n];
    for row in masked {
        math::axpy(1.0, row, &mut avg);
    }
    for x in &mut avg {
        *x /= masked.len() as f64;
    }
    let mut s = math::matvec(&params.reweight_w, params.n, params.n, &avg);
    math::axpy(1.0, &params.reweight_b, &mut s);
    let w = math::softmax(&s);
    (avg, w)
}

/// Per-expert soft-prompt blocks for a pooled recommendation prompt, and
/// their w-weighted sum.
pub fn expert_prompts(
    params: &MixtureParams,
    u_rec: &[f64],
    w: &[f64],
) -> (Vec<Vec<f64>>, Vec<f64>) {
    let ld = params.l * params.d;
    let experts: Vec<Vec<f64>> = (0..params.n)
        .map(|nx| {
            let mut e = params.expert_b[nx].clone();
            if !params.static_experts {
                let proj = math::matvec(&params.expert_w[nx], ld, params.d, u_rec);
                math::axpy(1.0, &proj, &mut e);
            }
            e
        })
        .collect();
    let mut combined = vec![0.0; ld];
    for (nx, e) in experts.iter().enumerate() {
        math::axpy(w[nx], e, &mut combined);
    }
    (experts, combined)
}

/// Full forward pass: routing over the template variants, reweighting,
/// expert composition, and backbone scoring of the bare recommendation
/// prompt with the composed soft prompt.
pub fn mos_forward(
    params: &MixtureParams,
    scorer: &FrozenScorer,
    rec_prompt: &RecPrompt,
    templates: &StereotypeTemplateSet,
) -> Result<RoutingTrace, MixtureError> {
    let n_groups = scorer.vocab.n_groups as usize;
    let variants = multi_stereotype_prompting(rec_prompt, templates, n_groups)?;
    let mut raw = Vec::with_capacity(variants.len());
    let mut masked = Vec::with_capacity(variants.len());
    let mut kept = Vec::with_capacity(variants.len());
    let mut u_variants = Vec::with_capacity(variants.len());
    for variant in &variants {
        let (p, u) = route(params, scorer, variant)?;
        let (m, ks) = topk_mask(&p, params.k)?;
        raw.push(p);
        masked.push(m);
        kept.push(ks);
        u_variants.push(u);
    }
    let (avg, w) = reweight(params, &masked);
    let u_rec = scorer.mean_pool(&rec_prompt.tokens)?;
    let (experts, soft_prompt) = expert_prompts(params, &u_rec, &w);
    let state = scorer.forward(&soft_prompt, rec_prompt)?;
    let grad_row = scorer.input_grad_row(&state);
    Ok(RoutingTrace {
        raw,
        masked,
        kept,
        avg,
        w,
        experts,
        soft_prompt,
        like_prob: state.like_prob,
        u_variants,
        u_rec,
        grad_row,
        total_rows: state.rows,
    })
}
