//! Visual expression generator.
//!
//! Step 1 scores every last-stage visual token against every linguistic cue
//! by cosine similarity in a joint space and keeps the `N_p` best tokens per
//! cue (Gumbel-perturbed during training, with a straight-through mask).
//! Step 2 sums the kept tokens, refines them with masked cross-attention over
//! the vision tokens, and lets the cues share attributes through
//! self-attention. The result is one visual token per cue.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{AttentionBlock, Init, Linear, ParamId, Session};
use crate::rng::sample_gumbel;
use crate::scalar::Real;
use crate::tape::{RowMap, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VegConfig {
    pub dim: usize,
    pub joint_dim: usize,
    pub vision_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub ratio: f64,
    pub tau_init: f64,
    /// Token retrieval; when off every valid cue keeps all visual tokens.
    pub step1: bool,
    /// Refinement; when off the aggregated tokens are the output.
    pub step2: bool,
    pub global_cue: bool,
    pub local_cue: bool,
}

/// `N_p = max(1, ⌊r·N⌋)`.
pub fn retrieval_count(ratio: f64, n: usize) -> Result<usize> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(alloc::format!("retrieval ratio {ratio} must lie in (0, 1]")));
    }
    Ok((libm::floor(ratio * n as f64) as usize).clamp(1, n.max(1)))
}

/// Indices of the `k` largest entries, ties to the lower index, returned in
/// increasing index order.
pub fn top_k_indices<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(core::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// `S_c [L × N]` with the projected tokens it was computed from.
#[derive(Debug, Clone, Copy)]
pub struct RelevanceMap {
    pub scores: Var,
    pub vision: Var,
    pub language: Var,
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    /// `S′`, present in training mode.
    pub perturbed: Option<Var>,
    /// Hard mask on the tape; straight-through in training mode.
    pub mask_var: Var,
    /// `M` row-major `[L × N]`.
    pub mask: Vec<bool>,
    pub indices: Vec<Vec<usize>>,
    pub n_p: usize,
    pub tau: f64,
    pub rows: usize,
    pub cols: usize,
}

impl RetrievalResult {
    pub fn mask_row(&self, j: usize) -> &[bool] {
        &self.mask[j * self.cols..(j + 1) * self.cols]
    }
}

/// Ground-truth pixel sets on the last-stage grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastiveTargets {
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl ContrastiveTargets {
    pub fn from_labels(labels: &[bool]) -> Self {
        let (mut positive, mut negative) = (Vec::new(), Vec::new());
        for (i, &l) in labels.iter().enumerate() {
            if l {
                positive.push(i)
            } else {
                negative.push(i)
            }
        }
        Self { positive, negative }
    }

    /// Downsamples an `[h × w]` mask onto a `grid × grid` lattice; a cell is
    /// positive when at least half of its pixels are.
    pub fn from_mask(mask: &[bool], height: usize, width: usize, grid: usize) -> Result<Self> {
        if mask.len() != height * width || grid == 0 || height % grid != 0 || width % grid != 0 {
            return Err(Error::shape("contrastive_targets", &[height, width], &[grid, grid]));
        }
        let (ch, cw) = (height / grid, width / grid);
        let labels: Vec<bool> = (0..grid * grid)
            .map(|cell| {
                let (gy, gx) = (cell / grid, cell % grid);
                let mut on = 0;
                for y in gy * ch..(gy + 1) * ch {
                    on += mask[y * width + gx * cw..y * width + (gx + 1) * cw].iter().filter(|&&m| m).count();
                }
                2 * on >= ch * cw
            })
            .collect();
        Ok(Self::from_labels(&labels))
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels<T: Real>(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.len()];
        for &p in &self.positive {
            out[p] = T::one();
        }
        out
    }
}

/// Tokens after each stage of the generator. Intermediate stages hold the
/// cue rows only (in `cues` order); `expression` is scattered back to all
/// `L` rows with zeros on non-cue rows.
#[derive(Debug, Clone)]
pub struct VisualExpression {
    pub aggregated: Var,
    pub attended: Option<Var>,
    pub refined: Option<Var>,
    pub shared: Option<Var>,
    pub expression: Var,
    pub cues: Vec<usize>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct VegOutput {
    pub relevance: RelevanceMap,
    pub retrieval: RetrievalResult,
    pub expression: VisualExpression,
    pub contrastive_loss: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct VisualExpressionGenerator {
    pub cfg: VegConfig,
    pub project_vision: Linear,
    pub project_language: Linear,
    pub log_tau: ParamId,
    /// Log of the logit scale applied to the global relevance row in the
    /// contrastive loss.
    pub log_scale: ParamId,
    pub aggregate: Linear,
    pub refine: AttentionBlock,
    pub share: AttentionBlock,
}

impl VisualExpressionGenerator {
    pub fn new<T: Real, R: Rng>(init: &mut Init<'_, T, R>, cfg: VegConfig) -> Result<Self> {
        retrieval_count(cfg.ratio, 1)?;
        if !(cfg.tau_init > 0.0) {
            return Err(Error::invalid("tau must be positive"));
        }
        Ok(Self {
            cfg,
            project_vision: Linear::new(init, "veg.project_vision", cfg.vision_dim, cfg.joint_dim)?,
            project_language: Linear::new(init, "veg.project_language", cfg.dim, cfg.joint_dim)?,
            log_tau: init.constant("veg.log_tau", &[1], libm::log(cfg.tau_init))?,
            log_scale: init.zeros("veg.log_scale", &[1])?,
            aggregate: Linear::new(init, "veg.aggregate", cfg.vision_dim, cfg.dim)?,
            refine: AttentionBlock::new(init, "veg.refine", cfg.dim, cfg.vision_dim, cfg.heads, cfg.mlp_ratio)?,
            share: AttentionBlock::new(init, "veg.share", cfg.dim, cfg.dim, cfg.heads, cfg.mlp_ratio)?,
        })
    }

    /// Rows of the linguistic tokens that act as retrieval cues.
    pub fn cue_rows(&self, valid: &[bool], articles: &[bool]) -> Vec<bool> {
        let (g, l) = if !self.cfg.global_cue && !self.cfg.local_cue {
            (true, true)
        } else {
            (self.cfg.global_cue, self.cfg.local_cue)
        };
        valid
            .iter()
            .enumerate()
            .map(|(j, &v)| v && if j == 0 { g } else { l && !articles.get(j).copied().unwrap_or(false) })
            .collect()
    }

    /// Retrieval is skipped when step 1 is off or both cue kinds are off.
    fn retrieves(&self) -> bool {
        self.cfg.step1 && (self.cfg.global_cue || self.cfg.local_cue)
    }

    pub fn forward<T: Real>(
        &self,
        s: &mut Session<'_, T>,
        fv: Var,
        advanced: Var,
        cues: &[bool],
        targets: Option<&ContrastiveTargets>,
        mode: Mode,
        seed: u64,
    ) -> Result<VegOutput> {
        if !cues.iter().any(|&c| c) {
            return Err(Error::invalid("visual expression needs at least one cue row"));
        }
        let relevance = compute_relevance(s, &self.project_vision, &self.project_language, fv, advanced)?;
        let (l, n) = (s.value(relevance.scores).rows(), s.value(relevance.scores).cols());
        let retrieval = if self.retrieves() {
            let tau = s.param(self.log_tau);
            retrieve_informative_tokens(s, relevance.scores, cues, self.cfg.ratio, tau, mode, seed)?
        } else {
            full_retrieval(s, cues, l, n)
        };
        let contrastive_loss = match targets {
            Some(t) => {
                let global = s.tape.gather_rows(relevance.scores, &[0])?;
                let log_scale = s.param(self.log_scale);
                let scale = s.tape.exp(log_scale)?;
                let logits = s.tape.mul_scalar(global, scale)?;
                Some(pixel_contrastive_loss(s, logits, t)?)
            }
            None => None,
        };
        let expression = self.expression(s, fv, &retrieval, cues)?;
        Ok(VegOutput {
            relevance,
            retrieval,
            expression,
            contrastive_loss,
        })
    }

    fn expression<T: Real>(&self, s: &mut Session<'_, T>, fv: Var, retrieval: &RetrievalResult, cues: &[bool]) -> Result<VisualExpression> {
        let l = cues.len();
        let cue_idx: Vec<usize> = (0..l).filter(|&j| cues[j]).collect();
        let aggregated = aggregate_retrieved(s, &self.aggregate, fv, retrieval.mask_var)?;
        let fa = s.tape.gather_rows(aggregated, &cue_idx)?;
        let scatter = Arc::new(RowMap::scatter(l, &cue_idx));
        if !self.cfg.step2 {
            let expression = s.tape.row_mix(fa, scatter)?;
            return Ok(VisualExpression {
                aggregated: fa,
                attended: None,
                refined: None,
                shared: None,
                expression,
                cues: cue_idx,
                valid: cues.to_vec(),
            });
        }
        let n = retrieval.cols;
        let mut mask = Vec::with_capacity(cue_idx.len() * n);
        for &j in &cue_idx {
            mask.extend_from_slice(retrieval.mask_row(j));
        }
        let (attended, refined) = refine_visual_context(s, &self.refine, fa, fv, &mask)?;
        let all = vec![true; cue_idx.len()];
        let (shared, ev) = share_visual_attributes(s, &self.share, refined, &all)?;
        let expression = s.tape.row_mix(ev, scatter)?;
        Ok(VisualExpression {
            aggregated: fa,
            attended: Some(attended),
            refined: Some(refined),
            shared: Some(shared),
            expression,
            cues: cue_idx,
            valid: cues.to_vec(),
        })
    }
}

/// `S_c[j][n] = cos(φ^L(Ê_L)_j, φ^V(F_v)_n)`; zero vectors score 0.
pub fn compute_relevance<T: Real>(
    s: &mut Session<'_, T>,
    project_vision: &Linear,
    project_language: &Linear,
    fv: Var,
    advanced: Var,
) -> Result<RelevanceMap> {
    let vision = project_vision.forward(s, fv)?;
    let language = project_language.forward(s, advanced)?;
    let scores = cosine_similarity(s, language, vision)?;
    Ok(RelevanceMap { scores, vision, language })
}

/// Pairwise cosine similarity of the rows of `a` against the rows of `b`.
pub fn cosine_similarity<T: Real>(s: &mut Session<'_, T>, a: Var, b: Var) -> Result<Var> {
    let an = s.tape.normalize_rows(a)?;
    let bn = s.tape.normalize_rows(b)?;
    s.tape.matmul_nt(an, bn)
}

/// Retrieval for cue rows of `scores [L × N]`.
///
/// Training: `S′ = softmax((S_c + g)/τ)` with fresh Gumbel noise from
/// `seed`, top-`N_p` of `S′`, straight-through mask. Evaluation: top-`N_p`
/// of `S_c`, constant mask.
pub fn retrieve_informative_tokens<T: Real>(
    s: &mut Session<'_, T>,
    scores: Var,
    cues: &[bool],
    ratio: f64,
    log_tau: Var,
    mode: Mode,
    seed: u64,
) -> Result<RetrievalResult> {
    let (l, n) = (s.value(scores).rows(), s.value(scores).cols());
    if cues.len() != l {
        return Err(Error::shape("retrieve", &[l, n], &[cues.len()]));
    }
    let n_p = retrieval_count(ratio, n)?;
    let tau = libm::exp(s.value(log_tau).item().as_f64());
    let (ranking, perturbed) = match mode {
        Mode::Eval => (s.value(scores).clone(), None),
        Mode::Train => {
            let g = s.constant(sample_gumbel(&[l, n], seed));
            let z = s.tape.add(scores, g)?;
            let neg = s.tape.scale(log_tau, -T::one())?;
            let inv_tau = s.tape.exp(neg)?;
            let z = s.tape.mul_scalar(z, inv_tau)?;
            let sp = s.tape.softmax(z, None)?;
            (s.value(sp).clone(), Some(sp))
        }
    };
    let mut mask = vec![false; l * n];
    let mut indices = Vec::with_capacity(l);
    for j in 0..l {
        if !cues[j] {
            indices.push(Vec::new());
            continue;
        }
        let idx = top_k_indices(ranking.row(j), n_p);
        for &i in &idx {
            mask[j * n + i] = true;
        }
        indices.push(idx);
    }
    let mask_var = match perturbed {
        Some(sp) => s.tape.straight_through(sp, &mask)?,
        None => s.constant(mask_tensor(&mask, l, n)),
    };
    Ok(RetrievalResult {
        perturbed,
        mask_var,
        mask,
        indices,
        n_p,
        tau,
        rows: l,
        cols: n,
    })
}

/// Retrieval bypass: every cue row keeps every token.
fn full_retrieval<T: Real>(s: &mut Session<'_, T>, cues: &[bool], l: usize, n: usize) -> RetrievalResult {
    let mask: Vec<bool> = (0..l * n).map(|i| cues[i / n]).collect();
    let mask_var = s.constant(mask_tensor(&mask, l, n));
    RetrievalResult {
        perturbed: None,
        mask_var,
        indices: (0..l).map(|j| if cues[j] { (0..n).collect() } else { Vec::new() }).collect(),
        mask,
        n_p: n,
        tau: f64::NAN,
        rows: l,
        cols: n,
    }
}

fn mask_tensor<T: Real>(mask: &[bool], l: usize, n: usize) -> Tensor<T> {
    Tensor::from_fn(&[l, n], |i| if mask[i] { T::one() } else { T::zero() })
}

/// Mean logistic loss of the global relevance row: positives pushed up,
/// negatives pushed down.
pub fn pixel_contrastive_loss<T: Real>(s: &mut Session<'_, T>, global: Var, targets: &ContrastiveTargets) -> Result<Var> {
    if s.value(global).len() != targets.len() {
        return Err(Error::shape("pixel_contrastive_loss", s.value(global).shape(), &[targets.len()]));
    }
    if targets.positive.is_empty() {
        log::warn!("contrastive target has no positive pixel; using negatives only");
    }
    s.tape.bce_with_logits(global, Arc::new(targets.labels()))
}

/// `F_a = linear(M · F_v)`: per cue, the sum of its retrieved tokens,
/// projected to the model width.
pub fn aggregate_retrieved<T: Real>(s: &mut Session<'_, T>, proj: &Linear, fv: Var, mask: Var) -> Result<Var> {
    let summed = s.tape.matmul(mask, fv)?;
    proj.forward(s, summed)
}

/// `F̂ = MHCA(F_a, F_v, M) + F_a`, `F_r = MLP(F̂) + F̂`. Returns `(F̂, F_r)`.
pub fn refine_visual_context<T: Real>(s: &mut Session<'_, T>, block: &AttentionBlock, fa: Var, fv: Var, mask: &[bool]) -> Result<(Var, Var)> {
    let h = block.norm1.forward(s, fa)?;
    let a = block.attn.forward(s, h, fv, Some(mask))?;
    let attended = s.tape.add(fa, a.out)?;
    let h = block.norm2.forward(s, attended)?;
    let m = block.mlp.forward(s, h)?;
    let refined = s.tape.add(attended, m)?;
    Ok((attended, refined))
}

/// `Ê = MHSA(F_r) + F_r`, `Ê_V = MLP(Ê) + Ê` over valid rows. Returns
/// `(Ê, Ê_V)`.
pub fn share_visual_attributes<T: Real>(s: &mut Session<'_, T>, block: &AttentionBlock, fr: Var, valid: &[bool]) -> Result<(Var, Var)> {
    let l = valid.len();
    let mask = crate::nn::key_mask(l, valid);
    let h = block.norm1.forward(s, fr)?;
    let a = block.attn.forward(s, h, h, Some(&mask))?;
    let shared = s.tape.add(fr, a.out)?;
    let h = block.norm2.forward(s, shared)?;
    let m = block.mlp.forward(s, h)?;
    let ev = s.tape.add(shared, m)?;
    Ok((shared, ev))
}
