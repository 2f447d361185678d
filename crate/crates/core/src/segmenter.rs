//! Query-based segmentation predictor.
//!
//! Mask-token embeddings from the language core seed the proposal queries;
//! a small masked-attention decoder attends to pyramid levels coarse to
//! fine; each proposal yields a fixed-resolution mask (logits formed at the
//! finest pyramid grid, bilinearly upsampled), category scores as dot
//! products against prompt embeddings plus a learned no-object logit, and
//! an association embedding for frame-by-frame video tracking.
//!
//! Matching follows the usual bipartite convention: Hungarian assignment on
//! w_bce*BCE + w_dice*Dice + w_cls*CE, unmatched proposals supervised to
//! the no-object class.

use ndarray::{Array2, ArrayD, IxDyn};

use crate::grid::Mask;
use crate::nn::{self, AttnBias, Conv2d, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum SegError {
    #[error("contract: {0}")]
    Contract(String),
    #[error("capacity: {got} ground-truth objects exceed {capacity} proposals")]
    Capacity { got: usize, capacity: usize },
    #[error("shape: {0}")]
    Shape(String),
}

#[derive(Debug, Clone)]
pub struct SegmenterConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    /// Width of incoming mask-token embeddings (LLM hidden width).
    pub d_llm: usize,
    pub n_proposals: usize,
    pub n_learned: usize,
    pub d_mask: usize,
    pub d_embed: usize,
    /// Fixed output mask resolution.
    pub mask_res: usize,
    /// Grid where mask logits are formed (finest pyramid side).
    pub mask_grid: usize,
    pub w_bce: f64,
    pub w_dice: f64,
    pub w_cls: f64,
    /// Down-weight for the no-object class term.
    pub no_object_weight: f64,
    /// Cosine-similarity floor for keeping a track alive.
    pub track_tau: f64,
    /// Feed prompt embeddings into attention as context tokens (the
    /// classification dot product always applies).
    pub prompt_context: bool,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            heads: 4,
            layers: 3,
            d_llm: 128,
            n_proposals: 8,
            n_learned: 8,
            d_mask: 32,
            d_embed: 32,
            mask_res: 128,
            mask_grid: 32,
            w_bce: 5.0,
            w_dice: 5.0,
            w_cls: 2.0,
            no_object_weight: 0.1,
            track_tau: 0.5,
            prompt_context: true,
        }
    }
}

struct SegLayer {
    ln_cross: LayerNorm,
    cross: MultiHeadAttention,
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_ffn: LayerNorm,
    ffn: FeedForward,
}

pub struct Segmenter {
    pub cfg: SegmenterConfig,
    proj_q: Linear,
    proj_p: Linear,
    learned_queries: ParamId,
    level_proj: Vec<Linear>,
    layers: Vec<SegLayer>,
    mask_feat_conv: Conv2d,
    mask_head1: Linear,
    mask_head2: Linear,
    class_proj: Linear,
    prompt_cls_proj: Linear,
    no_object: ParamId,
    embed_head: Linear,
}

impl Segmenter {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        cfg: &SegmenterConfig,
        level_channels: &[usize; 4],
    ) -> Self {
        let g = "segmenter";
        let d = cfg.d_model;
        let layers = (0..cfg.layers)
            .map(|i| SegLayer {
                ln_cross: LayerNorm::new(ps, &format!("seg.l{i}.ln_cross"), g, d),
                cross: MultiHeadAttention::new(ps, rng, &format!("seg.l{i}.cross"), g, d, d, cfg.heads),
                ln_self: LayerNorm::new(ps, &format!("seg.l{i}.ln_self"), g, d),
                self_attn: MultiHeadAttention::new(ps, rng, &format!("seg.l{i}.self"), g, d, d, cfg.heads),
                ln_ffn: LayerNorm::new(ps, &format!("seg.l{i}.ln_ffn"), g, d),
                ffn: FeedForward::new(ps, rng, &format!("seg.l{i}.ffn"), g, d, d * 2),
            })
            .collect();
        Self {
            cfg: cfg.clone(),
            proj_q: Linear::new(ps, rng, "seg.proj_q", g, cfg.d_llm, d, true),
            proj_p: Linear::new(ps, rng, "seg.proj_p", g, cfg.d_llm, d, true),
            learned_queries: ps.register(
                "seg.learned_queries",
                g,
                nn::normal_init(rng, &[cfg.n_learned, d], 0.02),
            ),
            level_proj: (0..4)
                .map(|i| {
                    Linear::new(
                        ps,
                        rng,
                        &format!("seg.level_proj{i}"),
                        g,
                        level_channels[i],
                        d,
                        true,
                    )
                })
                .collect(),
            layers,
            mask_feat_conv: Conv2d::new(ps, rng, "seg.mask_feat", g, level_channels[0], cfg.d_mask, 3, 1, 1),
            mask_head1: Linear::new(ps, rng, "seg.mask_head1", g, d, d, true),
            mask_head2: Linear::new(ps, rng, "seg.mask_head2", g, d, cfg.d_mask, true),
            class_proj: Linear::new(ps, rng, "seg.class_proj", g, d, d, true),
            prompt_cls_proj: Linear::new(ps, rng, "seg.prompt_cls", g, cfg.d_llm, d, true),
            no_object: ps.register("seg.no_object", g, nn::normal_init(rng, &[d, 1], 0.02)),
            embed_head: Linear::new(ps, rng, "seg.embed_head", g, d, cfg.d_embed, true),
        }
    }

    fn mask_logits_grid<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        queries: Var,
        mask_feats_flat: Var,
    ) -> Var {
        let n = self.cfg.n_proposals;
        let prop_idx: Vec<usize> = (0..n).collect();
        let prop = tape.gather_rows(queries, &prop_idx);
        let h = self.mask_head1.forward(tape, ps, prop);
        let h = tape.gelu(h);
        let emb = self.mask_head2.forward(tape, ps, h); // [N, d_mask]
        tape.matmul(emb, mask_feats_flat) // [N, grid*grid]
    }

    /// Additive attention bias restricting each proposal query to its
    /// current predicted region, pooled to the level's resolution. Queries
    /// whose region vanishes attend everywhere.
    fn attention_bias<T: Scalar>(
        &self,
        logits_grid: &ArrayD<T>,
        total_queries: usize,
        side: usize,
    ) -> ArrayD<T> {
        let g = self.cfg.mask_grid;
        let factor = g / side;
        let n = self.cfg.n_proposals;
        let neg = T::from_f(nn::MASK_NEG);
        let mut bias = Array2::<T>::zeros((total_queries, side * side));
        for q in 0..n {
            let mut any = false;
            let mut row = vec![false; side * side];
            for cy in 0..side {
                for cx in 0..side {
                    let mut acc = 0.0f64;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            let v = logits_grid[[q, cy * factor + dy, cx * factor + dx]].to_f();
                            acc += 1.0 / (1.0 + (-v).exp());
                        }
                    }
                    let keep = acc / (factor * factor) as f64 >= 0.5;
                    row[cy * side + cx] = keep;
                    any |= keep;
                }
            }
            if any {
                for (c, &keep) in row.iter().enumerate() {
                    if !keep {
                        bias[(q, c)] = neg;
                    }
                }
            }
        }
        bias.into_dyn()
    }

    /// Predict proposals from prompt embeddings, mask-token embeddings, and
    /// the feature pyramid (finest first).
    pub fn predict<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        e_p: Var,
        e_q: Var,
        pyramid: &[Var],
    ) -> Result<SegOut, SegError> {
        let n = tape.shape(e_q)[0];
        if n == 0 {
            return Err(SegError::Contract("no mask-token embeddings".into()));
        }
        if n != self.cfg.n_proposals {
            return Err(SegError::Contract(format!(
                "expected {} mask tokens, got {n}",
                self.cfg.n_proposals
            )));
        }
        let k = tape.shape(e_p)[0];
        if k == 0 {
            return Err(SegError::Contract("empty prompt embeddings".into()));
        }
        let qp = self.proj_q.forward(tape, ps, e_q);
        let lq = tape.param(ps, self.learned_queries);
        let mut parts = vec![qp, lq];
        if self.cfg.prompt_context {
            let pp = self.proj_p.forward(tape, ps, e_p);
            parts.push(pp);
        }
        let mut queries = tape.concat_rows(&parts);
        let total = tape.shape(queries)[0];

        // mask features at the finest grid
        let mf = self.mask_feat_conv.forward(tape, ps, pyramid[0]);
        let g = self.cfg.mask_grid;
        let mfs = tape.shape(mf).to_vec();
        if mfs[1] != g || mfs[2] != g {
            return Err(SegError::Shape(format!(
                "finest level grid {}x{} != configured {g}",
                mfs[1], mfs[2]
            )));
        }
        let mask_feats_flat = tape.reshape(mf, &[self.cfg.d_mask, g * g]);

        // decoder layers over levels coarse -> fine
        for (i, layer) in self.layers.iter().enumerate() {
            let level_idx = 3 - i.min(3);
            let level = pyramid[level_idx];
            let ls = tape.shape(level).to_vec();
            let side = ls[1];
            let flat = tape.reshape(level, &[ls[0], ls[1] * ls[2]]);
            let kv_seq = tape.transpose2(flat);
            let kv = self.level_proj[level_idx].forward(tape, ps, kv_seq);
            // attention mask from the current predictions, detached
            let cur_logits = self.mask_logits_grid(tape, ps, queries, mask_feats_flat);
            let cur_grid = tape.reshape(cur_logits, &[self.cfg.n_proposals, g, g]);
            let bias_arr = self.attention_bias(tape.value(cur_grid), total, side);
            let bias = tape.constant(bias_arr);
            let qn = layer.ln_cross.forward(tape, ps, queries);
            let att = layer.cross.forward(tape, ps, qn, kv, AttnBias::Shared(bias));
            queries = tape.add(queries, att);
            let qn = layer.ln_self.forward(tape, ps, queries);
            let satt = layer.self_attn.forward(tape, ps, qn, qn, AttnBias::None);
            queries = tape.add(queries, satt);
            let qn = layer.ln_ffn.forward(tape, ps, queries);
            let f = layer.ffn.forward(tape, ps, qn);
            queries = tape.add(queries, f);
        }

        // heads
        let logits_flat = self.mask_logits_grid(tape, ps, queries, mask_feats_flat);
        let logits_grid = tape.reshape(logits_flat, &[self.cfg.n_proposals, g, g]);
        let factor = self.cfg.mask_res / g;
        let mask_logits = tape.upsample_bilinear(logits_grid, factor);
        let mask_probs = tape.sigmoid(mask_logits);

        let prop_idx: Vec<usize> = (0..self.cfg.n_proposals).collect();
        let prop_q = tape.gather_rows(queries, &prop_idx);
        let e_cls = self.class_proj.forward(tape, ps, prop_q); // [N, D]
        let p_cls = self.prompt_cls_proj.forward(tape, ps, e_p); // [K, D]
        let p_t = tape.transpose2(p_cls);
        let cat_logits = tape.matmul(e_cls, p_t); // [N, K]
        let no_obj = tape.param(ps, self.no_object);
        let no_logit = tape.matmul(e_cls, no_obj); // [N, 1]
        let class_logits = tape.concat_cols(&[cat_logits, no_logit]); // [N, K+1]
        let embed = self.embed_head.forward(tape, ps, prop_q);
        Ok(SegOut {
            mask_logits,
            mask_probs,
            class_logits,
            embed,
            n_categories: k,
        })
    }

    /// Bipartite match against ground truth and assemble the training loss.
    pub fn match_and_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        out: &SegOut,
        gt_masks: &[Mask],
        gt_labels: &[usize],
    ) -> Result<MatchResult, SegError> {
        let n = self.cfg.n_proposals;
        let gcount = gt_masks.len();
        if gcount > n {
            return Err(SegError::Capacity {
                got: gcount,
                capacity: n,
            });
        }
        if gcount != gt_labels.len() {
            return Err(SegError::Contract("labels/masks length mismatch".into()));
        }
        let res = self.cfg.mask_res;
        for m in gt_masks {
            if m.w != res || m.h != res {
                return Err(SegError::Shape(format!(
                    "gt mask {}x{} != fixed resolution {res}",
                    m.w, m.h
                )));
            }
        }
        let k = out.n_categories;
        for &l in gt_labels {
            if l >= k {
                return Err(SegError::Contract(format!("label {l} out of {k} categories")));
            }
        }

        // cost matrix from detached values
        let probs = tape.value(out.mask_probs).clone();
        let cls = tape.value(out.class_logits).clone();
        let mut cost = Array2::<f64>::zeros((gcount, n));
        for gi in 0..gcount {
            for pj in 0..n {
                let mut bce = 0.0f64;
                let mut inter = 0.0f64;
                let mut psum = 0.0f64;
                let mut gsum = 0.0f64;
                for y in 0..res {
                    for x in 0..res {
                        let p = (probs[[pj, y, x]].to_f()).clamp(1e-6, 1.0 - 1e-6);
                        let t = if gt_masks[gi].get(x, y) { 1.0 } else { 0.0 };
                        bce += -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
                        inter += p * t;
                        psum += p;
                        gsum += t;
                    }
                }
                bce /= (res * res) as f64;
                let dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
                let ce = class_nll(&cls, pj, gt_labels[gi]);
                cost[(gi, pj)] =
                    self.cfg.w_bce * bce + self.cfg.w_dice * dice + self.cfg.w_cls * ce;
            }
        }
        let assignment_gt = hungarian_min(&cost);

        // proposal -> gt view
        let mut assigned = vec![None; n];
        for (gi, &pj) in assignment_gt.iter().enumerate() {
            assigned[pj] = Some(gi);
        }

        // tape losses
        let g = self.cfg.mask_res;
        let flat = tape.reshape(out.mask_logits, &[n, g * g]);
        let mut dice_total: Option<Var> = None;
        let mut bce_total: Option<Var> = None;
        for (pj, slot) in assigned.iter().enumerate() {
            let Some(gi) = slot else { continue };
            let row = tape.gather_rows(flat, &[pj]);
            let target = mask_to_array::<T>(&gt_masks[*gi]);
            let bce = tape.bce_logits_mean(row, &target);
            bce_total = Some(match bce_total {
                Some(acc) => tape.add(acc, bce),
                None => bce,
            });
            let probs_row = tape.sigmoid(row);
            let tvar = tape.constant(target);
            let inter = tape.mul(probs_row, tvar);
            let inter_sum = tape.sum_all(inter);
            let psum = tape.sum_all(probs_row);
            let tvar2 = tape.constant(mask_to_array::<T>(&gt_masks[*gi]));
            let gsum = tape.sum_all(tvar2);
            let num0 = tape.scale(inter_sum, T::from_f(2.0));
            let num = tape.add_scalar(num0, T::one());
            let den0 = tape.add(psum, gsum);
            let den = tape.add_scalar(den0, T::one());
            let frac = tape.div(num, den);
            let dice = tape.affine(frac, -T::one(), T::one());
            dice_total = Some(match dice_total {
                Some(acc) => tape.add(acc, dice),
                None => dice,
            });
        }
        let gn = gcount.max(1) as f64;
        let dice_loss = match dice_total {
            Some(v) => tape.scale(v, T::from_f(1.0 / gn)),
            None => tape.constant(ArrayD::zeros(IxDyn(&[]))),
        };
        let bce_loss = match bce_total {
            Some(v) => tape.scale(v, T::from_f(1.0 / gn)),
            None => tape.constant(ArrayD::zeros(IxDyn(&[]))),
        };

        // class CE over all proposals (matched -> its label, rest -> no-object)
        let targets: Vec<usize> = assigned
            .iter()
            .map(|s| s.map(|gi| gt_labels[gi]).unwrap_or(k))
            .collect();
        // split weighted terms: matched at weight 1, unmatched down-weighted
        let matched_targets: Vec<usize> = targets
            .iter()
            .map(|&t| if t == k { usize::MAX } else { t })
            .collect();
        let unmatched_targets: Vec<usize> = targets
            .iter()
            .map(|&t| if t == k { t } else { usize::MAX })
            .collect();
        let any_matched = matched_targets.iter().any(|&t| t != usize::MAX);
        let any_unmatched = unmatched_targets.iter().any(|&t| t != usize::MAX);
        let mut class_loss = tape.constant(ArrayD::zeros(IxDyn(&[])));
        if any_matched {
            let cem = tape.ce_mean(out.class_logits, &matched_targets);
            class_loss = tape.add(class_loss, cem);
        }
        if any_unmatched {
            let ceu = tape.ce_mean(out.class_logits, &unmatched_targets);
            let ceu = tape.scale(ceu, T::from_f(self.cfg.no_object_weight));
            class_loss = tape.add(class_loss, ceu);
        }

        let wb = tape.scale(bce_loss, T::from_f(self.cfg.w_bce));
        let wd = tape.scale(dice_loss, T::from_f(self.cfg.w_dice));
        let wc = tape.scale(class_loss, T::from_f(self.cfg.w_cls));
        let t0 = tape.add(wb, wd);
        let total = tape.add(t0, wc);
        Ok(MatchResult {
            assignment: assigned,
            cost,
            dice: dice_loss,
            bce: bce_loss,
            class_ce: class_loss,
            total,
        })
    }
}

pub struct SegOut {
    /// [N, res, res] mask logits at the fixed resolution.
    pub mask_logits: Var,
    /// Sigmoid of the logits, in [0, 1].
    pub mask_probs: Var,
    /// [N, K+1] category scores, last column is no-object.
    pub class_logits: Var,
    /// [N, d_embed] association embeddings.
    pub embed: Var,
    pub n_categories: usize,
}

impl SegOut {
    /// Concrete per-proposal values for downstream consumers.
    pub fn proposals<T: Scalar>(&self, tape: &Tape<T>) -> Vec<MaskProposal> {
        let probs = tape.value(self.mask_probs);
        let cls = tape.value(self.class_logits);
        let emb = tape.value(self.embed);
        let n = probs.shape()[0];
        let res = probs.shape()[1];
        (0..n)
            .map(|j| {
                let mut mask = Array2::<f32>::zeros((res, res));
                for y in 0..res {
                    for x in 0..res {
                        mask[(y, x)] = probs[[j, y, x]].to_f() as f32;
                    }
                }
                MaskProposal {
                    mask,
                    class_scores: (0..cls.shape()[1]).map(|c| cls[[j, c]].to_f()).collect(),
                    embedding: (0..emb.shape()[1]).map(|d| emb[[j, d]].to_f()).collect(),
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct MaskProposal {
    /// Post-sigmoid mask at the fixed resolution.
    pub mask: Array2<f32>,
    /// K category scores plus the trailing no-object score.
    pub class_scores: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl MaskProposal {
    /// Best category (no-object column excluded).
    pub fn best_category(&self) -> (usize, f64) {
        let k = self.class_scores.len() - 1;
        let mut best = 0;
        for c in 1..k {
            if self.class_scores[c] > self.class_scores[best] {
                best = c;
            }
        }
        (best, self.class_scores[best])
    }

    /// Score margin of being a real object vs no-object.
    pub fn objectness(&self) -> f64 {
        let k = self.class_scores.len() - 1;
        self.best_category().1 - self.class_scores[k]
    }
}

pub struct MatchResult {
    /// Per-proposal assignment to a ground-truth index.
    pub assignment: Vec<Option<usize>>,
    /// [G, N] matching costs.
    pub cost: Array2<f64>,
    pub dice: Var,
    pub bce: Var,
    pub class_ce: Var,
    pub total: Var,
}

fn class_nll(cls: &ArrayD<impl Scalar>, row: usize, label: usize) -> f64 {
    let k1 = cls.shape()[1];
    let mut mx = f64::NEG_INFINITY;
    for c in 0..k1 {
        mx = mx.max(cls[[row, c]].to_f());
    }
    let mut lse = 0.0;
    for c in 0..k1 {
        lse += (cls[[row, c]].to_f() - mx).exp();
    }
    let lse = mx + lse.ln();
    lse - cls[[row, label]].to_f()
}

fn mask_to_array<T: Scalar>(m: &Mask) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(IxDyn(&[1, m.h * m.w]));
    for (x, y) in m.fg_pixels() {
        out[[0, y * m.w + x]] = T::one();
    }
    out
}

/// Minimum-cost assignment of rows (ground truths) to distinct columns
/// (proposals); rows <= cols. Returns the column picked for each row.
pub fn hungarian_min(cost: &Array2<f64>) -> Vec<usize> {
    let n = cost.nrows();
    let m = cost.ncols();
    assert!(n <= m, "hungarian expects rows <= cols");
    // potentials over a 1-indexed virtual square
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut p = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] > 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}

/// Average-pool a fixed-resolution mask down to a latent resolution.
pub fn rescale_for_diffusion(
    mask: &Array2<f32>,
    target: (usize, usize),
) -> Result<Array2<f32>, SegError> {
    let (h, w) = (mask.nrows(), mask.ncols());
    let (th, tw) = target;
    if th > h || tw > w || h % th != 0 || w % tw != 0 || h / th != w / tw {
        return Err(SegError::Shape(format!(
            "cannot pool {h}x{w} to {th}x{tw} with an integer window"
        )));
    }
    let win = h / th;
    let mut out = Array2::<f32>::zeros((th, tw));
    let inv = 1.0 / (win * win) as f32;
    for y in 0..th {
        for x in 0..tw {
            let mut acc = 0.0f32;
            for dy in 0..win {
                for dx in 0..win {
                    acc += mask[(y * win + dy, x * win + dx)];
                }
            }
            out[(y, x)] = acc * inv;
        }
    }
    Ok(out)
}

/// One frame's observation for tracking: the association embeddings.
pub struct FrameObs {
    pub embeddings: Vec<Vec<f64>>,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Frame-by-frame association on embedding cosine similarity; matches below
/// the threshold open new tracks. Returns per-frame track ids.
pub fn track_video(frames: &[FrameObs], tau: f64) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(frames.len());
    let mut next_id = 0usize;
    for t in 0..frames.len() {
        let cur = &frames[t];
        if t == 0 {
            let ids: Vec<usize> = (0..cur.embeddings.len())
                .map(|_| {
                    let id = next_id;
                    next_id += 1;
                    id
                })
                .collect();
            out.push(ids);
            continue;
        }
        let prev = &frames[t - 1];
        let prev_ids = &out[t - 1];
        let n_cur = cur.embeddings.len();
        let n_prev = prev.embeddings.len();
        let mut ids = vec![usize::MAX; n_cur];
        if n_prev > 0 && n_cur > 0 {
            // assign current (rows) to previous (cols); pad so rows <= cols
            let rows = n_cur.min(n_prev);
            // build cost = -similarity over the smaller orientation
            let (swap, r, c) = if n_cur <= n_prev {
                (false, n_cur, n_prev)
            } else {
                (true, n_prev, n_cur)
            };
            let mut cost = Array2::<f64>::zeros((r, c));
            for i in 0..r {
                for j in 0..c {
                    let (ci, pj) = if swap { (j, i) } else { (i, j) };
                    cost[(i, j)] = -cosine(&cur.embeddings[ci], &prev.embeddings[pj]);
                }
            }
            let assign = hungarian_min(&cost);
            for i in 0..r {
                let (ci, pj) = if swap { (assign[i], i) } else { (i, assign[i]) };
                let sim = cosine(&cur.embeddings[ci], &prev.embeddings[pj]);
                if sim >= tau {
                    ids[ci] = prev_ids[pj];
                }
            }
            let _ = rows;
        }
        for id in ids.iter_mut() {
            if *id == usize::MAX {
                *id = next_id;
                next_id += 1;
            }
        }
        out.push(ids);
    }
    out
}
