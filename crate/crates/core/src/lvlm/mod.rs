//! Small decoder-only language core over the mixed text/image/query input
//! schema, with grammar-constrained decoding.
//!
//! The model consumes the four-part input (fused image tokens E_img,
//! structured prompt tokens, continuous pixel features X_T, adapter
//! queries), produces hidden states E_O and logits over the full
//! vocabulary, and exposes the mask-token hidden states E_Q for the
//! segmentation predictor. Decoding is constrained by a per-task phase
//! grammar: object names before mask tokens, and for generation tasks all
//! semantic visual tokens before any pixel visual tokens.

pub mod grammar;
pub mod prompt;
pub mod vocab;

pub use grammar::{decode_constrained, GrammarSpec, SamplerConfig};
pub use prompt::{
    append_targets, build_prompt, Condition, LayoutConfig, PromptSchema, Role, SequenceLayout,
    TaskKind, TeacherForced,
};
pub use vocab::{Special, TokenClass, Vocabulary};

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::grid::Mask;
use crate::nn::{self, AttnBias, Embedding, LayerNorm, Linear, TransformerBlock};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::shapesworld::{Cue, CuePayload};
use crate::tensor::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum LvlmError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("unknown word: {0}")]
    UnknownWord(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error("decoding exceeded max length {0} before the grammar accepted")]
    Truncation(usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

#[derive(Debug, Clone)]
pub struct LvlmConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub n_seg: usize,
    pub max_len: usize,
    /// Width of E_img / adapter query features.
    pub d_enc: usize,
    /// Width of continuous pixel features X_T.
    pub d_pix: usize,
    /// Width of pooled region features (finest pyramid channels).
    pub d_region: usize,
    pub layout: LayoutConfig,
}

impl Default for LvlmConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            layers: 4,
            heads: 4,
            d_ffn: 512,
            n_seg: 8,
            max_len: 768,
            d_enc: 64,
            d_pix: 32,
            d_region: 32,
            layout: LayoutConfig::default(),
        }
    }
}

/// Continuous inputs spliced into the image-placeholder block, in order.
pub struct Features {
    pub e_img: Option<Var>,
    pub x_t: Option<Var>,
    pub adapter: Option<Var>,
}

impl Features {
    pub fn none() -> Self {
        Self {
            e_img: None,
            x_t: None,
            adapter: None,
        }
    }
}

pub struct LlmOutput {
    /// E_O: hidden states per position, [L, D].
    pub hidden: Var,
    /// Logits per position, [L, |V|].
    pub logits: Var,
}

pub struct LanguageCore {
    pub vocab: Vocabulary,
    pub cfg: LvlmConfig,
    embed: Embedding,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    final_ln: LayerNorm,
    head: Linear,
    proj_eimg: Linear,
    proj_xt: Linear,
    proj_adapter: Linear,
    proj_region: Linear,
}

impl LanguageCore {
    pub fn new<T: Scalar>(
        ps: &mut ParamStore<T>,
        rng: &mut SplitMix64,
        cfg: &LvlmConfig,
        k_sem: usize,
        k_pix: usize,
    ) -> Self {
        let vocab = Vocabulary::build(cfg.n_seg, k_sem, k_pix);
        let embed = Embedding::new(ps, rng, "llm.embed", "llm", vocab.size(), cfg.d_model);
        let pos = ps.register(
            "llm.pos",
            "llm",
            nn::normal_init(rng, &[cfg.max_len, cfg.d_model], 0.02),
        );
        let blocks = (0..cfg.layers)
            .map(|i| {
                TransformerBlock::new(
                    ps,
                    rng,
                    &format!("llm.block{i}"),
                    "llm",
                    cfg.d_model,
                    cfg.heads,
                    cfg.d_ffn,
                )
            })
            .collect();
        let final_ln = LayerNorm::new(ps, "llm.final_ln", "llm", cfg.d_model);
        let head = Linear::new(ps, rng, "llm.head", "llm", cfg.d_model, vocab.size(), true);
        let proj_eimg = Linear::new(
            ps,
            rng,
            "proj.eimg",
            "projectors",
            cfg.d_enc,
            cfg.d_model,
            true,
        );
        let proj_xt = Linear::new(ps, rng, "proj.xt", "projectors", cfg.d_pix, cfg.d_model, true);
        let proj_adapter = Linear::new(
            ps,
            rng,
            "proj.adapter",
            "projectors",
            cfg.d_enc,
            cfg.d_model,
            true,
        );
        let proj_region = Linear::new(
            ps,
            rng,
            "proj.region",
            "projectors",
            cfg.d_region,
            cfg.d_model,
            true,
        );
        Self {
            vocab,
            cfg: cfg.clone(),
            embed,
            pos,
            blocks,
            final_ln,
            head,
            proj_eimg,
            proj_xt,
            proj_adapter,
            proj_region,
        }
    }

    fn feature_rows<T: Scalar>(&self, tape: &Tape<T>, feats: &Features) -> usize {
        let mut n = 0;
        for f in [feats.e_img, feats.x_t, feats.adapter].into_iter().flatten() {
            n += tape.shape(f)[0];
        }
        n
    }

    /// Full-sequence causal forward.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        layout: &SequenceLayout,
        feats: &Features,
    ) -> Result<LlmOutput, LvlmError> {
        let l = layout.len();
        if l > self.cfg.max_len {
            return Err(LvlmError::Contract(format!(
                "sequence {l} exceeds max_len {}",
                self.cfg.max_len
            )));
        }
        let have = self.feature_rows(tape, feats);
        if have != layout.img_len {
            return Err(LvlmError::Contract(format!(
                "image placeholder count {} != feature rows {}",
                layout.img_len, have
            )));
        }
        // embedding segments: tokens, optional region splice, features, tokens
        let table = tape.param(ps, self.embed.table);
        let mut segments: Vec<Var> = Vec::new();
        let cut = layout.region_pos.unwrap_or(layout.img_start);
        if cut > 0 {
            let seg = tape.gather_rows(table, &layout.ids[..cut]);
            segments.push(seg);
        }
        if let Some(rp) = layout.region_pos {
            let feat = layout
                .region_feature
                .as_ref()
                .ok_or_else(|| LvlmError::Contract("region position without feature".into()))?;
            if feat.len() != self.cfg.d_region {
                return Err(LvlmError::Contract(format!(
                    "region feature dim {} != {}",
                    feat.len(),
                    self.cfg.d_region
                )));
            }
            let arr = ArrayD::from_shape_vec(
                IxDyn(&[1, feat.len()]),
                feat.iter().map(|&v| T::from_f(v)).collect(),
            )
            .unwrap();
            let rv = tape.constant(arr);
            segments.push(self.proj_region.forward(tape, ps, rv));
            if layout.img_start > rp + 1 {
                let seg = tape.gather_rows(table, &layout.ids[rp + 1..layout.img_start]);
                segments.push(seg);
            }
        }
        if let Some(e) = feats.e_img {
            segments.push(self.proj_eimg.forward(tape, ps, e));
        }
        if let Some(x) = feats.x_t {
            segments.push(self.proj_xt.forward(tape, ps, x));
        }
        if let Some(a) = feats.adapter {
            segments.push(self.proj_adapter.forward(tape, ps, a));
        }
        let img_end = layout.img_start + layout.img_len;
        if img_end < l {
            let seg = tape.gather_rows(table, &layout.ids[img_end..]);
            segments.push(seg);
        }
        let x = if segments.len() == 1 {
            segments[0]
        } else {
            tape.concat_rows(&segments)
        };
        debug_assert_eq!(tape.shape(x)[0], l);
        let pos_table = tape.param(ps, self.pos);
        let pos_idx: Vec<usize> = (0..l).collect();
        let pos = tape.gather_rows(pos_table, &pos_idx);
        let mut h = tape.add(x, pos);
        let mask = tape.constant(nn::causal_mask::<T>(l));
        for blk in &self.blocks {
            h = blk.forward(tape, ps, h, AttnBias::Shared(mask));
        }
        let hidden = self.final_ln.forward(tape, ps, h);
        let logits = self.head.forward(tape, ps, hidden);
        Ok(LlmOutput { hidden, logits })
    }

    /// E_Q: hidden rows at the mask-token positions, in order.
    pub fn extract_mask_tokens<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        output: &LlmOutput,
        layout: &SequenceLayout,
    ) -> Result<Var, LvlmError> {
        let pos = layout.mask_token_positions();
        if pos.is_empty() {
            return Err(LvlmError::Contract("layout has no mask tokens".into()));
        }
        Ok(tape.gather_rows(output.hidden, &pos))
    }
}

// ---- incremental decoding ---------------------------------------------

/// Per-layer key/value cache for incremental decoding (preallocated to
/// max_len rows; `len` rows are live).
pub struct DecodeCache<T: Scalar> {
    k: Vec<Array2<T>>,
    v: Vec<Array2<T>>,
    pub len: usize,
}

impl LanguageCore {
    pub fn new_cache<T: Scalar>(&self) -> DecodeCache<T> {
        DecodeCache {
            k: (0..self.cfg.layers)
                .map(|_| Array2::zeros((self.cfg.max_len, self.cfg.d_model)))
                .collect(),
            v: (0..self.cfg.layers)
                .map(|_| Array2::zeros((self.cfg.max_len, self.cfg.d_model)))
                .collect(),
            len: 0,
        }
    }

    /// Feed one embedding row (token embedding or spliced feature, position
    /// code already added) and return the logits row.
    pub fn step_row<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &mut DecodeCache<T>,
        row: &Array1<T>,
    ) -> Array1<T> {
        self.step_row_hidden(ps, cache, row).1
    }

    /// As `step_row` but also returns the post-norm hidden row (the E_O row
    /// this position contributes, used for mask-token extraction).
    pub fn step_row_hidden<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &mut DecodeCache<T>,
        row: &Array1<T>,
    ) -> (Array1<T>, Array1<T>) {
        let d = self.cfg.d_model;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let mut x = row.clone();
        for (li, blk) in self.blocks.iter().enumerate() {
            let n = ln_row(ps, &blk.ln1, &x);
            let q = lin_row(ps, &blk.attn.wq, &n);
            let k = lin_row(ps, &blk.attn.wk, &n);
            let v = lin_row(ps, &blk.attn.wv, &n);
            let klen = cache.len;
            assert!(klen < self.cfg.max_len, "decode cache overflow");
            cache.k[li].row_mut(klen).assign(&k);
            cache.v[li].row_mut(klen).assign(&v);
            let lcur = klen + 1;
            let scale = T::from_f(1.0 / (dh as f64).sqrt());
            let mut attn_out = Array1::<T>::zeros(d);
            for h in 0..heads {
                let qs = q.slice(ndarray::s![h * dh..(h + 1) * dh]);
                let mut scores = Array1::<T>::zeros(lcur);
                for t in 0..lcur {
                    let ks = cache.k[li].row(t);
                    let ks = ks.slice(ndarray::s![h * dh..(h + 1) * dh]);
                    scores[t] = qs.dot(&ks) * scale;
                }
                let mx = scores.fold(T::neg_infinity(), |a, &b| if b > a { b } else { a });
                let mut sum = T::zero();
                for t in 0..lcur {
                    scores[t] = (scores[t] - mx).exp();
                    sum += scores[t];
                }
                for t in 0..lcur {
                    let w = scores[t] / sum;
                    let vs = cache.v[li].row(t);
                    let vs = vs.slice(ndarray::s![h * dh..(h + 1) * dh]);
                    for (j, &vv) in vs.iter().enumerate() {
                        attn_out[h * dh + j] += w * vv;
                    }
                }
            }
            let attn_proj = lin_row(ps, &blk.attn.wo, &attn_out);
            x = &x + &attn_proj;
            let n2 = ln_row(ps, &blk.ln2, &x);
            let f1 = lin_row(ps, &blk.ffn.w1, &n2);
            let f1 = f1.mapv(gelu_scalar);
            let f2 = lin_row(ps, &blk.ffn.w2, &f1);
            x = &x + &f2;
        }
        cache.len += 1;
        let hn = ln_row(ps, &self.final_ln, &x);
        let logits = lin_row(ps, &self.head, &hn);
        (hn, logits)
    }

    /// Embedding row for a token id at an absolute position.
    pub fn token_row<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        id: usize,
        position: usize,
    ) -> Array1<T> {
        let table = ps.value(self.embed.table);
        let pos = ps.value(self.pos);
        let t2 = table.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let p2 = pos.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        &t2.row(id) + &p2.row(position)
    }

    /// Prefill the cache with the prompt prefix. Feature values are plain
    /// arrays (inference path). Returns the logits row at the last prefix
    /// position.
    pub fn prefill<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &mut DecodeCache<T>,
        layout: &SequenceLayout,
        e_img: Option<&Array2<T>>,
        x_t: Option<&Array2<T>>,
        adapter: Option<&Array2<T>>,
    ) -> Result<Array1<T>, LvlmError> {
        self.prefill_hidden(ps, cache, layout, e_img, x_t, adapter)
            .map(|(_, l)| l)
    }

    /// Prefill returning the last position's (hidden, logits).
    pub fn prefill_hidden<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &mut DecodeCache<T>,
        layout: &SequenceLayout,
        e_img: Option<&Array2<T>>,
        x_t: Option<&Array2<T>>,
        adapter: Option<&Array2<T>>,
    ) -> Result<(Array1<T>, Array1<T>), LvlmError> {
        let (rows, out) = self.prefill_collect(ps, cache, layout, e_img, x_t, adapter, false)?;
        let _ = rows;
        Ok(out)
    }

    /// Prefill; when `collect` is set, also return every prefix hidden row.
    #[allow(clippy::too_many_arguments, clippy::type_complexity)]
    pub fn prefill_collect<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        cache: &mut DecodeCache<T>,
        layout: &SequenceLayout,
        e_img: Option<&Array2<T>>,
        x_t: Option<&Array2<T>>,
        adapter: Option<&Array2<T>>,
        collect: bool,
    ) -> Result<(Vec<Array1<T>>, (Array1<T>, Array1<T>)), LvlmError> {
        let rows_have = e_img.map_or(0, |a| a.nrows())
            + x_t.map_or(0, |a| a.nrows())
            + adapter.map_or(0, |a| a.nrows());
        if rows_have != layout.img_len {
            return Err(LvlmError::Contract(format!(
                "image placeholder count {} != feature rows {rows_have}",
                layout.img_len
            )));
        }
        // projected feature rows in splice order
        let mut proj_rows: Vec<Array1<T>> = Vec::with_capacity(layout.img_len);
        for (opt, lin) in [
            (e_img, &self.proj_eimg),
            (x_t, &self.proj_xt),
            (adapter, &self.proj_adapter),
        ] {
            if let Some(m) = opt {
                for r in m.rows() {
                    proj_rows.push(lin_row(ps, lin, &r.to_owned()));
                }
            }
        }
        let pos_table = ps.value(self.pos);
        let p2 = pos_table
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mut out = (
            Array1::zeros(self.cfg.d_model),
            Array1::zeros(self.vocab.size()),
        );
        let mut collected = Vec::new();
        for i in 0..layout.prefix_len {
            let row = if i >= layout.img_start && i < layout.img_start + layout.img_len {
                &proj_rows[i - layout.img_start] + &p2.row(i)
            } else if Some(i) == layout.region_pos {
                let feat = layout.region_feature.as_ref().ok_or_else(|| {
                    LvlmError::Contract("region position without feature".into())
                })?;
                let arr = Array1::from_iter(feat.iter().map(|&v| T::from_f(v)));
                &lin_row(ps, &self.proj_region, &arr) + &p2.row(i)
            } else {
                self.token_row(ps, layout.ids[i], i)
            };
            out = self.step_row_hidden(ps, cache, &row);
            if collect {
                collected.push(out.0.clone());
            }
        }
        Ok((collected, out))
    }
}

fn lin_row<T: Scalar>(ps: &ParamStore<T>, lin: &Linear, x: &Array1<T>) -> Array1<T> {
    let w = ps.value(lin.w);
    let w2 = w.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let mut y = x.dot(&w2);
    if let Some(b) = lin.b {
        let bv = ps.value(b);
        let b1 = bv.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        y += &b1;
    }
    y
}

fn ln_row<T: Scalar>(ps: &ParamStore<T>, ln: &LayerNorm, x: &Array1<T>) -> Array1<T> {
    let d = x.len();
    let dn = T::from_f(d as f64);
    let mean = x.sum() / dn;
    let var = x.fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
    let rstd = T::one() / (var + T::from_f(ln.eps)).sqrt();
    let gain = ps.value(ln.gain);
    let bias = ps.value(ln.bias);
    let g1 = gain.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let b1 = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let mut out = Array1::zeros(d);
    for i in 0..d {
        out[i] = (x[i] - mean) * rstd * g1[i] + b1[i];
    }
    out
}

fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f(0.7978845608028654);
    let k = T::from_f(0.044715);
    let half = T::from_f(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (T::one() + u.tanh())
}

// ---- region pooling ------------------------------------------------------

/// Mean-pool the finest pyramid level over a cue footprint.
///
/// Point cues pool a 3x3 cell neighborhood; box/scribble/mask cues pool the
/// covered cells. Coordinates are canvas pixels; `factor` maps them to grid
/// cells.
pub fn pool_region_features<T: Scalar>(
    level: &ArrayD<T>,
    cue: &Cue,
    canvas: (usize, usize),
) -> Result<Array1<T>, LvlmError> {
    let (c, gh, gw) = (level.shape()[0], level.shape()[1], level.shape()[2]);
    if canvas.0 % gw != 0 || canvas.1 % gh != 0 {
        return Err(LvlmError::Contract(format!(
            "canvas {canvas:?} incompatible with grid {gw}x{gh}"
        )));
    }
    let fx = canvas.0 / gw;
    let fy = canvas.1 / gh;
    let mut cells = std::collections::BTreeSet::new();
    match &cue.payload {
        CuePayload::Point(x, y) => {
            let (cx, cy) = (x / fx, y / fy);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let nx = cx as i64 + dx;
                    let ny = cy as i64 + dy;
                    if nx >= 0 && ny >= 0 && (nx as usize) < gw && (ny as usize) < gh {
                        cells.insert((nx as usize, ny as usize));
                    }
                }
            }
        }
        CuePayload::Box(x0, y0, x1, y1) => {
            if x1 <= x0 || y1 <= y0 {
                return Err(LvlmError::Degenerate("empty box".into()));
            }
            for y in (*y0 / fy)..=((y1 - 1) / fy).min(gh - 1) {
                for x in (*x0 / fx)..=((x1 - 1) / fx).min(gw - 1) {
                    cells.insert((x, y));
                }
            }
        }
        CuePayload::Scribble(pts) => {
            for (x, y) in pts {
                cells.insert(((x / fx).min(gw - 1), (y / fy).min(gh - 1)));
            }
        }
        CuePayload::Mask(m) => {
            for (x, y) in m.fg_pixels() {
                cells.insert(((x / fx).min(gw - 1), (y / fy).min(gh - 1)));
            }
        }
    }
    if cells.is_empty() {
        return Err(LvlmError::Degenerate("cue footprint maps to zero cells".into()));
    }
    let mut out = Array1::<T>::zeros(c);
    for &(x, y) in &cells {
        for ch in 0..c {
            out[ch] += level[[ch, y, x]];
        }
    }
    let n = T::from_f(cells.len() as f64);
    out.mapv_inplace(|v| v / n);
    Ok(out)
}

/// Full-frame mask helper for pooling tests.
pub fn full_frame_mask(w: usize, h: usize) -> Mask {
    Mask::from_fn(w, h, |_, _| true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapesworld::CueMode;

    fn setup() -> (ParamStore<f64>, LanguageCore, LvlmConfig) {
        let mut cfg = LvlmConfig::default();
        // small vocab ranges for unit tests
        cfg.layers = 2;
        let mut ps = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(21);
        let core = LanguageCore::new(&mut ps, &mut rng, &cfg, 16, 32);
        (ps, core, cfg)
    }

    fn seg_layout(core: &LanguageCore, cfg: &LvlmConfig) -> SequenceLayout {
        let schema = PromptSchema::text(TaskKind::ReferringSeg, "the red circle");
        let l = build_prompt(&schema, &core.vocab, &cfg.layout).unwrap();
        append_targets(l, &core.vocab, &cfg.layout, &["circle".to_string()], None, None)
            .unwrap()
            .layout
    }

    fn make_feats(
        tape: &mut Tape<f64>,
        cfg: &LvlmConfig,
        rng: &mut SplitMix64,
        task: TaskKind,
    ) -> Features {
        Features {
            e_img: Some(tape.constant(nn::normal_init(rng, &[cfg.layout.n_eimg, cfg.d_enc], 0.5))),
            x_t: Some(tape.constant(nn::normal_init(
                rng,
                &[cfg.layout.xt_len(task), cfg.d_pix],
                0.5,
            ))),
            adapter: Some(tape.constant(nn::normal_init(
                rng,
                &[cfg.layout.n_adapter, cfg.d_enc],
                0.5,
            ))),
        }
    }

    #[test]
    fn logits_width_is_vocab_size() {
        let (ps, core, cfg) = setup();
        let mut rng = SplitMix64::new(1);
        let layout = seg_layout(&core, &cfg);
        let mut tape = Tape::<f64>::no_grad();
        let feats = make_feats(&mut tape, &cfg, &mut rng, TaskKind::ReferringSeg);
        let out = core.forward(&mut tape, &ps, &layout, &feats).unwrap();
        assert_eq!(tape.shape(out.logits), &[layout.len(), core.vocab.size()]);
    }

    #[test]
    fn placeholder_feature_mismatch_is_contract_error() {
        let (ps, core, cfg) = setup();
        let mut rng = SplitMix64::new(2);
        let layout = seg_layout(&core, &cfg);
        let mut tape = Tape::<f64>::no_grad();
        let mut feats = make_feats(&mut tape, &cfg, &mut rng, TaskKind::ReferringSeg);
        feats.adapter = None;
        assert!(matches!(
            core.forward(&mut tape, &ps, &layout, &feats),
            Err(LvlmError::Contract(_))
        ));
    }

    #[test]
    fn causality_exact() {
        let (ps, core, cfg) = setup();
        let layout = seg_layout(&core, &cfg);
        let t = layout.prefix_len + 2;
        let run = |swap: bool, rng_seed: u64| {
            let mut r2 = SplitMix64::new(rng_seed);
            let mut tape = Tape::<f64>::no_grad();
            let feats = make_feats(&mut tape, &cfg, &mut r2, TaskKind::ReferringSeg);
            let mut lay = layout.clone();
            if swap {
                lay.ids[t + 1] = core.vocab.special(Special::Sep);
            }
            let out = core.forward(&mut tape, &ps, &lay, &feats).unwrap();
            tape.value(out.hidden).clone()
        };
        let base = run(false, 9);
        let pert = run(true, 9);
        for i in 0..=t {
            for d in 0..cfg.d_model {
                assert_eq!(base[[i, d]], pert[[i, d]], "leak at pos {i}");
            }
        }
        // and the perturbed position itself must differ
        assert_ne!(base.index_axis(ndarray::Axis(0), t + 1), pert.index_axis(ndarray::Axis(0), t + 1));
    }

    #[test]
    fn mask_token_rows_equal_hidden_slices() {
        let (ps, core, cfg) = setup();
        let mut rng = SplitMix64::new(4);
        let layout = seg_layout(&core, &cfg);
        let mut tape = Tape::<f64>::no_grad();
        let feats = make_feats(&mut tape, &cfg, &mut rng, TaskKind::ReferringSeg);
        let out = core.forward(&mut tape, &ps, &layout, &feats).unwrap();
        let eq = core.extract_mask_tokens(&mut tape, &out, &layout).unwrap();
        assert_eq!(tape.shape(eq), &[cfg.n_seg, cfg.d_model]);
        let hv = tape.value(out.hidden).clone();
        let ev = tape.value(eq);
        for (r, p) in layout.mask_token_positions().into_iter().enumerate() {
            for d in 0..cfg.d_model {
                assert_eq!(ev[[r, d]], hv[[p, d]]);
            }
        }
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let (ps, core, cfg) = setup();
        let mut rng = SplitMix64::new(5);
        let layout = seg_layout(&core, &cfg);
        let mut tape = Tape::<f64>::no_grad();
        let feats = make_feats(&mut tape, &cfg, &mut rng, TaskKind::ReferringSeg);
        let out = core.forward(&mut tape, &ps, &layout, &feats).unwrap();
        let full_logits = tape.value(out.logits).clone();

        let e_img = tape.value(feats.e_img.unwrap()).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let x_t = tape.value(feats.x_t.unwrap()).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let ad = tape.value(feats.adapter.unwrap()).clone().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut cache = core.new_cache::<f64>();
        let mut logits = core
            .prefill(&ps, &mut cache, &layout, Some(&e_img), Some(&x_t), Some(&ad))
            .unwrap();
        // continue over the generated suffix
        for i in layout.prefix_len..layout.len() {
            let prev = full_logits.index_axis(ndarray::Axis(0), i - 1);
            for v in 0..core.vocab.size() {
                assert!(
                    (logits[v] - prev[v]).abs() < 1e-9,
                    "logit mismatch at pos {} vocab {v}",
                    i - 1
                );
            }
            let row = core.token_row(&ps, layout.ids[i], i);
            logits = core.step_row(&ps, &mut cache, &row);
        }
    }

    #[test]
    fn pooling_full_frame_equals_global_mean() {
        let mut rng = SplitMix64::new(6);
        let level = nn::normal_init::<f64>(&mut rng, &[8, 32, 32], 1.0);
        let cue = crate::shapesworld::derive_cue(&full_frame_mask(128, 128), CueMode::Mask, 0).unwrap();
        let pooled = pool_region_features(&level, &cue, (128, 128)).unwrap();
        for ch in 0..8 {
            let mean: f64 = level
                .index_axis(ndarray::Axis(0), ch)
                .iter()
                .sum::<f64>()
                / (32.0 * 32.0);
            assert!((pooled[ch] - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn pooling_constant_map_point_cue() {
        let level = ArrayD::from_elem(IxDyn(&[4, 32, 32]), 0.42f64);
        let cue = Cue {
            mode: CueMode::Point,
            payload: CuePayload::Point(64, 64),
        };
        let pooled = pool_region_features(&level, &cue, (128, 128)).unwrap();
        for ch in 0..4 {
            assert!((pooled[ch] - 0.42).abs() < 1e-12);
        }
    }
}
