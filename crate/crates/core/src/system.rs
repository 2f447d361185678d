//! The assembled system: every module built over one parameter store, the
//! per-task training losses, and the end-to-end inference pipelines
//! (referring segmentation, editing, generation) shared by training,
//! evaluation, and the CLI.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array3, ArrayD, IxDyn};
use sha2::{Digest, Sha256};

use crate::diffuser::{
    CondInputs, DiffError, Diffuser, DiffuserConfig, GuidanceInput, GuidanceMode, NoiseSchedule,
};
use crate::dualtok::{Branch, Discriminator, DualTokenizer, PerceptualNet, TokenGrid, TokenizerConfig};
use crate::encoders::{image_to_scalar, EncodeOut, Encoders, EncoderConfig};
use crate::grid::{downsample_area, ImageU8, Mask};
use crate::lvlm::{
    append_targets, build_prompt, decode_constrained, pool_region_features, Condition, Features,
    GrammarSpec,LanguageCore, LvlmConfig, LvlmError, PromptSchema, SamplerConfig, SequenceLayout,
    TaskKind, TokenClass,
};
use crate::metrics::{edit_fidelity, miou, psnr_ssim, EditFidelity, MetricError};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::scalar::Scalar;
use crate::segmenter::{rescale_for_diffusion, SegError, Segmenter, SegmenterConfig};
use crate::shapesworld::{
    derive_cue, make_edit_pair, CueMode, EditKind, GenConfig, Sample, ShapesError,
};
use crate::tensor::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum SystemError {
    #[error(transparent)]
    Lvlm(#[from] LvlmError),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Shapes(#[from] ShapesError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("encode: {0}")]
    Encode(#[from] crate::encoders::EncodeError),
    #[error("tokenizer: {0}")]
    Tok(#[from] crate::dualtok::TokError),
    #[error("system: {0}")]
    Other(String),
}

/// Every tunable in one place; the digest of its rendering stamps outputs.
#[derive(Debug, Clone)]
pub struct DeskConfig {
    pub canvas: usize,
    pub low_res: usize,
    pub enc: EncoderConfig,
    pub tok: TokenizerConfig,
    pub lvlm: LvlmConfig,
    pub seg: SegmenterConfig,
    pub diff: DiffuserConfig,
    pub schedule_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub gen: GenConfig,
    /// Probability of suppressing pixel-token conditioning inside the
    /// guidance region during diffusion training.
    pub suppress_prob: f64,
    /// Sampling steps used by evaluation pipelines.
    pub sample_steps: usize,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            canvas: 128,
            low_res: 64,
            enc: EncoderConfig::default(),
            tok: TokenizerConfig::default(),
            lvlm: LvlmConfig::default(),
            seg: SegmenterConfig::default(),
            diff: DiffuserConfig::default(),
            schedule_t: 400,
            beta_start: 1e-4,
            beta_end: 0.02,
            gen: GenConfig::default(),
            suppress_prob: 0.5,
            sample_steps: 80,
        }
    }
}

impl DeskConfig {
    pub fn render(&self) -> String {
        format!(
            "canvas={} low_res={} d_enc={} patch={} k_sem={} k_pix={} d_llm={} layers={} n_seg={} \
             mask_res={} latent={} T={} betas={}..{} sample_steps={} suppress={}",
            self.canvas,
            self.low_res,
            self.enc.d_model,
            self.enc.patch,
            self.tok.k_sem,
            self.tok.k_pix,
            self.lvlm.d_model,
            self.lvlm.layers,
            self.lvlm.n_seg,
            self.seg.mask_res,
            self.diff.latent_grid,
            self.schedule_t,
            self.beta_start,
            self.beta_end,
            self.sample_steps,
            self.suppress_prob,
        )
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.render().as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub struct Models {
    pub cfg: DeskConfig,
    pub enc: Encoders,
    pub tok: DualTokenizer,
    pub perc: PerceptualNet,
    pub disc: Discriminator,
    pub llm: LanguageCore,
    pub seg: Segmenter,
    pub diff: Diffuser,
    pub schedule: NoiseSchedule,
}

impl Models {
    pub fn build<T: Scalar>(ps: &mut ParamStore<T>, seed: u64, cfg: &DeskConfig) -> Self {
        let mut rng = SplitMix64::stream(seed, "models.init");
        let enc = Encoders::new(ps, &mut rng, &cfg.enc);
        let tok = DualTokenizer::new(ps, &mut rng, &cfg.tok);
        let perc = PerceptualNet::new(ps, &mut rng, "tokenizer.perceptual");
        let disc = Discriminator::new(ps, &mut rng, "tokenizer.discriminator");
        let llm = LanguageCore::new(ps, &mut rng, &cfg.lvlm, cfg.tok.k_sem, cfg.tok.k_pix);
        let seg = Segmenter::new(ps, &mut rng, &cfg.seg, &cfg.enc.level_channels);
        let diff = Diffuser::new(ps, &mut rng, &cfg.diff);
        let schedule =
            crate::diffuser::make_schedule(cfg.schedule_t, cfg.beta_start, cfg.beta_end)
                .expect("desk schedule");
        Models {
            cfg: cfg.clone(),
            enc,
            tok,
            perc,
            disc,
            llm,
            seg,
            diff,
            schedule,
        }
    }

    /// Low/high image variables for one canvas-resolution image.
    pub fn image_vars<T: Scalar>(&self, tape: &mut Tape<T>, img: &ImageU8) -> (Var, Var) {
        let high_f = img.to_chw_f32();
        let low_f = downsample_area(&high_f, self.cfg.canvas / self.cfg.low_res);
        let high = tape.constant(image_to_scalar::<T>(&high_f));
        let low = tape.constant(image_to_scalar::<T>(&low_f));
        (low, high)
    }

    /// Encoders + pixel-branch features for one image.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        img: &ImageU8,
    ) -> Result<Encoded, SystemError> {
        let (low, high) = self.image_vars(tape, img);
        let enc = self.enc.forward(tape, ps, low, high)?;
        let pix_feat = self.tok.pix_encoder.forward(tape, ps, low);
        Ok(Encoded {
            low,
            high,
            enc,
            pix_feat,
        })
    }

    /// X_T rows from the pixel feature grid; optionally pooled to the small
    /// footprint used by non-editing tasks.
    pub fn xt_rows<T: Scalar>(&self, tape: &mut Tape<T>, pix_feat: Var, pooled: bool) -> Var {
        let s = tape.shape(pix_feat).to_vec();
        let grid = if pooled {
            tape.avg_pool(pix_feat, 4)
        } else {
            pix_feat
        };
        let gs = tape.shape(grid).to_vec();
        let flat = tape.reshape(grid, &[s[0], gs[1] * gs[2]]);
        tape.transpose2(flat)
    }

    pub fn llm_features<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        encoded: &Encoded,
        task: TaskKind,
    ) -> Features {
        Features {
            e_img: Some(encoded.enc.embedding.fused),
            x_t: Some(self.xt_rows(tape, encoded.pix_feat, task != TaskKind::Editing)),
            adapter: Some(encoded.enc.adapter.queries),
        }
    }

    /// Quantize an image into its (semantic, pixel) token grids.
    pub fn target_tokens<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        img: &ImageU8,
    ) -> Result<(TokenGrid, TokenGrid), SystemError> {
        let mut tape = Tape::<T>::no_grad();
        let encoded = self.encode(&mut tape, ps, img)?;
        let qs = self
            .tok
            .semantic_quantize(&mut tape, ps, encoded.enc.embedding.pre_mlp, None)?;
        let (low, _) = self.image_vars(&mut tape, img);
        let (qp, _) = self.tok.pixel_quantize(&mut tape, ps, low, None)?;
        Ok((qs.grid, qp.grid))
    }

    pub fn grammar_for(&self, task: TaskKind) -> GrammarSpec {
        GrammarSpec::for_task(
            task,
            self.cfg.lvlm.n_seg,
            self.cfg.tok.sem_grid * self.cfg.tok.sem_grid,
            self.cfg.tok.pix_grid * self.cfg.tok.pix_grid,
            self.cfg.lvlm.layout.name_pad,
        )
    }
}

pub struct Encoded {
    pub low: Var,
    pub high: Var,
    pub enc: EncodeOut,
    pub pix_feat: Var,
}

// ---- prompt-embedding extraction ----------------------------------------

/// Mean of hidden rows over the unpadded condition span: the K=1 prompt
/// embedding for referring-style tasks.
pub fn pooled_condition<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: Var,
    layout: &SequenceLayout,
) -> Var {
    let n = layout.cond_tokens.max(1);
    let idx: Vec<usize> = (layout.cond_start..layout.cond_start + n).collect();
    let rows = tape.gather_rows(hidden, &idx);
    let mut avg = ArrayD::<T>::zeros(IxDyn(&[1, n]));
    avg.fill(T::from_f(1.0 / n as f64));
    let a = tape.constant(avg);
    tape.matmul(a, rows)
}

/// One prompt-embedding row per candidate category: the hidden state at the
/// category word's position in the condition.
pub fn category_conditions<T: Scalar>(
    tape: &mut Tape<T>,
    hidden: Var,
    layout: &SequenceLayout,
    core: &LanguageCore,
    categories: &[String],
) -> Result<Var, SystemError> {
    let mut idx = Vec::with_capacity(categories.len());
    for cat in categories {
        let id = core
            .vocab
            .word_id(cat)
            .ok_or_else(|| SystemError::Other(format!("unknown category {cat}")))?;
        let pos = (layout.cond_start..layout.cond_start + layout.cond_tokens)
            .find(|&p| layout.ids[p] == id)
            .ok_or_else(|| SystemError::Other(format!("category {cat} not in condition")))?;
        idx.push(pos);
    }
    Ok(tape.gather_rows(hidden, &idx))
}

// ---- training items -------------------------------------------------------

/// What one training item contributes.
pub struct ItemLosses {
    pub components: BTreeMap<&'static str, f64>,
    pub total: Var,
}

pub struct DiffusionTraining {
    pub mode: GuidanceMode,
    pub suppress: bool,
}

#[allow(clippy::large_enum_variant)]
pub enum TrainItem {
    Referring { expr_idx: usize },
    ClassSeg,
    Interactive { instance: usize, mode: CueMode },
    Caption,
    Generation,
    Edit {
        edit_idx: usize,
        diffusion: Option<DiffusionTraining>,
        /// Precomputed target token grids (valid while their producers are
        /// frozen); recomputed here when absent.
        targets: Option<(TokenGrid, TokenGrid)>,
    },
}

impl Models {
    /// Build the full loss graph for one training item on one sample.
    pub fn item_losses<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        sample: &Sample,
        edits: &[(EditKind, usize)],
        item: &TrainItem,
        rng: &mut SplitMix64,
    ) -> Result<ItemLosses, SystemError> {
        let lcfg = &self.cfg.lvlm.layout;
        let vocab_names: Vec<String> = sample.category_list.clone();
        match item {
            TrainItem::Caption => {
                let encoded = self.encode(tape, ps, &sample.image)?;
                let caption = sample.captions.first().cloned().unwrap_or_default();
                let layout = caption_layout(&self.llm, lcfg, &caption)?;
                let feats = self.llm_features(tape, &encoded, TaskKind::ReferringSeg);
                let out = self.llm.forward(tape, ps, &layout.0, &feats)?;
                let ce = tape.ce_mean(out.logits, &layout.1);
                Ok(ItemLosses {
                    components: BTreeMap::from([("ce", tape.scalar_value(ce).to_f())]),
                    total: ce,
                })
            }
            TrainItem::Referring { expr_idx } => {
                let (expr, target) = sample.referring_expressions
                    [expr_idx % sample.referring_expressions.len()]
                .clone();
                let schema = PromptSchema::text(TaskKind::ReferringSeg, &expr);
                let encoded = self.encode(tape, ps, &sample.image)?;
                let layout = build_prompt(&schema, &self.llm.vocab, lcfg)?;
                let tf = append_targets(layout, &self.llm.vocab, lcfg, &vocab_names, None, None)?;
                let feats = self.llm_features(tape, &encoded, schema.task);
                let out = self.llm.forward(tape, ps, &tf.layout, &feats)?;
                let ce = tape.ce_mean(out.logits, &tf.ce_targets);
                let e_q = self.llm.extract_mask_tokens(tape, &out, &tf.layout)?;
                let e_p = pooled_condition(tape, out.hidden, &tf.layout);
                let seg_out = self.seg.predict(tape, ps, e_p, e_q, &encoded.enc.pyramid)?;
                let gt = sample.instances()[target].mask.clone();
                let mr = self.seg.match_and_loss(tape, &seg_out, &[gt], &[0])?;
                let total0 = tape.add(ce, mr.total);
                Ok(ItemLosses {
                    components: BTreeMap::from([
                        ("ce", tape.scalar_value(ce).to_f()),
                        ("dice", tape.scalar_value(mr.dice).to_f()),
                        ("bce", tape.scalar_value(mr.bce).to_f()),
                        ("class_ce", tape.scalar_value(mr.class_ce).to_f()),
                    ]),
                    total: total0,
                })
            }
            TrainItem::ClassSeg => {
                let cond = sample.category_list.join(" , ");
                let schema = PromptSchema::text(TaskKind::ClassSeg, &cond);
                let encoded = self.encode(tape, ps, &sample.image)?;
                let layout = build_prompt(&schema, &self.llm.vocab, lcfg)?;
                let tf = append_targets(layout, &self.llm.vocab, lcfg, &vocab_names, None, None)?;
                let feats = self.llm_features(tape, &encoded, schema.task);
                let out = self.llm.forward(tape, ps, &tf.layout, &feats)?;
                let ce = tape.ce_mean(out.logits, &tf.ce_targets);
                let e_q = self.llm.extract_mask_tokens(tape, &out, &tf.layout)?;
                let e_p = category_conditions(
                    tape,
                    out.hidden,
                    &tf.layout,
                    &self.llm,
                    &sample.category_list,
                )?;
                let seg_out = self.seg.predict(tape, ps, e_p, e_q, &encoded.enc.pyramid)?;
                let gt_masks: Vec<Mask> =
                    sample.instances().iter().map(|i| i.mask.clone()).collect();
                let labels: Vec<usize> = sample
                    .instances()
                    .iter()
                    .map(|i| {
                        sample
                            .category_list
                            .iter()
                            .position(|c| c == i.kind.name())
                            .unwrap()
                    })
                    .collect();
                let mr = self.seg.match_and_loss(tape, &seg_out, &gt_masks, &labels)?;
                let total0 = tape.add(ce, mr.total);
                Ok(ItemLosses {
                    components: BTreeMap::from([
                        ("ce", tape.scalar_value(ce).to_f()),
                        ("dice", tape.scalar_value(mr.dice).to_f()),
                        ("bce", tape.scalar_value(mr.bce).to_f()),
                        ("class_ce", tape.scalar_value(mr.class_ce).to_f()),
                    ]),
                    total: total0,
                })
            }
            TrainItem::Interactive { instance, mode } => {
                let inst = *instance % sample.instances().len();
                let encoded = self.encode(tape, ps, &sample.image)?;
                let cue = derive_cue(&sample.instances()[inst].mask, *mode, rng.next_u64())?;
                let level0 = tape.value(encoded.enc.pyramid[0]).clone();
                let region = pool_region_features(&level0, &cue, sample.scene.canvas)?;
                let schema = PromptSchema {
                    task: TaskKind::InteractiveSeg,
                    condition: Condition::Region(region.iter().map(|v| v.to_f()).collect()),
                };
                let layout = build_prompt(&schema, &self.llm.vocab, lcfg)?;
                let tf = append_targets(layout, &self.llm.vocab, lcfg, &vocab_names, None, None)?;
                let feats = self.llm_features(tape, &encoded, schema.task);
                let out = self.llm.forward(tape, ps, &tf.layout, &feats)?;
                let ce = tape.ce_mean(out.logits, &tf.ce_targets);
                let e_q = self.llm.extract_mask_tokens(tape, &out, &tf.layout)?;
                let e_p = pooled_condition(tape, out.hidden, &tf.layout);
                let seg_out = self.seg.predict(tape, ps, e_p, e_q, &encoded.enc.pyramid)?;
                let gt = sample.instances()[inst].mask.clone();
                let mr = self.seg.match_and_loss(tape, &seg_out, &[gt], &[0])?;
                let total0 = tape.add(ce, mr.total);
                Ok(ItemLosses {
                    components: BTreeMap::from([
                        ("ce", tape.scalar_value(ce).to_f()),
                        ("dice", tape.scalar_value(mr.dice).to_f()),
                        ("bce", tape.scalar_value(mr.bce).to_f()),
                    ]),
                    total: total0,
                })
            }
            TrainItem::Generation => {
                let caption = sample.captions.first().cloned().unwrap_or_default();
                let schema = PromptSchema::text(TaskKind::Generation, &caption);
                let (sem, pix) = self.target_tokens(ps, &sample.image)?;
                let layout = build_prompt(&schema, &self.llm.vocab, lcfg)?;
                let tf = append_targets(
                    layout,
                    &self.llm.vocab,
                    lcfg,
                    &[],
                    Some(&sem.indices),
                    Some(&pix.indices),
                )?;
                let out = self.llm.forward(tape, ps, &tf.layout, &Features::none())?;
                let ce = tape.ce_mean(out.logits, &tf.ce_targets);
                Ok(ItemLosses {
                    components: BTreeMap::from([("ce", tape.scalar_value(ce).to_f())]),
                    total: ce,
                })
            }
            TrainItem::Edit {
                edit_idx,
                diffusion,
                targets,
            } => {
                let (kind, inst) = edits[edit_idx % edits.len()];
                let triplet = make_edit_pair(sample, kind, inst)?;
                let schema = PromptSchema::text(TaskKind::Editing, &triplet.instruction);
                let encoded = self.encode(tape, ps, &sample.image)?;
                let (sem_t, pix_t) = match targets {
                    Some((s, p)) => (s.clone(), p.clone()),
                    None => self.target_tokens(ps, &triplet.target)?,
                };
                let layout = build_prompt(&schema, &self.llm.vocab, lcfg)?;
                let tf = append_targets(
                    layout,
                    &self.llm.vocab,
                    lcfg,
                    &vocab_names,
                    Some(&sem_t.indices),
                    Some(&pix_t.indices),
                )?;
                let feats = self.llm_features(tape, &encoded, schema.task);
                let out = self.llm.forward(tape, ps, &tf.layout, &feats)?;
                let ce = tape.ce_mean(out.logits, &tf.ce_targets);
                let e_q = self.llm.extract_mask_tokens(tape, &out, &tf.layout)?;
                let e_p = pooled_condition(tape, out.hidden, &tf.layout);
                let seg_out = self.seg.predict(tape, ps, e_p, e_q, &encoded.enc.pyramid)?;
                let mr = self
                    .seg
                    .match_and_loss(tape, &seg_out, &[triplet.gt_mask.clone()], &[0])?;
                let mut components = BTreeMap::from([
                    ("ce", tape.scalar_value(ce).to_f()),
                    ("dice", tape.scalar_value(mr.dice).to_f()),
                    ("bce", tape.scalar_value(mr.bce).to_f()),
                ]);
                let mut total = tape.add(ce, mr.total);
                if let Some(dt) = diffusion {
                    let target_f = triplet.target.to_chw_f32();
                    let target64 =
                        downsample_area(&target_f, self.cfg.canvas / self.cfg.low_res);
                    let mask8 = triplet
                        .gt_mask
                        .downsample_mean(self.cfg.canvas / self.cfg.diff.latent_grid);
                    let eq_vals = eq_to_f32(tape.value(e_q));
                    let guidance = match dt.mode {
                        GuidanceMode::ExplicitMask => GuidanceInput::Mask(&mask8),
                        GuidanceMode::MaskTokenEmbedding => GuidanceInput::Embedding(&eq_vals),
                    };
                    let cond = CondInputs {
                        sem: &sem_t,
                        pix: &pix_t,
                        guidance,
                    };
                    let suppress = dt.suppress.then_some(&mask8);
                    let (dl, _t) = self.diff.train_step(
                        tape,
                        ps,
                        &self.tok,
                        &target64,
                        &cond,
                        &self.schedule,
                        rng,
                        suppress,
                    )?;
                    components.insert("recon_l2", tape.scalar_value(dl).to_f());
                    total = tape.add(total, dl);
                }
                Ok(ItemLosses {
                    components,
                    total,
                })
            }
        }
    }

    /// Diffusion pretraining loss for one plain sample: reconstruct the
    /// image from its own tokens under one instance's mask guidance.
    #[allow(clippy::too_many_arguments)]
    pub fn diffusion_pretrain_loss<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        ps: &ParamStore<T>,
        sample: &Sample,
        mode: GuidanceMode,
        e_q_rows: Option<&Array2<f32>>,
        tokens: Option<&(TokenGrid, TokenGrid)>,
        rng: &mut SplitMix64,
    ) -> Result<Var, SystemError> {
        let (sem, pix) = match tokens {
            Some((s, p)) => (s.clone(), p.clone()),
            None => self.target_tokens(ps, &sample.image)?,
        };
        let img_f = sample.image.to_chw_f32();
        let img64 = downsample_area(&img_f, self.cfg.canvas / self.cfg.low_res);
        let inst = rng.below(sample.instances().len());
        let mask8 = sample.instances()[inst]
            .mask
            .downsample_mean(self.cfg.canvas / self.cfg.diff.latent_grid);
        let suppress = rng.next_f64() < self.cfg.suppress_prob;
        let eq_store;
        let guidance = match mode {
            GuidanceMode::ExplicitMask => GuidanceInput::Mask(&mask8),
            GuidanceMode::MaskTokenEmbedding => {
                let rows = e_q_rows.ok_or_else(|| {
                    SystemError::Other("embedding guidance requires E_Q rows".into())
                })?;
                eq_store = rows.clone();
                GuidanceInput::Embedding(&eq_store)
            }
        };
        let cond = CondInputs {
            sem: &sem,
            pix: &pix,
            guidance,
        };
        let (loss, _t) = self.diff.train_step(
            tape,
            ps,
            &self.tok,
            &img64,
            &cond,
            &self.schedule,
            rng,
            suppress.then_some(&mask8),
        )?;
        Ok(loss)
    }

    /// E_Q rows for one sample under a referring prompt (used to train the
    /// embedding-guidance arm while the language core is frozen).
    pub fn reference_eq_rows<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        sample: &Sample,
        expr_idx: usize,
    ) -> Result<Array2<f32>, SystemError> {
        let mut tape = Tape::<T>::no_grad();
        let (expr, _) =
            sample.referring_expressions[expr_idx % sample.referring_expressions.len()].clone();
        let schema = PromptSchema::text(TaskKind::ReferringSeg, &expr);
        let encoded = self.encode(&mut tape, ps, &sample.image)?;
        let layout = build_prompt(&schema, &self.llm.vocab, &self.cfg.lvlm.layout)?;
        let tf = append_targets(
            layout,
            &self.llm.vocab,
            &self.cfg.lvlm.layout,
            &sample.category_list,
            None,
            None,
        )?;
        let feats = self.llm_features(&mut tape, &encoded, schema.task);
        let out = self.llm.forward(&mut tape, ps, &tf.layout, &feats)?;
        let e_q = self.llm.extract_mask_tokens(&mut tape, &out, &tf.layout)?;
        Ok(eq_to_f32(tape.value(e_q)))
    }
}

fn eq_to_f32<T: Scalar>(v: &ArrayD<T>) -> Array2<f32> {
    let (n, d) = (v.shape()[0], v.shape()[1]);
    Array2::from_shape_fn((n, d), |(i, j)| v[[i, j]].to_f() as f32)
}

/// Internal captioning layout for the adapter warm-up stage: BOS, image
/// block, caption, EOS; CE over the caption span.
fn caption_layout(
    core: &LanguageCore,
    lcfg: &crate::lvlm::LayoutConfig,
    caption: &str,
) -> Result<(SequenceLayout, Vec<usize>), LvlmError> {
    use crate::lvlm::{Role, Special};
    let vocab = &core.vocab;
    let mut ids = vec![vocab.special(Special::Bos)];
    let img_start = ids.len();
    let img_len = lcfg.n_eimg + lcfg.n_xt_pooled + lcfg.n_adapter;
    for _ in 0..img_len {
        ids.push(vocab.special(Special::Img));
    }
    let cap_start = ids.len();
    let toks = vocab.tokenize(caption).map_err(LvlmError::UnknownWord)?;
    ids.extend(&toks);
    ids.push(vocab.special(Special::Eos));
    let len = ids.len();
    let mut roles = vec![Role::Prompt; len];
    for r in roles.iter_mut().take(img_start + img_len).skip(img_start) {
        *r = Role::Image;
    }
    let mut ce = vec![usize::MAX; len];
    for p in cap_start..len {
        ce[p - 1] = ids[p];
    }
    Ok((
        SequenceLayout {
            task: TaskKind::ReferringSeg,
            ids,
            roles,
            img_start,
            img_len,
            region_pos: None,
            prefix_len: len,
            region_feature: None,
            cond_start: 0,
            cond_tokens: 0,
        },
        ce,
    ))
}

// ---- inference pipelines ---------------------------------------------------

pub struct SegPrediction {
    /// Best proposal's mask probabilities at the fixed resolution.
    pub mask: Array2<f32>,
    pub proposal_index: usize,
    pub proposals: Vec<crate::segmenter::MaskProposal>,
    pub emitted_names: Vec<String>,
}

pub struct EditOutcome {
    pub predicted_mask: Array2<f32>,
    pub edited64: Array3<f32>,
    pub sem: TokenGrid,
    pub pix: TokenGrid,
    pub fidelity: Option<EditFidelity>,
    pub mask_miou: Option<f64>,
}

impl Models {
    /// Decode a segmentation-style task and predict the referred mask.
    pub fn segment_pipeline<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        img: &ImageU8,
        schema: &PromptSchema,
        seed: u64,
    ) -> Result<SegPrediction, SystemError> {
        let lcfg = &self.cfg.lvlm.layout;
        let mut tape = Tape::<T>::no_grad();
        let encoded = self.encode(&mut tape, ps, img)?;
        let layout = build_prompt(schema, &self.llm.vocab, lcfg)?;
        let feats = self.llm_features(&mut tape, &encoded, schema.task);
        let e_img = feat_values(&tape, feats.e_img);
        let x_t = feat_values(&tape, feats.x_t);
        let adapter = feat_values(&tape, feats.adapter);
        let grammar = self.grammar_for(schema.task);
        let sampler = SamplerConfig {
            temperature: 0.0,
            top_k: 0,
            seed,
        };
        let dec = decode_constrained(
            &self.llm,
            ps,
            &layout,
            e_img.as_ref(),
            x_t.as_ref(),
            adapter.as_ref(),
            &grammar,
            &sampler,
        )?;
        let e_q_rows = dec
            .mask_hidden
            .ok_or_else(|| SystemError::Other("decode produced no mask tokens".into()))?;
        // prompt embedding from the prefix hidden rows
        let mut cache = self.llm.new_cache::<T>();
        let (rows, _) = self.llm.prefill_collect(
            ps,
            &mut cache,
            &layout,
            e_img.as_ref(),
            x_t.as_ref(),
            adapter.as_ref(),
            true,
        )?;
        let n = layout.cond_tokens.max(1);
        let mut pooled = Array1::<f64>::zeros(self.cfg.lvlm.d_model);
        for p in layout.cond_start..layout.cond_start + n {
            for d in 0..pooled.len() {
                pooled[d] += rows[p][d].to_f();
            }
        }
        pooled.mapv_inplace(|v| v / n as f64);

        let e_p = tape.constant(arr2_to_t::<T>(&Array2::from_shape_fn(
            (1, pooled.len()),
            |(_, j)| pooled[j] as f32,
        )));
        let e_q = tape.constant(arr2_to_t::<T>(&e_q_rows.mapv(|v| v as f32)));
        let seg_out = self
            .seg
            .predict(&mut tape, ps, e_p, e_q, &encoded.enc.pyramid)?;
        let proposals = seg_out.proposals(&tape);
        let best = pick_best(&proposals);
        let names = emitted_names(&self.llm, &dec.emitted);
        Ok(SegPrediction {
            mask: proposals[best].mask.clone(),
            proposal_index: best,
            proposals,
            emitted_names: names,
        })
    }

    /// Full editing pipeline: decode names/masks/tokens, segment, guide the
    /// diffusion decoder, and render the edit at the low resolution.
    #[allow(clippy::too_many_arguments)]
    pub fn edit_pipeline<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        source: &ImageU8,
        instruction: &str,
        seed: u64,
        mode: GuidanceMode,
        steps: usize,
        gt: Option<(&ImageU8, &Mask)>,
    ) -> Result<EditOutcome, SystemError> {
        let lcfg = &self.cfg.lvlm.layout;
        let schema = PromptSchema::text(TaskKind::Editing, instruction);
        let mut tape = Tape::<T>::no_grad();
        let encoded = self.encode(&mut tape, ps, source)?;
        let layout = build_prompt(&schema, &self.llm.vocab, lcfg)?;
        let feats = self.llm_features(&mut tape, &encoded, schema.task);
        let e_img = feat_values(&tape, feats.e_img);
        let x_t = feat_values(&tape, feats.x_t);
        let adapter = feat_values(&tape, feats.adapter);
        let grammar = self.grammar_for(TaskKind::Editing);
        let sampler = SamplerConfig {
            temperature: 0.0,
            top_k: 0,
            seed,
        };
        let dec = decode_constrained(
            &self.llm,
            ps,
            &layout,
            e_img.as_ref(),
            x_t.as_ref(),
            adapter.as_ref(),
            &grammar,
            &sampler,
        )?;
        let e_q_rows = dec
            .mask_hidden
            .ok_or_else(|| SystemError::Other("edit decode produced no mask tokens".into()))?;
        let (sem, pix) = grids_from_emitted(&self.llm, &self.cfg.tok, &dec.emitted)?;

        // segmentation from the decoded mask tokens
        let mut cache = self.llm.new_cache::<T>();
        let (rows, _) = self.llm.prefill_collect(
            ps,
            &mut cache,
            &layout,
            e_img.as_ref(),
            x_t.as_ref(),
            adapter.as_ref(),
            true,
        )?;
        let n = layout.cond_tokens.max(1);
        let mut pooled = Array1::<f64>::zeros(self.cfg.lvlm.d_model);
        for p in layout.cond_start..layout.cond_start + n {
            for d in 0..pooled.len() {
                pooled[d] += rows[p][d].to_f();
            }
        }
        pooled.mapv_inplace(|v| v / n as f64);
        let e_p = tape.constant(arr2_to_t::<T>(&Array2::from_shape_fn(
            (1, pooled.len()),
            |(_, j)| pooled[j] as f32,
        )));
        let eq_f32 = e_q_rows.mapv(|v| v as f32);
        let e_q = tape.constant(arr2_to_t::<T>(&eq_f32));
        let seg_out = self
            .seg
            .predict(&mut tape, ps, e_p, e_q, &encoded.enc.pyramid)?;
        let proposals = seg_out.proposals(&tape);
        let best = pick_best(&proposals);
        let mask128 = proposals[best].mask.clone();
        let mask8 = rescale_for_diffusion(
            &mask128,
            (self.cfg.diff.latent_grid, self.cfg.diff.latent_grid),
        )?;

        let guidance = match mode {
            GuidanceMode::ExplicitMask => GuidanceInput::Mask(&mask8),
            GuidanceMode::MaskTokenEmbedding => GuidanceInput::Embedding(&eq_f32),
        };
        let cond = CondInputs {
            sem: &sem,
            pix: &pix,
            guidance,
        };
        let edited64 = self
            .diff
            .sample(ps, &self.tok, &self.schedule, steps, &cond, seed)?;

        let (fidelity, mask_miou) = if let Some((target, gt_mask)) = gt {
            let factor = self.cfg.canvas / self.cfg.low_res;
            let src64 = downsample_area(&source.to_chw_f32(), factor);
            let tgt64 = downsample_area(&target.to_chw_f32(), factor);
            let gt64 = gt_mask.downsample_any(factor);
            let fid = edit_fidelity(&src64, &edited64, &tgt64, &gt64)?;
            let mi = miou(&[mask128.clone()], &[gt_mask.clone()], 0.5)?;
            (Some(fid), Some(mi))
        } else {
            (None, None)
        };
        Ok(EditOutcome {
            predicted_mask: mask128,
            edited64,
            sem,
            pix,
            fidelity,
            mask_miou,
        })
    }

    /// Text-to-image generation: decode visual tokens, then sample the
    /// diffusion decoder under neutral (full-frame) mask guidance.
    pub fn generate_pipeline<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        prompt: &str,
        seed: u64,
        steps: usize,
        temperature: f64,
    ) -> Result<(Array3<f32>, TokenGrid, TokenGrid), SystemError> {
        let schema = PromptSchema::text(TaskKind::Generation, prompt);
        let layout = build_prompt(&schema, &self.llm.vocab, &self.cfg.lvlm.layout)?;
        let grammar = self.grammar_for(TaskKind::Generation);
        let sampler = SamplerConfig {
            temperature,
            top_k: 16,
            seed,
        };
        let dec = decode_constrained::<T>(
            &self.llm,
            ps,
            &layout,
            None,
            None,
            None,
            &grammar,
            &sampler,
        )?;
        let (sem, pix) = grids_from_emitted(&self.llm, &self.cfg.tok, &dec.emitted)?;
        let g = self.cfg.diff.latent_grid;
        let neutral = Array2::<f32>::from_elem((g, g), 1.0);
        let cond = CondInputs {
            sem: &sem,
            pix: &pix,
            guidance: GuidanceInput::Mask(&neutral),
        };
        let img = self
            .diff
            .sample(ps, &self.tok, &self.schedule, steps, &cond, seed)?;
        Ok((img, sem, pix))
    }

    /// Tokenizer reconstruction quality on one image: (PSNR dB, mean cosine).
    pub fn tokenizer_eval<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        img: &ImageU8,
    ) -> Result<(f64, f64), SystemError> {
        let mut tape = Tape::<T>::no_grad();
        let encoded = self.encode(&mut tape, ps, img)?;
        let qs = self
            .tok
            .semantic_quantize(&mut tape, ps, encoded.enc.embedding.pre_mlp, None)?;
        let dec = self.tok.semantic_decode(&mut tape, ps, &qs)?;
        let cos_loss = crate::dualtok::cosine_loss(&mut tape, dec, encoded.enc.embedding.pre_mlp);
        let cos = 1.0 - tape.scalar_value(cos_loss).to_f();
        let (qp, _) = self.tok.pixel_quantize(&mut tape, ps, encoded.low, None)?;
        let rec = self.tok.joint_decode(&mut tape, ps, qs.st, qp.st)?;
        let rec_f = arr3_to_f32(tape.value(rec));
        let low_f = arr3_to_f32(tape.value(encoded.low));
        let (psnr, _) = psnr_ssim(&rec_f, &low_f)?;
        Ok((psnr, cos))
    }
}

fn feat_values<T: Scalar>(tape: &Tape<T>, v: Option<Var>) -> Option<Array2<T>> {
    v.map(|x| {
        tape.value(x)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    })
}

fn arr2_to_t<T: Scalar>(a: &Array2<f32>) -> ArrayD<T> {
    let mut out = ArrayD::<T>::zeros(IxDyn(&[a.nrows(), a.ncols()]));
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out[[i, j]] = T::from_f(a[(i, j)] as f64);
        }
    }
    out
}

fn arr3_to_f32<T: Scalar>(a: &ArrayD<T>) -> Array3<f32> {
    Array3::from_shape_fn((a.shape()[0], a.shape()[1], a.shape()[2]), |(c, y, x)| {
        a[[c, y, x]].to_f() as f32
    })
}

/// Highest-objectness proposal.
fn pick_best(proposals: &[crate::segmenter::MaskProposal]) -> usize {
    let mut best = 0usize;
    for (i, p) in proposals.iter().enumerate() {
        if p.objectness() > proposals[best].objectness() {
            best = i;
        }
    }
    best
}

fn emitted_names(core: &LanguageCore, emitted: &[usize]) -> Vec<String> {
    emitted
        .iter()
        .take_while(|&&id| matches!(core.vocab.class_of(id), TokenClass::Text))
        .filter_map(|&id| core.vocab.word_of(id).map(|s| s.to_string()))
        .collect()
}

/// Token grids from an emitted id stream (generation/editing decodes).
fn grids_from_emitted(
    core: &LanguageCore,
    tok_cfg: &TokenizerConfig,
    emitted: &[usize],
) -> Result<(TokenGrid, TokenGrid), SystemError> {
    let mut sem = Vec::new();
    let mut pix = Vec::new();
    for &id in emitted {
        match core.vocab.class_of(id) {
            TokenClass::Sem(c) => sem.push(c),
            TokenClass::Pix(c) => pix.push(c),
            _ => {}
        }
    }
    let g = tok_cfg.sem_grid;
    let p = tok_cfg.pix_grid;
    if sem.len() != g * g || pix.len() != p * p {
        return Err(SystemError::Other(format!(
            "decoded {} semantic / {} pixel tokens, expected {} / {}",
            sem.len(),
            pix.len(),
            g * g,
            p * p
        )));
    }
    Ok((
        TokenGrid {
            branch: Branch::Semantic,
            h: g,
            w: g,
            indices: sem,
        },
        TokenGrid {
            branch: Branch::Pixel,
            h: p,
            w: p,
            indices: pix,
        },
    ))
}
