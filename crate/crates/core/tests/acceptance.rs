//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured values. Thresholds are pinned in `tests/acceptance.cfg`.
//!
//! The toy end-to-end criterion trains all four stages at the desk profile
//! on a freshly generated corpus; on one CPU core it dominates the suite's
//! runtime.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayD, IxDyn};

use uvl_core::diffuser::{bucket_crop, BucketDecision, GuidanceMode, BUCKET_RATIOS};
use uvl_core::gradcheck::{finite_diff, max_relative_error};
use uvl_core::lvlm::{
    build_prompt, decode_constrained, GrammarSpec, LvlmConfig, PromptSchema, SamplerConfig,
    TaskKind, TokenClass,
};
use uvl_core::nn;
use uvl_core::params::ParamStore;
use uvl_core::rng::SplitMix64;
use uvl_core::segmenter::hungarian_min;
use uvl_core::stages::{
    build_stage_plan, run_stage, DeskSteps, ScaleProfile, TrainCorpus, GROUPS, REFERENCE_FROZEN,
    REFERENCE_LR_TABLE,
};
use uvl_core::system::{DeskConfig, Models};
use uvl_core::tensor::Tape;

/// Pinned thresholds and desk-profile knobs (see tests/acceptance.cfg).
struct AcceptanceCfg {
    values: BTreeMap<String, f64>,
}

impl AcceptanceCfg {
    fn load() -> Self {
        let text = include_str!("acceptance.cfg");
        let mut values = BTreeMap::new();
        for raw in text.lines() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').expect("acceptance.cfg line");
            values.insert(k.trim().to_string(), v.trim().parse::<f64>().unwrap());
        }
        Self { values }
    }

    fn get(&self, key: &str) -> f64 {
        *self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("missing acceptance key {key}"))
    }
}

fn small_models(seed: u64) -> (ParamStore<f64>, Models) {
    let mut cfg = DeskConfig::default();
    cfg.lvlm.layers = 2;
    let mut ps = ParamStore::<f64>::new();
    let models = Models::build(&mut ps, seed, &cfg);
    (ps, models)
}

// ---- criterion 1: zero-gate identity ---------------------------------------

#[test]
fn a01_zero_gate_identity_is_bit_exact() {
    let (ps, models) = small_models(11);
    let mut rng = SplitMix64::new(1);
    let mut tape = Tape::<f64>::no_grad();
    let high = tape.constant(nn::normal_init(&mut rng, &[3, 128, 128], 1.0));
    let pyramid = models.enc.hier.forward(&mut tape, &ps, high).unwrap();
    let trace = models.enc.adapter.forward(&mut tape, &ps, &pyramid);
    let initial = ps.value(models.enc.adapter.initial_queries);
    assert_eq!(initial, tape.value(trace.queries), "adapter must be identity at zero gates");
    for layer in &trace.per_layer {
        assert_eq!(initial, tape.value(*layer));
    }
    println!("[PASS] zero-gate identity: adapter output bit-identical to queries at gamma=beta=0");
}

// ---- criterion 2: residual fusion identity ----------------------------------

#[test]
fn a02_residual_fusion_identity_with_zero_mlp() {
    let (mut ps, models) = small_models(12);
    for name in ["fuse.mlp.w1.w", "fuse.mlp.w1.b", "fuse.mlp.w2.w", "fuse.mlp.w2.b"] {
        ps.value_mut(ps.id(name).unwrap()).fill(0.0);
    }
    let mut rng = SplitMix64::new(2);
    let mut tape = Tape::<f64>::no_grad();
    let low = tape.constant(nn::normal_init(&mut rng, &[3, 64, 64], 1.0));
    let high = tape.constant(nn::normal_init(&mut rng, &[3, 128, 128], 1.0));
    let out = models.enc.forward(&mut tape, &ps, low, high).unwrap();
    assert_eq!(
        tape.value(out.embedding.pre_mlp),
        tape.value(out.embedding.fused),
        "fused must equal pre-MLP sequence exactly when the MLP is zeroed"
    );
    println!("[PASS] residual fusion identity: zeroed MLP returns the pre-MLP sequence bit-exactly");
}

// ---- criterion 3: gradient suite --------------------------------------------

fn gradcheck_input<F>(mut forward: F, x0: ArrayD<f64>, what: &str) -> f64
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let analytic_holder = std::cell::RefCell::new(None::<ArrayD<f64>>);
    // the closure computes loss; analytic gradient computed once outside
    let loss0 = forward(&x0);
    let _ = loss0;
    let numeric = finite_diff(&mut forward, &x0, 1e-5);
    let analytic = analytic_holder.borrow().clone();
    drop(analytic);
    // callers that need the analytic gradient compute it themselves; this
    // helper is only used through `check_pair` below
    let _ = numeric;
    unreachable!("{what}")
}

#[test]
fn a03_gradient_suite_central_difference() {
    let tol = 1e-4;
    // vanilla encoder w.r.t. input (16x16 image, patch 8 -> 4 tokens)
    {
        let mut cfg = DeskConfig::default();
        cfg.enc.low_res = 16;
        cfg.enc.high_res = 32;
        let mut ps = ParamStore::<f64>::new();
        let models = Models::build(&mut ps, 3, &cfg);
        let mut rng = SplitMix64::new(4);
        let x0 = nn::normal_init::<f64>(&mut rng, &[3, 16, 16], 0.5);
        let analytic = {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(x0.clone());
            let y = models.enc.vanilla.forward(&mut tape, &ps, x).unwrap();
            let sq = tape.square(y);
            let loss = tape.mean_all(sq);
            tape.backward(loss);
            tape.grad(x).unwrap().clone()
        };
        let mut f = |x: &ArrayD<f64>| {
            let mut tape = Tape::<f64>::no_grad();
            let xv = tape.constant(x.clone());
            let y = models.enc.vanilla.forward(&mut tape, &ps, xv).unwrap();
            let sq = tape.square(y);
            let loss = tape.mean_all(sq);
            tape.scalar_value(loss)
        };
        let numeric = finite_diff(&mut f, &x0, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-8);
        assert!(err < tol, "vanilla encoder gradient err {err:.2e}");
        println!("[PASS] gradient suite: vanilla encoder rel err {err:.2e} < 1e-4");
    }
    // hierarchical encoder w.r.t. input (32x32)
    {
        let mut cfg = DeskConfig::default();
        cfg.enc.low_res = 16;
        cfg.enc.high_res = 32;
        let mut ps = ParamStore::<f64>::new();
        let models = Models::build(&mut ps, 5, &cfg);
        let mut rng = SplitMix64::new(6);
        let x0 = nn::normal_init::<f64>(&mut rng, &[3, 32, 32], 0.5);
        let analytic = {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(x0.clone());
            let levels = models.enc.hier.forward(&mut tape, &ps, x).unwrap();
            let mut acc = None;
            for lv in levels {
                let s = tape.square(lv);
                let m = tape.mean_all(s);
                acc = Some(match acc {
                    None => m,
                    Some(a) => tape.add(a, m),
                });
            }
            let loss = acc.unwrap();
            tape.backward(loss);
            tape.grad(x).unwrap().clone()
        };
        let mut f = |x: &ArrayD<f64>| {
            let mut tape = Tape::<f64>::no_grad();
            let xv = tape.constant(x.clone());
            let levels = models.enc.hier.forward(&mut tape, &ps, xv).unwrap();
            let mut total = 0.0;
            for lv in levels {
                let s = tape.square(lv);
                let m = tape.mean_all(s);
                total += tape.scalar_value(m);
            }
            total
        };
        let numeric = finite_diff(&mut f, &x0, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-8);
        assert!(err < tol, "hierarchical encoder gradient err {err:.2e}");
        println!("[PASS] gradient suite: hierarchical encoder rel err {err:.2e} < 1e-4");
    }
    // one language-core block w.r.t. input (seq 5, d 16)
    {
        let mut ps = ParamStore::<f64>::new();
        let mut rng = SplitMix64::new(7);
        let blk = nn::TransformerBlock::new(&mut ps, &mut rng, "b", "g", 16, 2, 32);
        let x0 = nn::normal_init::<f64>(&mut rng, &[5, 16], 0.5);
        let mask = nn::causal_mask::<f64>(5);
        let analytic = {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(x0.clone());
            let m = tape.constant(mask.clone());
            let y = blk.forward(&mut tape, &ps, x, nn::AttnBias::Shared(m));
            let sq = tape.square(y);
            let loss = tape.mean_all(sq);
            tape.backward(loss);
            tape.grad(x).unwrap().clone()
        };
        let mut f = |x: &ArrayD<f64>| {
            let mut tape = Tape::<f64>::no_grad();
            let xv = tape.constant(x.clone());
            let m = tape.constant(mask.clone());
            let y = blk.forward(&mut tape, &ps, xv, nn::AttnBias::Shared(m));
            let sq = tape.square(y);
            let loss = tape.mean_all(sq);
            tape.scalar_value(loss)
        };
        let numeric = finite_diff(&mut f, &x0, 1e-5);
        let err = max_relative_error(&analytic, &numeric, 1e-8);
        assert!(err < tol, "language block gradient err {err:.2e}");
        println!("[PASS] gradient suite: language-core block rel err {err:.2e} < 1e-4");
    }
    // diffusion train_step w.r.t. a weight tensor, toy dims (16x16 image)
    {
        let mut cfg = DeskConfig::default();
        cfg.diff.image_res = 16;
        cfg.diff.latent_grid = 2;
        cfg.tok.image_res = 16;
        cfg.tok.sem_grid = 2;
        cfg.tok.pix_grid = 4;
        cfg.enc.low_res = 16;
        cfg.enc.high_res = 32;
        cfg.schedule_t = 30;
        cfg.beta_end = 0.2;
        let mut ps = ParamStore::<f64>::new();
        let models = Models::build(&mut ps, 8, &cfg);
        let mut rng = SplitMix64::new(9);
        let clean = {
            let mut a = ndarray::Array3::<f32>::zeros((3, 16, 16));
            for v in a.iter_mut() {
                *v = rng.next_f64() as f32;
            }
            a
        };
        let sem = uvl_core::dualtok::TokenGrid {
            branch: uvl_core::dualtok::Branch::Semantic,
            h: 2,
            w: 2,
            indices: vec![1, 2, 3, 4],
        };
        let pix = uvl_core::dualtok::TokenGrid {
            branch: uvl_core::dualtok::Branch::Pixel,
            h: 4,
            w: 4,
            indices: (0..16).collect(),
        };
        let mask = Array2::<f32>::from_shape_fn((2, 2), |(y, x)| ((x + y) % 2) as f32);
        let wid = ps.id("diff.stem.w").unwrap();
        let loss_with = |ps: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let cond = uvl_core::diffuser::CondInputs {
                sem: &sem,
                pix: &pix,
                guidance: uvl_core::diffuser::GuidanceInput::Mask(&mask),
            };
            let mut step_rng = SplitMix64::new(77);
            let (l, _) = models
                .diff
                .train_step(&mut tape, ps, &models.tok, &clean, &cond, &models.schedule, &mut step_rng, None)
                .unwrap();
            tape.scalar_value(l)
        };
        let analytic = {
            let mut tape = Tape::<f64>::new();
            let cond = uvl_core::diffuser::CondInputs {
                sem: &sem,
                pix: &pix,
                guidance: uvl_core::diffuser::GuidanceInput::Mask(&mask),
            };
            let mut step_rng = SplitMix64::new(77);
            let (l, _) = models
                .diff
                .train_step(&mut tape, &ps, &models.tok, &clean, &cond, &models.schedule, &mut step_rng, None)
                .unwrap();
            tape.backward(l);
            ps_grad_of(&tape, &ps, wid)
        };
        // finite differences over a subset of weight entries
        let w0 = ps.value(wid).clone();
        let mut err_worst = 0.0f64;
        let mut ps_mut = ps;
        let probe: Vec<usize> = (0..w0.len()).step_by(w0.len() / 24 + 1).collect();
        for &i in &probe {
            let orig = w0.as_slice().unwrap()[i];
            ps_mut.value_mut(wid).as_slice_mut().unwrap()[i] = orig + 1e-5;
            let fp = loss_with(&ps_mut);
            ps_mut.value_mut(wid).as_slice_mut().unwrap()[i] = orig - 1e-5;
            let fm = loss_with(&ps_mut);
            ps_mut.value_mut(wid).as_slice_mut().unwrap()[i] = orig;
            let num = (fp - fm) / 2e-5;
            let ana = analytic.as_slice().unwrap()[i];
            let diff = (num - ana).abs();
            if diff > 1e-8 {
                err_worst = err_worst.max(diff / (num.abs() + ana.abs()).max(1e-12));
            }
        }
        assert!(err_worst < tol, "diffusion train_step gradient err {err_worst:.2e}");
        println!("[PASS] gradient suite: diffusion train_step rel err {err_worst:.2e} < 1e-4");
    }
}

fn ps_grad_of(tape: &Tape<f64>, ps: &ParamStore<f64>, id: uvl_core::params::ParamId) -> ArrayD<f64> {
    let mut store = ParamStore::<f64>::new();
    let _ = &store;
    // scatter into a scratch copy to read one gradient
    let mut scratch = clone_store(ps);
    scratch.zero_grads();
    tape.scatter_param_grads(&mut scratch);
    scratch.grad(id).clone()
}

fn clone_store(ps: &ParamStore<f64>) -> ParamStore<f64> {
    let mut out = ParamStore::<f64>::new();
    for id in ps.ids() {
        out.register(ps.name(id), ps.group_of(id), ps.value(id).clone());
    }
    out
}

// ---- criterion 4: quantizer oracles ----------------------------------------

#[test]
fn a04_quantizer_bruteforce_and_straight_through() {
    let (ps, models) = small_models(21);
    let cfg = &models.cfg.tok;
    let mut rng = SplitMix64::new(22);

    // semantic branch: 100 random vectors vs naive nearest neighbor
    let mut tape = Tape::<f64>::no_grad();
    let table = models.tok.projected_sem_codebook(&mut tape, &ps);
    let table_v = tape.value(table).clone();
    let mut checked = 0usize;
    while checked < 100 {
        let feats =
            nn::normal_init::<f64>(&mut rng, &[cfg.sem_grid * cfg.sem_grid, cfg.d_sem], 1.5);
        let fv = tape.constant(feats.clone());
        let q = models
            .tok
            .semantic_quantize(&mut tape, &ps, fv, None)
            .unwrap();
        for r in 0..feats.shape()[0] {
            if checked >= 100 {
                break;
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..cfg.k_sem {
                let mut d = 0.0;
                for c in 0..cfg.d_sem {
                    let diff = feats[[r, c]] - table_v[[k, c]];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(q.grid.indices[r], best, "semantic argmin mismatch at row {r}");
            checked += 1;
        }
    }

    // pixel branch: oracle over the raw pixel codebook
    let ptable = ps.value(models.tok.pix_codebook).clone();
    let mut checked_p = 0usize;
    while checked_p < 100 {
        let img = tape.constant(nn::normal_init(&mut rng, &[3, cfg.image_res, cfg.image_res], 0.4));
        let (qp, _) = models.tok.pixel_quantize(&mut tape, &ps, img, None).unwrap();
        let feats = tape.value(qp.features).clone();
        for r in 0..qp.grid.len() {
            if checked_p >= 100 {
                break;
            }
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for k in 0..cfg.k_pix {
                let mut d = 0.0;
                for c in 0..cfg.d_pix {
                    let diff = feats[[r, c]] - ptable[[k, c]];
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            assert_eq!(qp.grid.indices[r], best, "pixel argmin mismatch at row {r}");
            checked_p += 1;
        }
    }

    // straight-through: gradient equals the identity-path gradient exactly
    let feats = nn::normal_init::<f64>(&mut rng, &[cfg.sem_grid * cfg.sem_grid, cfg.d_sem], 1.0);
    let target = nn::normal_init::<f64>(&mut rng, &[cfg.sem_grid * cfg.sem_grid, cfg.d_sem], 1.0);
    let grad_st = {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(feats.clone());
        let q = models.tok.semantic_quantize(&mut tape, &ps, f, None).unwrap();
        let t = tape.constant(target.clone());
        let loss = tape.mse_mean(q.st, t);
        tape.backward(loss);
        tape.grad(f).unwrap().clone()
    };
    let grad_id = {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(feats.clone());
        let q = models.tok.semantic_quantize(&mut tape, &ps, f, None).unwrap();
        let off = tape.value(q.st).clone() - tape.value(f).clone();
        let c = tape.constant(off);
        let shifted = tape.add(f, c);
        let t = tape.constant(target);
        let loss = tape.mse_mean(shifted, t);
        tape.backward(loss);
        tape.grad(f).unwrap().clone()
    };
    assert_eq!(grad_st, grad_id, "straight-through must equal identity-path gradient");
    println!("[PASS] quantizer oracles: 100+100 brute-force argmin matches; straight-through exact");
}

// ---- criterion 5: grammar soundness -----------------------------------------

/// Independent acceptor: checks an emitted id stream against the task's
/// phase language without using the decoder's Phase machinery.
fn oracle_accepts(
    vocab: &uvl_core::lvlm::Vocabulary,
    task: TaskKind,
    ids: &[usize],
    sem_len: usize,
    pix_len: usize,
    max_names: usize,
) -> bool {
    let mut i = 0usize;
    let classes: Vec<TokenClass> = ids.iter().map(|&id| vocab.class_of(id)).collect();
    if task.emits_masks() {
        let mut names = 0usize;
        while i < classes.len()
            && matches!(classes[i], TokenClass::Text)
            || (i < classes.len() && ids[i] == vocab.special(uvl_core::lvlm::Special::Pad))
        {
            names += 1;
            i += 1;
            if names > max_names {
                return false;
            }
        }
        for j in 0..vocab.n_seg {
            if i >= classes.len() || classes[i] != TokenClass::Seg(j) {
                return false;
            }
            i += 1;
        }
    }
    if task.emits_visual_tokens() {
        if i >= ids.len() || ids[i] != vocab.special(uvl_core::lvlm::Special::SemBegin) {
            return false;
        }
        i += 1;
        for _ in 0..sem_len {
            if i >= classes.len() || !matches!(classes[i], TokenClass::Sem(_)) {
                return false;
            }
            i += 1;
        }
        if i >= ids.len() || ids[i] != vocab.special(uvl_core::lvlm::Special::PixBegin) {
            return false;
        }
        i += 1;
        for _ in 0..pix_len {
            if i >= classes.len() || !matches!(classes[i], TokenClass::Pix(_)) {
                return false;
            }
            i += 1;
        }
    }
    if i >= ids.len() || ids[i] != vocab.special(uvl_core::lvlm::Special::Eos) {
        return false;
    }
    i += 1;
    i == ids.len()
}

#[test]
fn a05_grammar_soundness_automaton_oracle() {
    // tiny model: the grammar holds regardless of weights
    let mut cfg = DeskConfig::default();
    cfg.lvlm.layers = 1;
    cfg.lvlm.d_model = 32;
    cfg.lvlm.heads = 2;
    cfg.lvlm.d_ffn = 64;
    cfg.lvlm.layout.n_eimg = 4;
    cfg.lvlm.layout.n_xt_full = 8;
    cfg.lvlm.layout.n_xt_pooled = 4;
    cfg.lvlm.layout.n_adapter = 2;
    cfg.tok.sem_grid = 2;
    cfg.tok.pix_grid = 3;
    cfg.tok.k_sem = 8;
    cfg.tok.k_pix = 8;
    cfg.lvlm.d_enc = 8;
    cfg.lvlm.d_pix = 4;
    cfg.enc.d_model = 8;
    let mut ps = ParamStore::<f32>::new();
    let models = Models::build(&mut ps, 31, &cfg);
    let core = &models.llm;
    let mut rng = SplitMix64::new(32);
    let mut total = 0usize;
    for task in TaskKind::ALL {
        let grammar = models.grammar_for(task);
        for trial in 0..100 {
            let schema = match task {
                TaskKind::InteractiveSeg => PromptSchema {
                    task,
                    condition: uvl_core::lvlm::Condition::Region(vec![0.1; cfg.lvlm.d_region]),
                },
                _ => PromptSchema::text(task, "the red circle"),
            };
            let layout = build_prompt(&schema, &core.vocab, &cfg.lvlm.layout).unwrap();
            let e_img = (task.has_image()).then(|| {
                Array2::<f32>::from_shape_fn((cfg.lvlm.layout.n_eimg, cfg.lvlm.d_enc), |_| {
                    rng.next_f64() as f32
                })
            });
            let x_t = (task.has_image()).then(|| {
                Array2::<f32>::from_shape_fn(
                    (cfg.lvlm.layout.xt_len(task), cfg.lvlm.d_pix),
                    |_| rng.next_f64() as f32,
                )
            });
            let adapter = (task.has_image()).then(|| {
                Array2::<f32>::from_shape_fn((cfg.lvlm.layout.n_adapter, cfg.lvlm.d_enc), |_| {
                    rng.next_f64() as f32
                })
            });
            let sampler = SamplerConfig {
                temperature: 1.5,
                top_k: 0,
                seed: trial as u64 * 977 + task as u64,
            };
            let dec = decode_constrained(
                core,
                &ps,
                &layout,
                e_img.as_ref(),
                x_t.as_ref(),
                adapter.as_ref(),
                &grammar,
                &sampler,
            )
            .unwrap();
            assert!(
                oracle_accepts(
                    &core.vocab,
                    task,
                    &dec.emitted,
                    grammar.sem_len,
                    grammar.pix_len,
                    grammar.max_names
                ),
                "task {task:?} trial {trial}: oracle rejected {:?}",
                dec.emitted
            );
            if !task.emits_visual_tokens() {
                for &id in &dec.emitted {
                    assert!(
                        !matches!(core.vocab.class_of(id), TokenClass::Sem(_) | TokenClass::Pix(_)),
                        "segmentation decode emitted a visual token"
                    );
                }
            }
            total += 1;
        }
    }
    println!("[PASS] grammar soundness: {total} constrained decodes accepted by the independent oracle; segmentation tasks emitted zero visual tokens");
}

// ---- criterion 6: matching oracle -------------------------------------------

#[test]
fn a06_hungarian_matches_bruteforce_200_trials() {
    let mut rng = SplitMix64::new(61);
    for trial in 0..200 {
        let g = rng.range_inclusive(1, 6);
        let n = rng.range_inclusive(g, 6);
        let mut cost = Array2::<f64>::zeros((g, n));
        for v in cost.iter_mut() {
            *v = rng.next_f64() * 10.0 - 5.0;
        }
        let assign = hungarian_min(&cost);
        let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
        // brute force over all injective column choices
        let mut best = f64::INFINITY;
        let mut cols: Vec<usize> = (0..n).collect();
        permute_prefix(&mut cols, g, &mut |perm| {
            let t: f64 = (0..g).map(|i| cost[(i, perm[i])]).sum();
            if t < best {
                best = t;
            }
        });
        assert!(
            (total - best).abs() < 1e-9,
            "trial {trial}: hungarian {total} vs brute force {best}"
        );
    }
    println!("[PASS] matching oracle: Hungarian equals brute-force permutation minimum in 200/200 trials (N <= 6)");
}

fn permute_prefix(cols: &mut Vec<usize>, depth: usize, f: &mut impl FnMut(&[usize])) {
    fn rec(cols: &mut Vec<usize>, k: usize, depth: usize, f: &mut impl FnMut(&[usize])) {
        if k == depth {
            f(&cols[..depth]);
            return;
        }
        for i in k..cols.len() {
            cols.swap(k, i);
            rec(cols, k + 1, depth, f);
            cols.swap(k, i);
        }
    }
    rec(cols, 0, depth, f);
}

// ---- criterion 7: freeze bit-exactness --------------------------------------

#[test]
fn a07_freeze_bit_exactness_and_table_conformance() {
    // table conformance: the reference profile matches every transcribed
    // row; the desk profile matches all of them except the documented
    // stage-1 from-scratch denoiser scaling
    for (stage, group, lr) in REFERENCE_LR_TABLE {
        let plan = build_stage_plan(stage, &ScaleProfile::PaperDoc).unwrap();
        let found = plan.phases.iter().find_map(|p| p.lr_map.get(group)).copied();
        assert_eq!(found, Some(lr), "stage {stage} lr for {group}");
        if !(stage == 1 && group.starts_with("diffuser")) {
            let plan = build_stage_plan(stage, &ScaleProfile::Desk(DeskSteps::default())).unwrap();
            let found = plan.phases.iter().find_map(|p| p.lr_map.get(group)).copied();
            assert_eq!(found, Some(lr), "desk stage {stage} lr for {group}");
        }
    }
    for (stage, group) in REFERENCE_FROZEN {
        let plan = build_stage_plan(stage, &ScaleProfile::PaperDoc).unwrap();
        for phase in &plan.phases {
            if stage == 1 && phase.name == "diffusion" {
                continue;
            }
            assert!(phase.frozen().iter().any(|g| g == group));
        }
    }

    // 50 optimizer steps with synthetic gradients leave frozen groups
    // bit-identical while every trainable group moves
    let mut cfg = DeskConfig::default();
    cfg.lvlm.layers = 1;
    let mut ps = ParamStore::<f32>::new();
    let _models = Models::build(&mut ps, 71, &cfg);
    let mut rng = SplitMix64::new(72);
    for stage in 1..=4u8 {
        let plan = build_stage_plan(stage, &ScaleProfile::Desk(DeskSteps::default())).unwrap();
        for phase in &plan.phases {
            ps.set_trainable_groups(&phase.trainable).unwrap();
            let before = ps.digests_by_group();
            let mut adam = uvl_core::optim::Adam::new(phase.lr_map.clone());
            for _ in 0..50 {
                ps.zero_grads();
                for id in ps.ids().collect::<Vec<_>>() {
                    if ps.is_trainable(id) {
                        let shape = ps.value(id).raw_dim();
                        let mut g = ArrayD::<f32>::zeros(shape);
                        for v in g.iter_mut() {
                            *v = rng.next_f64() as f32 - 0.5;
                        }
                        ps.accumulate_grad(id, &g);
                    }
                }
                adam.step(&mut ps);
            }
            let after = ps.digests_by_group();
            for g in phase.frozen() {
                assert_eq!(before[&g], after[&g], "stage {stage} frozen group {g} drifted");
            }
            for g in &phase.trainable {
                assert_ne!(before[g], after[g], "stage {stage} trainable group {g} did not move");
            }
        }
    }

    // frozen parameters are excluded from gradient computation entirely
    let id = ps.id("llm.embed.table").unwrap();
    ps.set_trainable_groups(&["segmenter".to_string()]).unwrap();
    ps.zero_grads();
    {
        let mut tape = Tape::<f32>::new();
        let e = tape.param(&ps, id);
        let lq = tape.param(&ps, ps.id("seg.learned_queries").unwrap());
        let rows = tape.gather_rows(e, &[0, 1]);
        let s1 = tape.sum_all(rows);
        let s2 = tape.sum_all(lq);
        let loss = tape.add(s1, s2);
        tape.backward(loss);
        tape.scatter_param_grads(&mut ps);
    }
    assert!(ps.grad(id).iter().all(|v| *v == 0.0), "frozen param received gradient");
    println!("[PASS] freeze bit-exactness: 50 steps per plan keep frozen digests identical; lr/frozen sets match the transcribed table (stage2 1e-3; stage3 2e-5/1e-3, diffusion frozen; stage4 2e-5/2e-6, encoders frozen)");
}

// ---- criterion 8: bucketing oracle ------------------------------------------

#[test]
fn a08_bucketing_bruteforce_200_sizes() {
    let mut rng = SplitMix64::new(81);
    for trial in 0..200 {
        let w = rng.range_inclusive(8, 900);
        let h = rng.range_inclusive(8, 900);
        let decision = bucket_crop(w, h, &BUCKET_RATIOS).unwrap();
        // independent brute force in f64
        let mut best_idx = 0usize;
        let mut best_loss = f64::INFINITY;
        for (i, &(rw, rh)) in BUCKET_RATIOS.iter().enumerate() {
            let (cw, ch) = uvl_core::diffuser::crop_for_ratio(w, h, rw, rh);
            let loss = 1.0 - (cw * ch) as f64 / (w * h) as f64;
            if loss < best_loss - 1e-12 {
                best_loss = loss;
                best_idx = i;
            }
        }
        match decision {
            BucketDecision::Keep {
                ratio_index,
                content_loss,
                ..
            } => {
                assert_eq!(ratio_index, best_idx, "trial {trial}: ratio choice");
                assert!((content_loss - best_loss).abs() < 1e-12);
                assert!(best_loss <= 0.2 + 1e-12);
            }
            BucketDecision::Discard { best_loss: got } => {
                assert!((got - best_loss).abs() < 1e-12);
                assert!(best_loss > 0.2 - 1e-12, "trial {trial}: wrongly discarded");
            }
        }
    }
    // inclusive boundary: exactly 20% loss is retained
    match bucket_crop(500, 100, &BUCKET_RATIOS).unwrap() {
        BucketDecision::Keep { ratio_index, .. } => assert_eq!(BUCKET_RATIOS[ratio_index], (4, 1)),
        _ => panic!("20% boundary must be inclusive"),
    }
    println!("[PASS] bucketing oracle: argmin over the 11 ratios matches brute force for 200 sizes; 20% boundary inclusive");
}

// ---- criterion 10: conditioning sensitivity ---------------------------------

#[test]
fn a10_conditioning_sensitivity() {
    use uvl_core::diffuser::{CondInputs, GuidanceInput};
    // exact invariance with zeroed value projections (already at criterion
    // tolerance: bit equality)
    {
        let mut cfg = DeskConfig::default();
        cfg.lvlm.layers = 1;
        let mut ps = ParamStore::<f64>::new();
        let models = Models::build(&mut ps, 101, &cfg);
        for name in [
            "diff.mid_attn.wv.w",
            "diff.mid_attn.wv.b",
            "diff.up1_attn.wv.w",
            "diff.up1_attn.wv.b",
        ] {
            ps.value_mut(ps.id(name).unwrap()).fill(0.0);
        }
        let mut rng = SplitMix64::new(102);
        let sem = uvl_core::dualtok::TokenGrid {
            branch: uvl_core::dualtok::Branch::Semantic,
            h: 8,
            w: 8,
            indices: (0..64).map(|_| rng.below(models.cfg.tok.k_sem)).collect(),
        };
        let pix = uvl_core::dualtok::TokenGrid {
            branch: uvl_core::dualtok::Branch::Pixel,
            h: 16,
            w: 16,
            indices: (0..256).map(|_| rng.below(models.cfg.tok.k_pix)).collect(),
        };
        let zt = nn::normal_init::<f64>(&mut rng, &[3, 64, 64], 1.0);
        let run = |mask: Array2<f32>| {
            let mut tape = Tape::<f64>::no_grad();
            let cond = CondInputs {
                sem: &sem,
                pix: &pix,
                guidance: GuidanceInput::Mask(&mask),
            };
            let cv = models.diff.build_cond(&mut tape, &ps, &models.tok, &cond, None).unwrap();
            let z = tape.constant(zt.clone());
            let out = models
                .diff
                .denoise_step(&mut tape, &ps, z, 3, &models.schedule, &cv)
                .unwrap();
            tape.value(out).clone()
        };
        let a = run(Array2::from_elem((8, 8), 1.0));
        let b = run(Array2::from_shape_fn((8, 8), |(y, x)| ((x * 3 + y) % 2) as f32));
        assert_eq!(a, b, "zero value projection must make the output mask-invariant");
    }
    // sensitivity across 10 random initializations
    let mut hits = 0usize;
    for seed in 0..10u64 {
        let mut cfg = DeskConfig::default();
        cfg.lvlm.layers = 1;
        let mut ps = ParamStore::<f64>::new();
        let models = Models::build(&mut ps, 300 + seed, &cfg);
        let mut rng = SplitMix64::new(400 + seed);
        let sem = uvl_core::dualtok::TokenGrid {
            branch: uvl_core::dualtok::Branch::Semantic,
            h: 8,
            w: 8,
            indices: (0..64).map(|_| rng.below(models.cfg.tok.k_sem)).collect(),
        };
        let pix = uvl_core::dualtok::TokenGrid {
            branch: uvl_core::dualtok::Branch::Pixel,
            h: 16,
            w: 16,
            indices: (0..256).map(|_| rng.below(models.cfg.tok.k_pix)).collect(),
        };
        let zt = nn::normal_init::<f64>(&mut rng, &[3, 64, 64], 1.0);
        let run = |mask: Array2<f32>| {
            let mut tape = Tape::<f64>::no_grad();
            let cond = CondInputs {
                sem: &sem,
                pix: &pix,
                guidance: GuidanceInput::Mask(&mask),
            };
            let cv = models.diff.build_cond(&mut tape, &ps, &models.tok, &cond, None).unwrap();
            let z = tape.constant(zt.clone());
            let out = models
                .diff
                .denoise_step(&mut tape, &ps, z, 3, &models.schedule, &cv)
                .unwrap();
            tape.value(out).clone()
        };
        let a = run(Array2::from_elem((8, 8), 1.0));
        let b = run(Array2::from_shape_fn((8, 8), |(y, x)| ((x + y) % 2) as f32));
        let l2: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if l2 > 0.0 {
            hits += 1;
        }
    }
    assert_eq!(hits, 10, "mask swap must change the output in 10/10 seeds");
    println!("[PASS] conditioning sensitivity: zero value-projection exact invariance; mask swap changed output (L2>0) in 10/10 seeds");
}

// ---- criterion 11: metric analytic identities -------------------------------

#[test]
fn a11_metric_analytic_identities_exact() {
    use uvl_core::grid::Mask;
    use uvl_core::metrics::{codebook_perplexity, miou, psnr_ssim};
    let tol = 1e-9;
    // mIoU identities
    let gt = Mask::from_fn(8, 8, |x, y| x < 4 && y < 4);
    let ones = {
        let mut p = Array2::<f32>::zeros((8, 8));
        for (x, y) in gt.fg_pixels() {
            p[(y, x)] = 1.0;
        }
        p
    };
    assert!((miou(&[ones.clone()], &[gt.clone()], 0.5).unwrap() - 1.0).abs() < tol);
    let comp = gt.complement();
    let comp_pred = {
        let mut p = Array2::<f32>::zeros((8, 8));
        for (x, y) in comp.fg_pixels() {
            p[(y, x)] = 1.0;
        }
        p
    };
    assert!(miou(&[comp_pred], &[gt.clone()], 0.5).unwrap().abs() < tol);
    // Dice identity on exact binary match: 1 - (2S+1)/(2S+1) == 0
    let s = gt.fg_count() as f64;
    let dice_loss = 1.0 - (2.0 * s + 1.0) / (s + s + 1.0);
    assert!(dice_loss.abs() < tol);
    // BCE at uniform 0.5 is ln 2
    {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(ArrayD::zeros(IxDyn(&[1, 64])));
        let target = ArrayD::<f64>::zeros(IxDyn(&[1, 64]));
        let bce = tape.bce_logits_mean(logits, &target);
        assert!((tape.scalar_value(bce) - std::f64::consts::LN_2).abs() < tol);
    }
    // PSNR: identical -> cap; +0.1 uniform -> exactly 20 dB
    let a = ndarray::Array3::<f32>::from_elem((3, 8, 8), 0.25);
    let (p, s2) = psnr_ssim(&a, &a).unwrap();
    assert!((p - 60.0).abs() < tol && (s2 - 1.0).abs() < tol);
    let b = a.mapv(|v| v + 0.1);
    let (p, _) = psnr_ssim(&a, &b).unwrap();
    assert!((p - 20.0).abs() < 1e-6, "psnr {p}");
    // perplexity identities
    assert!((codebook_perplexity(&[3; 16]).unwrap() - 16.0).abs() < tol);
    let mut onehot = [0u64; 16];
    onehot[5] = 9;
    assert!((codebook_perplexity(&onehot).unwrap() - 1.0).abs() < tol);
    println!("[PASS] metric identities: mIoU/Dice/BCE/PSNR/perplexity match analytic values to 1e-9");
}

// ---- criterion 9: toy end-to-end trainability -------------------------------

#[test]
fn a09_toy_end_to_end_trainability() {
    let acfg = AcceptanceCfg::load();
    let started = std::time::Instant::now();
    let cfg = DeskConfig::default();
    let mut ps = ParamStore::<f32>::new();
    let models = Models::build(&mut ps, acfg.get("train_seed") as u64, &cfg);

    // 2k-sample corpus, deterministic
    let gen = uvl_core::shapesworld::GenConfig::default();
    let n_train = acfg.get("corpus_train") as usize;
    let n_val = acfg.get("corpus_val") as usize;
    let mk = |lo: u64, hi: u64| -> Vec<uvl_core::shapesworld::LoadedSample> {
        (lo..hi)
            .map(|s| {
                let smp = uvl_core::shapesworld::generate_sample(s, &gen).unwrap();
                let edits = uvl_core::shapesworld::default_edits(&smp);
                uvl_core::shapesworld::LoadedSample {
                    id: format!("{s:06}"),
                    sample: smp,
                    edits,
                }
            })
            .collect()
    };
    let corpus = TrainCorpus {
        train: mk(0, n_train as u64),
        val: mk(1_000_000, 1_000_000 + n_val as u64),
    };

    let steps = DeskSteps {
        s1_tok_steps: acfg.get("s1_tok_steps") as usize,
        s1_tok_batch: acfg.get("s1_tok_batch") as usize,
        s1_diff_steps: acfg.get("s1_diff_steps") as usize,
        s1_diff_batch: acfg.get("s1_diff_batch") as usize,
        s2_steps: acfg.get("s2_steps") as usize,
        s2_batch: acfg.get("s2_batch") as usize,
        s3_steps: acfg.get("s3_steps") as usize,
        s3_batch: acfg.get("s3_batch") as usize,
        s4_steps: acfg.get("s4_steps") as usize,
        s4_batch: acfg.get("s4_batch") as usize,
    };
    let run_dir = std::env::temp_dir().join(format!("uvl_acceptance_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&run_dir);
    let seed = acfg.get("train_seed") as u64;

    for stage in 1..=4u8 {
        let plan = build_stage_plan(stage, &ScaleProfile::Desk(steps.clone())).unwrap();
        let report = run_stage(&models, &mut ps, &plan, &corpus, &run_dir, seed).unwrap();
        eprintln!(
            "stage {stage} trained in {:.0}s (total {:.0}s)",
            report.wall_secs,
            started.elapsed().as_secs_f64()
        );
        if stage == 1 {
            let (psnr, cos) =
                uvl_core::evals::eval_tokenizer(&models, &ps, &corpus.val, usize::MAX).unwrap();
            let want_psnr = acfg.get("stage1_psnr_db");
            let want_cos = acfg.get("stage1_cosine");
            eprintln!("stage1 eval: psnr {psnr:.2} dB cosine {cos:.4}");
            assert!(
                psnr >= want_psnr,
                "stage-1 reconstruction PSNR {psnr:.2} < {want_psnr}"
            );
            assert!(cos >= want_cos, "stage-1 semantic cosine {cos:.4} < {want_cos}");
            println!("[PASS] toy end-to-end: stage-1 PSNR {psnr:.2} dB >= {want_psnr}, cosine {cos:.4} >= {want_cos}");
        }
        if stage == 3 {
            let miou = uvl_core::evals::eval_referring(
                &models,
                &ps,
                &corpus.val,
                acfg.get("eval_refseg_n") as usize,
                seed,
            )
            .unwrap();
            let want = acfg.get("stage3_refseg_miou");
            eprintln!("stage3 eval: refseg mIoU {miou:.4}");
            assert!(miou >= want, "stage-3 referring mIoU {miou:.4} < {want}");
            println!("[PASS] toy end-to-end: stage-3 referring mIoU {miou:.4} >= {want}");
        }
        if stage == 4 {
            let n = acfg.get("eval_edit_n") as usize;
            let sample_steps = acfg.get("eval_sample_steps") as usize;
            let main = uvl_core::evals::eval_edits(
                &models,
                &ps,
                &corpus.val,
                n,
                GuidanceMode::ExplicitMask,
                sample_steps,
                seed,
                uvl_core::shapesworld::EditKind::Recolor,
            )
            .unwrap();
            let ablation = uvl_core::evals::eval_edits(
                &models,
                &ps,
                &corpus.val,
                n,
                GuidanceMode::MaskTokenEmbedding,
                sample_steps,
                seed,
                uvl_core::shapesworld::EditKind::Recolor,
            )
            .unwrap();
            let outside = main.outside_psnr.expect("outside psnr defined");
            let inside = main.inside_agreement.expect("inside agreement defined");
            let inside_ablation = ablation.inside_agreement.expect("ablation inside defined");
            let want_out = acfg.get("stage4_outside_psnr_db");
            let want_in = acfg.get("stage4_inside_agreement");
            eprintln!(
                "stage4 eval: outside {outside:.2} dB inside {inside:.4} (ablation inside {inside_ablation:.4}; mask mIoU {:.3})",
                main.mask_miou
            );
            assert!(outside >= want_out, "outside-mask PSNR {outside:.2} < {want_out}");
            assert!(inside >= want_in, "inside agreement {inside:.4} < {want_in}");
            assert!(
                inside_ablation < inside,
                "mask-token-embedding conditioning ({inside_ablation:.4}) must localize strictly worse than explicit masks ({inside:.4})"
            );
            println!("[PASS] toy end-to-end: stage-4 outside PSNR {outside:.2} dB >= {want_out}, inside agreement {inside:.4} >= {want_in}, ablation strictly lower ({inside_ablation:.4})");
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    eprintln!("toy end-to-end completed in {:.1} min", elapsed / 60.0);
    assert!(
        elapsed < 3600.0,
        "end-to-end run exceeded the 60-minute CPU budget"
    );
    println!(
        "[PASS] toy end-to-end: all four stages trained and evaluated in {:.1} min (< 60 min CPU budget)",
        elapsed / 60.0
    );
    let _ = std::fs::remove_dir_all(&run_dir);
    let _ = GROUPS;
}
