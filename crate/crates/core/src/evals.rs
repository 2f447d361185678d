//! Held-out evaluation drivers over loaded corpora: tokenizer
//! reconstruction, referring/class/interactive segmentation, edit fidelity,
//! and frame-wise video association consistency.

use ndarray::Array2;

use crate::diffuser::GuidanceMode;
use crate::grid::Mask;
use crate::lvlm::{Condition, PromptSchema, TaskKind};
use crate::metrics::MetricValue;
use crate::params::ParamStore;
use crate::segmenter::{hungarian_min, track_video, FrameObs};
use crate::shapesworld::{derive_cue, make_edit_pair, CueMode, EditKind, LoadedSample};
use crate::system::{Models, SystemError};
use crate::tensor::Tape;

fn iou(pred: &Array2<f32>, gt: &Mask, thr: f32) -> f64 {
    let mut inter = 0usize;
    let mut union = 0usize;
    for y in 0..gt.h {
        for x in 0..gt.w {
            let p = pred[(y, x)] >= thr;
            let g = gt.get(x, y);
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean reconstruction PSNR and semantic cosine over held-out samples.
pub fn eval_tokenizer(
    models: &Models,
    ps: &ParamStore<f32>,
    samples: &[LoadedSample],
    max_n: usize,
) -> Result<(f64, f64), SystemError> {
    let n = samples.len().min(max_n).max(1);
    let mut psnr = 0.0;
    let mut cos = 0.0;
    for s in samples.iter().take(n) {
        let (p, c) = models.tokenizer_eval(ps, &s.sample.image)?;
        psnr += p / n as f64;
        cos += c / n as f64;
    }
    Ok((psnr, cos))
}

/// Referring mIoU through the full decode-and-segment pipeline.
pub fn eval_referring(
    models: &Models,
    ps: &ParamStore<f32>,
    samples: &[LoadedSample],
    max_n: usize,
    seed: u64,
) -> Result<f64, SystemError> {
    let n = samples.len().min(max_n).max(1);
    let mut acc = 0.0;
    for (i, s) in samples.iter().take(n).enumerate() {
        let (expr, target) = &s.sample.referring_expressions[i % s.sample.referring_expressions.len()];
        let schema = PromptSchema::text(TaskKind::ReferringSeg, expr);
        let pred = models.segment_pipeline(ps, &s.sample.image, &schema, seed + i as u64)?;
        acc += iou(&pred.mask, &s.sample.instances()[*target].mask, 0.5) / n as f64;
    }
    Ok(acc)
}

/// Class-driven segmentation: Hungarian max-IoU assignment of proposals to
/// instances, mean IoU over instances.
pub fn eval_class(
    models: &Models,
    ps: &ParamStore<f32>,
    samples: &[LoadedSample],
    max_n: usize,
    seed: u64,
) -> Result<f64, SystemError> {
    let n = samples.len().min(max_n).max(1);
    let mut acc = 0.0;
    let mut count = 0usize;
    for (i, s) in samples.iter().take(n).enumerate() {
        let cond = s.sample.category_list.join(" , ");
        let schema = PromptSchema::text(TaskKind::ClassSeg, &cond);
        let pred = models.segment_pipeline(ps, &s.sample.image, &schema, seed + i as u64)?;
        let insts = s.sample.instances();
        let mut cost = Array2::<f64>::zeros((insts.len(), pred.proposals.len()));
        for (gi, inst) in insts.iter().enumerate() {
            for (pj, prop) in pred.proposals.iter().enumerate() {
                cost[(gi, pj)] = -iou(&prop.mask, &inst.mask, 0.5);
            }
        }
        let assign = hungarian_min(&cost);
        for (gi, &pj) in assign.iter().enumerate() {
            acc += -cost[(gi, pj)];
            count += 1;
        }
    }
    Ok(acc / count.max(1) as f64)
}

/// Interactive segmentation across the four cue modes.
pub fn eval_interactive(
    models: &Models,
    ps: &ParamStore<f32>,
    samples: &[LoadedSample],
    max_n: usize,
    seed: u64,
) -> Result<f64, SystemError> {
    let n = samples.len().min(max_n).max(1);
    let mut acc = 0.0;
    for (i, s) in samples.iter().take(n).enumerate() {
        let inst = i % s.sample.instances().len();
        let mode = CueMode::ALL[i % 4];
        let cue = derive_cue(&s.sample.instances()[inst].mask, mode, seed + i as u64)?;
        // pooled features come from the current encoder state
        let region = {
            let mut tape = Tape::<f32>::no_grad();
            let encoded = models.encode(&mut tape, ps, &s.sample.image)?;
            let level0 = tape.value(encoded.enc.pyramid[0]).clone();
            crate::lvlm::pool_region_features(&level0, &cue, s.sample.scene.canvas)?
        };
        let schema = PromptSchema {
            task: TaskKind::InteractiveSeg,
            condition: Condition::Region(region.iter().map(|&v| v as f64).collect()),
        };
        let pred = models.segment_pipeline(ps, &s.sample.image, &schema, seed + i as u64)?;
        acc += iou(&pred.mask, &s.sample.instances()[inst].mask, 0.5) / n as f64;
    }
    Ok(acc)
}

pub struct EditEval {
    pub outside_psnr: Option<f64>,
    pub inside_agreement: Option<f64>,
    pub mask_miou: f64,
    pub count: usize,
}

/// Edit-localization fidelity over held-out recolor edits through the full
/// pipeline (decode, segment, guide, sample).
#[allow(clippy::too_many_arguments)]
pub fn eval_edits(
    models: &Models,
    ps: &ParamStore<f32>,
    samples: &[LoadedSample],
    max_n: usize,
    mode: GuidanceMode,
    steps: usize,
    seed: u64,
    kind: EditKind,
) -> Result<EditEval, SystemError> {
    let n = samples.len().min(max_n).max(1);
    let mut outside = Vec::new();
    let mut inside = Vec::new();
    let mut mious = Vec::new();
    for (i, s) in samples.iter().take(n).enumerate() {
        let inst = i % s.sample.instances().len();
        let triplet = make_edit_pair(&s.sample, kind, inst)?;
        let out = models.edit_pipeline(
            ps,
            &s.sample.image,
            &triplet.instruction,
            seed + i as u64,
            mode,
            steps,
            Some((&triplet.target, &triplet.gt_mask)),
        )?;
        if let Some(f) = &out.fidelity {
            if let MetricValue::Value(v) = f.outside_psnr {
                outside.push(v);
            }
            if let MetricValue::Value(v) = f.inside_agreement {
                inside.push(v);
            }
        }
        if let Some(m) = out.mask_miou {
            mious.push(m);
        }
    }
    let mean = |v: &Vec<f64>| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(EditEval {
        outside_psnr: mean(&outside),
        inside_agreement: mean(&inside),
        mask_miou: mean(&mious).unwrap_or(0.0),
        count: n,
    })
}

/// Track-consistency over repeated frames: fraction of object proposals
/// whose track id never changes.
pub fn eval_video(
    models: &Models,
    ps: &ParamStore<f32>,
    samples: &[LoadedSample],
    max_n: usize,
    n_frames: usize,
    seed: u64,
) -> Result<f64, SystemError> {
    let n = samples.len().min(max_n).max(1);
    let mut acc = 0.0;
    for (i, s) in samples.iter().take(n).enumerate() {
        let cond = s.sample.category_list.join(" , ");
        let schema = PromptSchema::text(TaskKind::ClassSeg, &cond);
        let mut frames = Vec::with_capacity(n_frames);
        for _f in 0..n_frames {
            // frame-by-frame processing over a repeated clip
            let pred = models.segment_pipeline(ps, &s.sample.image, &schema, seed + i as u64)?;
            frames.push(FrameObs {
                embeddings: pred.proposals.iter().map(|p| p.embedding.clone()).collect(),
            });
        }
        let ids = track_video(&frames, models.cfg.seg.track_tau);
        let stable = (0..ids[0].len())
            .filter(|&j| (1..n_frames).all(|t| ids[t][j] == ids[0][j]))
            .count();
        acc += stable as f64 / ids[0].len().max(1) as f64 / n as f64;
    }
    Ok(acc)
}
