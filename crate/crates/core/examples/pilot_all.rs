//! All-stage calibration probe.
use std::time::Instant;

use uvl_core::diffuser::GuidanceMode;
use uvl_core::params::ParamStore;
use uvl_core::shapesworld::{default_edits, generate_sample, EditKind, GenConfig, LoadedSample};
use uvl_core::stages::{build_stage_plan, run_stage, DeskSteps, ScaleProfile, TrainCorpus};
use uvl_core::system::{DeskConfig, Models};

fn main() {
    let a: Vec<usize> = std::env::args()
        .skip(1)
        .map(|s| s.parse().unwrap())
        .collect();
    let (n_train, s1t, s1d, s2, s3, s4) = (
        a.first().copied().unwrap_or(400),
        a.get(1).copied().unwrap_or(40),
        a.get(2).copied().unwrap_or(20),
        a.get(3).copied().unwrap_or(10),
        a.get(4).copied().unwrap_or(10),
        a.get(5).copied().unwrap_or(6),
    );
    let eval_n: usize = a.get(6).copied().unwrap_or(12);
    let cfg = DeskConfig::default();
    let mut ps = ParamStore::<f32>::new();
    let models = Models::build(&mut ps, 42, &cfg);
    let gen = GenConfig::default();
    let mk = |lo: u64, hi: u64| -> Vec<LoadedSample> {
        (lo..hi)
            .map(|s| {
                let smp = generate_sample(s, &gen).unwrap();
                let edits = default_edits(&smp);
                LoadedSample { id: format!("{s:06}"), sample: smp, edits }
            })
            .collect()
    };
    let corpus = TrainCorpus { train: mk(0, n_train as u64), val: mk(100_000, 100_048) };
    let steps = DeskSteps {
        s1_tok_steps: s1t, s1_tok_batch: 16,
        s1_diff_steps: s1d, s1_diff_batch: 16,
        s2_steps: s2, s2_batch: 16,
        s3_steps: s3, s3_batch: 8,
        s4_steps: s4, s4_batch: 4,
    };
    let run_dir = std::env::temp_dir().join("uvl_pilot_all");
    let _ = std::fs::remove_dir_all(&run_dir);
    for stage in 1..=4u8 {
        let plan = build_stage_plan(stage, &ScaleProfile::Desk(steps.clone())).unwrap();
        let t0 = Instant::now();
        let report = run_stage(&models, &mut ps, &plan, &corpus, &run_dir, 7).unwrap();
        let wall = t0.elapsed().as_secs_f64();
        let nsteps: usize = plan.phases.iter().map(|p| p.steps).sum();
        eprintln!("== stage {stage}: {wall:.0}s for {nsteps} steps = {:.2} s/step", wall / nsteps as f64);
        for key in report.loss_keys() {
            if let Some((f, l)) = report.first_last(&key) {
                eprintln!("   {key}: {f:.4} -> {l:.4}");
            }
        }
        for (k, v) in &report.extra {
            eprintln!("   {k} = {v:.2}");
        }
        match stage {
            1 => {
                let t0 = Instant::now();
                let (psnr, cos) = uvl_core::evals::eval_tokenizer(&models, &ps, &corpus.val, eval_n).unwrap();
                eprintln!("   eval tok: psnr {psnr:.2} dB cosine {cos:.4} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
            3 => {
                let t0 = Instant::now();
                let miou = uvl_core::evals::eval_referring(&models, &ps, &corpus.val, eval_n, 5).unwrap();
                eprintln!("   eval refseg mIoU {miou:.3} ({:.0}s)", t0.elapsed().as_secs_f64());
            }
            4 => {
                let t0 = Instant::now();
                let e = uvl_core::evals::eval_edits(&models, &ps, &corpus.val, eval_n.min(8), GuidanceMode::ExplicitMask, 40, 5, EditKind::Recolor).unwrap();
                eprintln!(
                    "   eval edit: outside {:?} inside {:?} miou {:.3} ({:.0}s)",
                    e.outside_psnr, e.inside_agreement, e.mask_miou, t0.elapsed().as_secs_f64()
                );
            }
            _ => {}
        }
    }
}
