//! Stage-1 calibration probe: step timing and convergence on a small corpus.
use std::time::Instant;

use uvl_core::params::ParamStore;
use uvl_core::shapesworld::{default_edits, generate_sample, GenConfig, LoadedSample};
use uvl_core::stages::{build_stage_plan, run_stage, DeskSteps, ScaleProfile, TrainCorpus};
use uvl_core::system::{DeskConfig, Models};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let tok_steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let diff_steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(20);

    let cfg = DeskConfig::default();
    let mut ps = ParamStore::<f32>::new();
    let models = Models::build(&mut ps, 42, &cfg);
    eprintln!("params: {} tensors, {} values", ps.len(), ps.total_values());

    let gen = GenConfig::default();
    let t0 = Instant::now();
    let train: Vec<LoadedSample> = (0..n_train as u64)
        .map(|s| {
            let smp = generate_sample(s, &gen).unwrap();
            let edits = default_edits(&smp);
            LoadedSample { id: format!("{s:06}"), sample: smp, edits }
        })
        .collect();
    let val: Vec<LoadedSample> = (10_000..10_048u64)
        .map(|s| {
            let smp = generate_sample(s, &gen).unwrap();
            let edits = default_edits(&smp);
            LoadedSample { id: format!("{s:06}"), sample: smp, edits }
        })
        .collect();
    eprintln!("corpus gen: {:.1}s", t0.elapsed().as_secs_f64());
    let corpus = TrainCorpus { train, val };

    let steps = DeskSteps {
        s1_tok_steps: tok_steps,
        s1_tok_batch: 16,
        s1_diff_steps: diff_steps,
        s1_diff_batch: 16,
        ..Default::default()
    };
    let plan = build_stage_plan(1, &ScaleProfile::Desk(steps)).unwrap();
    let run_dir = std::env::temp_dir().join("uvl_pilot_s1");
    let _ = std::fs::remove_dir_all(&run_dir);
    let t0 = Instant::now();
    let report = run_stage(&models, &mut ps, &plan, &corpus, &run_dir, 7).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    eprintln!(
        "stage1 wall {:.1}s; tok steps {} + diff steps {} -> {:.2} s/step avg",
        wall,
        tok_steps,
        diff_steps,
        wall / (tok_steps + diff_steps) as f64
    );
    for key in report.loss_keys() {
        if let Some((f, l)) = report.first_last(&key) {
            eprintln!("loss {key}: {f:.4} -> {l:.4}");
        }
    }
    for (k, v) in &report.extra {
        eprintln!("extra {k} = {v:.2}");
    }
    let t0 = Instant::now();
    let (psnr, cos) = uvl_core::evals::eval_tokenizer(&models, &ps, &corpus.val, 24).unwrap();
    eprintln!("eval: psnr {psnr:.2} dB, cosine {cos:.4} ({:.1}s)", t0.elapsed().as_secs_f64());
}
