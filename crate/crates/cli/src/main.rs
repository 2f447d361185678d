//! Command-line entry point: corpus generation, staged training,
//! evaluation, and the segment/edit/generate pipelines.
//!
//! Every subcommand is deterministic given (config, seed); outputs carry
//! the config digest. Exit codes: 2 for usage errors, 1 for runtime errors.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use uvl_core::config::RunConfig;
use uvl_core::diffuser::GuidanceMode;
use uvl_core::grid::{chw_f32_to_image, ImageU8};
use uvl_core::lvlm::{PromptSchema, TaskKind};
use uvl_core::metrics::{EvalReport, MetricValue};
use uvl_core::params::ParamStore;
use uvl_core::shapesworld::{
    default_edits, generate_sample, make_edit_pair, read_corpus, write_corpus, GenConfig,
    LoadedSample,
};
use uvl_core::stages::{build_stage_plan, checkpoint_path, run_stage, ScaleProfile, TrainCorpus};
use uvl_core::system::{DeskConfig, Models};

#[derive(Parser)]
#[command(name = "uvl", version, about = "desk-scale unified vision-language stack")]
struct Cli {
    /// Key=value config file (unknown keys rejected).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; defaults to $UVL_OUT_ROOT or the current directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic corpus of shape scenes.
    Datagen {
        /// Total sample count.
        #[arg(long, default_value_t = 100)]
        n: usize,
        /// Fraction held out as the validation split.
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
    },
    /// Run one training stage (needs the previous stage's checkpoint).
    Train {
        #[arg(long)]
        stage: u8,
        #[arg(long)]
        corpus: PathBuf,
        /// Run directory holding checkpoints and reports.
        #[arg(long)]
        run: PathBuf,
        /// Scale profile; only "desk" is runnable.
        #[arg(long, default_value = "desk")]
        profile: String,
    },
    /// Evaluate a task on the validation split.
    Eval {
        /// One of: seg, refseg, edit, recon, interactive, video.
        #[arg(long)]
        task: String,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 24)]
        max_n: usize,
        /// Use mask-token-embedding guidance instead of explicit masks.
        #[arg(long, default_value_t = false)]
        embedding_guidance: bool,
    },
    /// Segment the target referred to by an expression.
    Segment {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        expr: String,
        #[arg(long)]
        run: PathBuf,
    },
    /// Edit an image per a natural-language instruction.
    Edit {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instr: String,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = false)]
        embedding_guidance: bool,
    },
    /// Generate an image from a text description.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0.8)]
        temperature: f64,
    },
    /// Print the discrete token grids of an image.
    InspectTokens {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Msg(String),
    #[error(transparent)]
    Config(#[from] uvl_core::config::ConfigError),
    #[error(transparent)]
    Shapes(#[from] uvl_core::shapesworld::ShapesError),
    #[error(transparent)]
    Stage(#[from] uvl_core::stages::StageError),
    #[error(transparent)]
    System(#[from] uvl_core::system::SystemError),
    #[error(transparent)]
    Metric(#[from] uvl_core::metrics::MetricError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn load_run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("UVL_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn load_png(path: &Path) -> Result<ImageU8, CliError> {
    let img = image::open(path)
        .map_err(|e| CliError::Msg(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    Ok(ImageU8 {
        w: img.width() as usize,
        h: img.height() as usize,
        rgb: img.into_raw(),
    })
}

fn save_png(path: &Path, img: &ImageU8) -> Result<(), CliError> {
    image::RgbImage::from_raw(img.w as u32, img.h as u32, img.rgb.clone())
        .ok_or_else(|| CliError::Msg("png buffer".into()))?
        .save(path)
        .map_err(|e| CliError::Msg(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn mask_to_png(mask: &ndarray::Array2<f32>) -> ImageU8 {
    let (h, w) = (mask.nrows(), mask.ncols());
    let mut img = ImageU8::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let v = if mask[(y, x)] >= 0.5 { 255 } else { 0 };
            img.set(x, y, [v, v, v]);
        }
    }
    img
}

/// Build models and load the newest checkpoint in the run directory.
fn load_models(run: &Path, rc: &RunConfig) -> Result<(ParamStore<f32>, Models, u8), CliError> {
    let mut cfg = DeskConfig::default();
    cfg.sample_steps = rc.sample_steps;
    let mut ps = ParamStore::<f32>::new();
    let models = Models::build(&mut ps, 0, &cfg);
    for stage in (1..=4u8).rev() {
        if checkpoint_path(run, stage).exists() {
            uvl_core::stages::load_checkpoint(&mut ps, run, stage)?;
            return Ok((ps, models, stage));
        }
    }
    Err(CliError::Msg(format!(
        "no checkpoint found under {}",
        run.display()
    )))
}

fn run(cli: Cli) -> Result<(), CliError> {
    let rc = load_run_config(&cli)?;
    let out = out_root(&cli);
    match &cli.command {
        Command::Datagen { n, val_frac } => {
            let gen = GenConfig {
                n_shapes_min: rc.n_shapes_min,
                n_shapes_max: rc.n_shapes_max,
                ..Default::default()
            };
            let n_val = ((*n as f64) * val_frac).round() as usize;
            let n_train = n - n_val;
            let build = |lo: u64, hi: u64| -> Result<Vec<_>, CliError> {
                (lo..hi)
                    .map(|i| {
                        let s = generate_sample(rc.seed.wrapping_add(i), &gen)?;
                        let e = default_edits(&s);
                        Ok((s, e))
                    })
                    .collect()
            };
            let train = build(0, n_train as u64)?;
            let val = build(n_train as u64, *n as u64)?;
            std::fs::create_dir_all(&out)?;
            let manifest = write_corpus(&out, &train, &val)?;
            println!(
                "corpus written to {}: train={} val={}",
                out.display(),
                manifest.train_count,
                manifest.val_count
            );
            for (split, digest) in &manifest.digests {
                println!("digest {split} {digest}");
            }
            Ok(())
        }
        Command::Train {
            stage,
            corpus,
            run,
            profile,
        } => {
            if profile != "desk" {
                return Err(CliError::Msg(format!(
                    "profile {profile} is documentation-only; use desk"
                )));
            }
            let mut cfg = DeskConfig::default();
            cfg.sample_steps = rc.sample_steps;
            let mut ps = ParamStore::<f32>::new();
            let models = Models::build(&mut ps, rc.seed, &cfg);
            let plan = build_stage_plan(*stage, &ScaleProfile::Desk(rc.steps.clone()))?;
            let train = read_corpus(corpus, "train")?;
            let val = read_corpus(corpus, "val")?;
            let corpus = TrainCorpus { train, val };
            let report = run_stage(&models, &mut ps, &plan, &corpus, run, rc.seed)?;
            println!(
                "stage {} done in {:.1}s; config digest {}",
                stage,
                report.wall_secs,
                rc.digest(&models.cfg.digest())
            );
            for key in report.loss_keys() {
                if let Some((first, last)) = report.first_last(&key) {
                    println!("loss {key}: {first:.4} -> {last:.4}");
                }
            }
            Ok(())
        }
        Command::Eval {
            task,
            corpus,
            run,
            max_n,
            embedding_guidance,
        } => {
            let (ps, models, stage) = load_models(run, &rc)?;
            let val = read_corpus(corpus, "val")?;
            let mut report = EvalReport {
                config_digest: rc.digest(&models.cfg.digest()),
                ..Default::default()
            };
            let seed = rc.seed;
            match task.as_str() {
                "recon" => {
                    let (psnr, cos) =
                        uvl_core::evals::eval_tokenizer(&models, &ps, &val, *max_n)?;
                    report.set("recon_psnr_db", MetricValue::Value(psnr));
                    report.set("semantic_cosine", MetricValue::Value(cos));
                }
                "refseg" => {
                    let miou =
                        uvl_core::evals::eval_referring(&models, &ps, &val, *max_n, seed)?;
                    report.set("refseg_miou", MetricValue::Value(miou));
                }
                "seg" => {
                    let miou = uvl_core::evals::eval_class(&models, &ps, &val, *max_n, seed)?;
                    report.set("class_miou", MetricValue::Value(miou));
                }
                "interactive" => {
                    let miou =
                        uvl_core::evals::eval_interactive(&models, &ps, &val, *max_n, seed)?;
                    report.set("interactive_miou", MetricValue::Value(miou));
                }
                "edit" => {
                    let mode = if *embedding_guidance {
                        GuidanceMode::MaskTokenEmbedding
                    } else {
                        GuidanceMode::ExplicitMask
                    };
                    let e = uvl_core::evals::eval_edits(
                        &models,
                        &ps,
                        &val,
                        *max_n,
                        mode,
                        rc.sample_steps,
                        seed,
                        uvl_core::shapesworld::EditKind::Recolor,
                    )?;
                    report.set(
                        "edit_outside_psnr_db",
                        e.outside_psnr.map_or(MetricValue::Undefined, MetricValue::Value),
                    );
                    report.set(
                        "edit_inside_agreement",
                        e.inside_agreement
                            .map_or(MetricValue::Undefined, MetricValue::Value),
                    );
                    report.set("edit_mask_miou", MetricValue::Value(e.mask_miou));
                }
                "video" => {
                    let c = uvl_core::evals::eval_video(&models, &ps, &val, *max_n, 3, seed)?;
                    report.set("track_consistency", MetricValue::Value(c));
                }
                other => {
                    return Err(CliError::Msg(format!(
                        "unknown eval task {other}; expected seg|refseg|edit|recon|interactive|video"
                    )))
                }
            }
            print!("{}", report.render());
            println!("checkpoint_stage        {stage}");
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join(format!("eval_{task}.txt")), report.render_full())?;
            Ok(())
        }
        Command::Segment { image, expr, run } => {
            let (ps, models, _) = load_models(run, &rc)?;
            let img = load_png(image)?;
            let schema = PromptSchema::text(TaskKind::ReferringSeg, expr);
            let pred = models.segment_pipeline(&ps, &img, &schema, rc.seed)?;
            std::fs::create_dir_all(&out)?;
            save_png(&out.join("mask.png"), &mask_to_png(&pred.mask))?;
            let record = format!(
                "segment config_digest={} seed={} names={} proposal={}\n",
                rc.digest(&models.cfg.digest()),
                rc.seed,
                pred.emitted_names.join("+"),
                pred.proposal_index,
            );
            std::fs::write(out.join("segment.txt"), &record)?;
            print!("{record}");
            Ok(())
        }
        Command::Edit {
            image,
            instr,
            run,
            embedding_guidance,
        } => {
            let (ps, models, _) = load_models(run, &rc)?;
            let img = load_png(image)?;
            // ground truth is recoverable when the image sits in a corpus
            let gt = find_gt_for_instruction(image, instr);
            let mode = if *embedding_guidance {
                GuidanceMode::MaskTokenEmbedding
            } else {
                GuidanceMode::ExplicitMask
            };
            let outcome = models.edit_pipeline(
                &ps,
                &img,
                instr,
                rc.seed,
                mode,
                rc.sample_steps,
                gt.as_ref().map(|(t, m)| (t, m)),
            )?;
            std::fs::create_dir_all(&out)?;
            save_png(&out.join("mask.png"), &mask_to_png(&outcome.predicted_mask))?;
            save_png(&out.join("edited.png"), &chw_f32_to_image(&outcome.edited64))?;
            let mut record = format!(
                "edit config_digest={} seed={} steps={} guidance={}\n",
                rc.digest(&models.cfg.digest()),
                rc.seed,
                rc.sample_steps,
                if *embedding_guidance { "embedding" } else { "mask" },
            );
            if let Some(m) = outcome.mask_miou {
                record.push_str(&format!("mask_miou {m:.6}\n"));
            }
            if let Some(f) = &outcome.fidelity {
                record.push_str(&format!(
                    "outside_psnr_db {}\ninside_agreement {}\n",
                    f.outside_psnr, f.inside_agreement
                ));
            }
            std::fs::write(out.join("edit.txt"), &record)?;
            print!("{record}");
            Ok(())
        }
        Command::Generate {
            prompt,
            run,
            steps,
            temperature,
        } => {
            let (ps, models, _) = load_models(run, &rc)?;
            let steps = steps.unwrap_or(rc.sample_steps);
            let (img, sem, pix) =
                models.generate_pipeline(&ps, prompt, rc.seed, steps, *temperature)?;
            std::fs::create_dir_all(&out)?;
            save_png(&out.join("generated.png"), &chw_f32_to_image(&img))?;
            let digest = {
                use sha2::{Digest, Sha256};
                let mut h = Sha256::new();
                for i in sem.indices.iter().chain(pix.indices.iter()) {
                    h.update((*i as u32).to_le_bytes());
                }
                h.finalize()
                    .iter()
                    .map(|b| format!("{b:02x}"))
                    .collect::<String>()
            };
            let record = format!(
                "generate config_digest={} seed={} steps={} conditioning_digest={digest}\n",
                rc.digest(&models.cfg.digest()),
                rc.seed,
                steps,
            );
            std::fs::write(out.join("generate.txt"), &record)?;
            print!("{record}");
            Ok(())
        }
        Command::InspectTokens { image, run } => {
            let (ps, models, _) = load_models(run, &rc)?;
            let img = load_png(image)?;
            let (sem, pix) = models.target_tokens(&ps, &img)?;
            print!("{}", sem.render());
            print!("{}", pix.render());
            Ok(())
        }
    }
}

/// If the image belongs to a corpus (sibling `.ann` file), rebuild the edit
/// triplet whose instruction matches and return (target, gt mask).
fn find_gt_for_instruction(
    image: &Path,
    instruction: &str,
) -> Option<(ImageU8, uvl_core::grid::Mask)> {
    let ann = image.with_extension("ann");
    if !ann.exists() {
        return None;
    }
    let dir = image.parent()?;
    let split = dir.file_name()?.to_str()?;
    let root = dir.parent()?;
    let id = image.file_stem()?.to_str()?;
    let loaded: Vec<LoadedSample> = read_corpus(root, split).ok()?;
    let sample = loaded.into_iter().find(|s| s.id == id)?;
    for kind in uvl_core::shapesworld::EditKind::ALL {
        for inst in 0..sample.sample.instances().len() {
            if let Ok(t) = make_edit_pair(&sample.sample, kind, inst) {
                if t.instruction == instruction {
                    return Some((t.target, t.gt_mask));
                }
            }
        }
    }
    None
}
