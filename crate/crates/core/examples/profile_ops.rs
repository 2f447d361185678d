//! Per-component timing probe for the stage-1 step.
use std::time::Instant;
use uvl_core::params::ParamStore;
use uvl_core::shapesworld::{generate_sample, GenConfig};
use uvl_core::system::{DeskConfig, Models};
use uvl_core::tensor::Tape;

fn main() {
    let cfg = DeskConfig::default();
    let mut ps = ParamStore::<f32>::new();
    let models = Models::build(&mut ps, 42, &cfg);
    let sample = generate_sample(0, &GenConfig::default()).unwrap();
    let reps = 20;

    let time = |name: &str, f: &mut dyn FnMut()| {
        let t0 = Instant::now();
        for _ in 0..reps {
            f();
        }
        eprintln!("{name:<28} {:6.1} ms", t0.elapsed().as_secs_f64() / reps as f64 * 1e3);
    };

    time("encode fwd+bwd", &mut || {
        let mut tape = Tape::<f32>::new();
        let e = models.encode(&mut tape, &ps, &sample.image).unwrap();
        let l = tape.mean_all(e.enc.embedding.fused);
        tape.backward(l);
    });
    time("encode fwd only", &mut || {
        let mut tape = Tape::<f32>::no_grad();
        let _ = models.encode(&mut tape, &ps, &sample.image).unwrap();
    });
    time("full tok losses fwd+bwd", &mut || {
        let mut tape = Tape::<f32>::new();
        let e = models.encode(&mut tape, &ps, &sample.image).unwrap();
        let qs = models.tok.semantic_quantize(&mut tape, &ps, e.enc.embedding.pre_mlp, None).unwrap();
        let dec = models.tok.semantic_decode(&mut tape, &ps, &qs).unwrap();
        let (qp, _) = models.tok.pixel_quantize(&mut tape, &ps, e.low, None).unwrap();
        let recon = models.tok.joint_decode(&mut tape, &ps, qs.st, qp.st).unwrap();
        let fl = models.disc.forward(&mut tape, &ps, recon);
        let b = models.tok.tokenizer_losses(&mut tape, &ps, e.low, e.enc.embedding.pre_mlp, recon, dec, fl, &models.disc, &models.perc, (&qs, &qp), 0.1);
        tape.backward(b.total);
    });
    time("semdec fwd+bwd", &mut || {
        let mut tape = Tape::<f32>::new();
        let e = models.encode(&mut tape, &ps, &sample.image).unwrap();
        let qs = models.tok.semantic_quantize(&mut tape, &ps, e.enc.embedding.pre_mlp, None).unwrap();
        let dec = models.tok.semantic_decode(&mut tape, &ps, &qs).unwrap();
        let l = tape.mean_all(dec);
        tape.backward(l);
    });
    time("joint_decode fwd+bwd", &mut || {
        let mut tape = Tape::<f32>::new();
        let e = models.encode(&mut tape, &ps, &sample.image).unwrap();
        let qs = models.tok.semantic_quantize(&mut tape, &ps, e.enc.embedding.pre_mlp, None).unwrap();
        let (qp, _) = models.tok.pixel_quantize(&mut tape, &ps, e.low, None).unwrap();
        let recon = models.tok.joint_decode(&mut tape, &ps, qs.st, qp.st).unwrap();
        let l = tape.mean_all(recon);
        tape.backward(l);
    });
    time("diffusion train_step", &mut || {
        let mut rng = uvl_core::rng::SplitMix64::new(3);
        let (sem, pix) = models.target_tokens(&ps, &sample.image).unwrap();
        let img64 = uvl_core::grid::downsample_area(&sample.image.to_chw_f32(), 2);
        let mask8 = sample.instances()[0].mask.downsample_mean(16);
        let mut tape = Tape::<f32>::new();
        let cond = uvl_core::diffuser::CondInputs { sem: &sem, pix: &pix, guidance: uvl_core::diffuser::GuidanceInput::Mask(&mask8) };
        let (l, _) = models.diff.train_step(&mut tape, &ps, &models.tok, &img64, &cond, &models.schedule, &mut rng, None).unwrap();
        tape.backward(l);
    });
}
