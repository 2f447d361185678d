//! Rough single-core throughput probe used to size the desk profile.
use std::time::Instant;

use ndarray::ArrayD;
use uvl_core::nn::{self, AttnBias, TransformerBlock};
use uvl_core::params::ParamStore;
use uvl_core::rng::SplitMix64;
use uvl_core::tensor::Tape;

fn main() {
    let mut rng = SplitMix64::new(0);
    // matmul probe
    let a = nn::normal_init::<f32>(&mut rng, &[512, 128], 1.0);
    let b = nn::normal_init::<f32>(&mut rng, &[128, 128], 1.0);
    let t0 = Instant::now();
    let reps = 400;
    let mut acc = 0.0f32;
    for _ in 0..reps {
        let mut tape = Tape::<f32>::no_grad();
        let av = tape.constant(a.clone());
        let bv = tape.constant(b.clone());
        let c = tape.matmul(av, bv);
        acc += tape.value(c)[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * 512.0 * 128.0 * 128.0 * reps as f64;
    println!("matmul 512x128x128: {:.2} GFLOP/s (acc {acc})", flops / dt / 1e9);

    // transformer block fwd+bwd probe at edit-like sequence length
    let mut ps = ParamStore::<f32>::new();
    let blk = TransformerBlock::new(&mut ps, &mut rng, "b", "g", 128, 4, 512);
    let seq = 448;
    let x = nn::normal_init::<f32>(&mut rng, &[seq, 128], 1.0);
    let mask = nn::causal_mask::<f32>(seq);
    let t0 = Instant::now();
    let reps = 30;
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(x.clone());
        let mv = tape.constant(mask.clone());
        let y = blk.forward(&mut tape, &ps, xv, AttnBias::Shared(mv));
        let s = tape.sum_all(y);
        let loss = tape.mean_all(s);
        tape.backward(loss);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("block fwd+bwd seq {seq}: {:.1} ms/iter", dt / reps as f64 * 1e3);

    // conv probe: stride-2 3->32 at 128^2 fwd+bwd
    let mut ps2 = ParamStore::<f32>::new();
    let conv = uvl_core::nn::Conv2d::new(&mut ps2, &mut rng, "c", "g", 16, 32, 3, 2, 1);
    let img = nn::normal_init::<f32>(&mut rng, &[16, 64, 64], 1.0);
    let t0 = Instant::now();
    let reps = 60;
    for _ in 0..reps {
        let mut tape = Tape::<f32>::new();
        let xv = tape.leaf(img.clone());
        let y = conv.forward(&mut tape, &ps2, xv);
        let l = tape.mean_all(y);
        tape.backward(l);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("conv16->32 s2 @64^2 fwd+bwd: {:.1} ms/iter", dt / reps as f64 * 1e3);
    let _ = ArrayD::<f32>::zeros(ndarray::IxDyn(&[1]));
}
