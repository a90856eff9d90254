//! One-off timing probe: forward + PIT/MC loss + backward for the toy
//! training configuration on a 4-second segment.
//!
//!     cargo run --release -p gridsep --example bench_step [f32|f64] [iters]

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use gridsep::model::{forward_separate, HeadMode, ModelConfig, ParamSet};
use gridsep::objectives::{pit, PitLoss};
use gridsep::scalar::Scalar;
use gridsep::stft::StftConfig;
use gridsep::tape::Tape;
use gridsep::tensor::Tensor;

fn run<S: Scalar>(label: &str, iters: usize, attention: bool) {
    let cfg = ModelConfig {
        emb_dim: 8,
        num_blocks: 2,
        kernel: 1,
        stride: 1,
        hidden: 16,
        qk_channels: 2,
        heads: 1,
        use_attention: attention,
        speakers: 2,
        n_freq: 129,
        head_mode: HeadMode::Mapping,
        mask_clip: 5.0,
    };
    let stft_cfg = StftConfig::default_8k();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = ParamSet::<S>::init(&cfg, &mut rng).unwrap();
    let n = 32_000usize;
    let wave = |k0: usize| -> Tensor<S> {
        let v: Vec<S> = (0..n)
            .map(|k| S::from_f64(((k + k0) as f64 * 0.031).sin() * 0.3))
            .collect();
        Tensor::from_vec(&[n], v).unwrap()
    };

    let t0 = Instant::now();
    let mut fwd_time = 0.0;
    for _ in 0..iters {
        let mut tape = Tape::<S>::new();
        let mix = tape.input(wave(0));
        let r1 = tape.input(wave(11));
        let r2 = tape.input(wave(23));
        let bound = params.bind(&mut tape, true);
        let tfwd = Instant::now();
        let out = forward_separate(&mut tape, mix, &cfg, &stft_cfg, &bound).unwrap();
        let res = pit(&mut tape, &out.outputs, &[r1, r2], PitLoss::MixtureConstraint(mix)).unwrap();
        fwd_time += tfwd.elapsed().as_secs_f64();
        tape.backward(res.loss).unwrap();
        std::hint::black_box(tape.grad(bound.ids()[0]).unwrap());
    }
    let total = t0.elapsed().as_secs_f64();
    println!(
        "{label}: {iters} steps, {:.2} s/step ({:.2} s fwd, {:.2} s bwd+setup)",
        total / iters as f64,
        fwd_time / iters as f64,
        (total - fwd_time) / iters as f64,
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("f32");
    let iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);
    let attention = args.get(3).map(String::as_str) != Some("noattn");
    match which {
        "f64" => run::<f64>("f64", iters, attention),
        _ => run::<f32>("f32", iters, attention),
    }
}
