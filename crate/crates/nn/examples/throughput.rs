//! Forward and forward+backward images per second for each architecture.
//!
//! `cargo run --release -p mter-nn --example throughput [batch] [arch...]`

use mter_nn::{compute_gradients, Arch, ForwardCtx, LossConfig, Model, ModelSpec, Objective, IMAGE_PIXELS};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let mut args = std::env::args().skip(1);
    let batch: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let archs: Vec<Arch> = {
        let named: Vec<Arch> = args.filter_map(|a| Arch::parse(&a).ok()).collect();
        if named.is_empty() { Arch::ALL.to_vec() } else { named }
    };
    let pixels: Vec<u8> = (0..batch * IMAGE_PIXELS).map(|i| (i * 31 % 256) as u8).collect();
    let x = Model::input_from_pixels(&pixels, batch).unwrap();
    let labels: Vec<usize> = (0..batch).map(|i| i % 10).collect();
    for arch in archs {
        let model = Model::new(ModelSpec::new(arch, 10), 0).unwrap();
        let reps = 3;
        let t = Instant::now();
        for _ in 0..reps {
            model.forward(&x).unwrap();
        }
        let fwd = (reps * batch) as f64 / t.elapsed().as_secs_f64();
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..reps {
            let obj = Objective::Classification { labels: &labels, loss: LossConfig::softmax() };
            compute_gradients(&model, &x, obj, ForwardCtx::train(&mut rng), true).unwrap();
        }
        let both = (reps * batch) as f64 / t.elapsed().as_secs_f64();
        println!(
            "{:<10} params {:>9}  forward {:>8.0} img/s  forward+backward {:>7.0} img/s",
            arch.id(),
            model.params().num_trainable(),
            fwd,
            both
        );
    }
}
