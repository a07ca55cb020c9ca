//! Times forward and training steps of the desk-scale network.

use std::time::Instant;

use monoview_core::network::{build, NetworkConfig};
use monoview_core::tensor::{Tape, Tensor};
use monoview_core::training::{train_step, SampleTensors, TrainConfig};

fn main() {
    let base: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(8);
    let size: usize = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(32);
    let cfg = NetworkConfig {
        input_size: size,
        base_channels: base,
        ..NetworkConfig::desk()
    };
    let mut model = build(&cfg, 1).expect("valid config");
    println!("parameters: {}", model.params.num_scalars());
    let s = cfg.input_size;
    let t = SampleTensors {
        projection: Tensor::new(&[1, s, s], (0..s * s).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap(),
        volume: Tensor::full(&[1, s, s, s], 0.3),
        mask: Tensor::zeros(&[1, s, s, s]),
    };
    let start = Instant::now();
    let mut tape = Tape::new();
    monoview_core::network::forward(&mut tape, &model, &t.projection).unwrap();
    println!("forward: {:?} ({} nodes)", start.elapsed(), tape.len());
    let tc = TrainConfig::desk();
    for _ in 0..3 {
        let start = Instant::now();
        let v = train_step(&mut model, &t, &tc, 2e-3).unwrap();
        println!("step: {:?} loss {:?}", start.elapsed(), v);
    }
}
