#![allow(dead_code)]

use fairlora::backbone::{build_backbone, Backbone, BackboneConfig};
use fairlora::data::{generate, GenSpec, GeneratedData};
use fairlora::rng::Stream;
use fairlora::tensor::Tensor;
use fairlora::train::TrainConfig;

/// A quickly pretrained backbone for tests that only need a valid one.
pub fn small_backbone() -> Backbone {
    build_backbone(&BackboneConfig {
        pretrain_steps: 60,
        ..BackboneConfig::default()
    })
    .unwrap()
}

pub fn small_data(seed: u64) -> GeneratedData {
    generate(&GenSpec {
        n: 400,
        beta: 0.8,
        seed,
        ..GenSpec::default()
    })
    .unwrap()
}

pub fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        epochs: 2,
        batch_size: 64,
        adv_rounds: 2,
        adv_sen_epochs: 1,
        adv_task_epochs: 1,
        seed,
        ..TrainConfig::default()
    }
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut Stream) -> Tensor {
    Tensor::randn(rows, cols, 1.0, rng)
}
