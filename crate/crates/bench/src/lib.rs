//! Shared fixtures for the criterion benchmarks.

use metaemg_core::nn::{Batch, LayerDims, ModelParams, NetworkConfig};
use metaemg_core::synth::{self, CorpusConfig, SignalConfig};
use metaemg_core::tasks::{split_task, Task, TaskConfig};

/// The production architecture.
pub fn standard_net() -> NetworkConfig {
    NetworkConfig::standard()
}

/// A small architecture for the second-order benchmarks.
pub fn small_net() -> NetworkConfig {
    NetworkConfig { dims: LayerDims { input: 1600, hidden1: 64, hidden2: 32, output: 3 }, activation: metaemg_core::nn::Activation::Relu }
}

/// One synthetic task at the given stride.
pub fn bench_task(stride_ms: f64) -> Task {
    let corpus = synth::generate_corpus(1, 7, &CorpusConfig { signal: SignalConfig::default(), ..CorpusConfig::default() }).unwrap();
    split_task(corpus.entries[0].recording.clone(), 0, &TaskConfig::with_stride_ms(stride_ms)).unwrap()
}

/// Support batch of the bench task.
pub fn bench_batch(stride_ms: f64) -> Batch {
    bench_task(stride_ms).support_batch()
}

/// Seeded parameters for the given architecture.
pub fn bench_params(net: &NetworkConfig) -> ModelParams {
    metaemg_core::nn::init_params(net, 42)
}
