//! Shared builders for integration-test worlds.
//!
//! `bench_config` is the desk-scale benchmark recipe used by the acceptance
//! suite: 5,000 clean entries, 500 eval queries, vocab 500, d = 32, K = 4,
//! 4 poisoned instances, 6 trigger tokens.

use std::path::Path;

use kbpoison::config::ExperimentConfig;
use kbpoison::embedder::EmbedderKind;
use kbpoison::pipeline::synthetic_config;
use kbpoison::synth::SynthParams;

#[allow(dead_code)]
pub fn bench_params(seed: u64) -> SynthParams {
    SynthParams {
        vocab_size: 500,
        train: 5000,
        eval: 500,
        seed,
        ..SynthParams::default()
    }
}

/// Benchmark configuration for one seed, wired to freshly generated
/// synthetic files under `dir`.
#[allow(dead_code)]
pub fn bench_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = synthetic_config(&bench_params(seed), dir).expect("synthetic generation");
    cfg.seeds.data = seed;
    cfg.seeds.optimizer = seed ^ 0x5eed;
    cfg.embedder.kind = EmbedderKind::PositionWeightedPool;
    cfg.embedder.dim = 32;
    cfg.retrieval.k = 4;
    cfg.poison.count = 4;
    cfg.lm.order = 2;
    cfg.optimizer.trigger_length = 6;
    cfg.optimizer.beam_width = 6;
    cfg.optimizer.top_m = 500;
    cfg.optimizer.coherence_samples = 8;
    cfg.optimizer.temperature = 0.05;
    cfg.optimizer.eta_tar = 0.55;
    cfg.optimizer.batch_size = 64;
    cfg.optimizer.accumulation_steps = 2;
    cfg.optimizer.target_batch_size = 24;
    cfg.optimizer.max_iters = 250;
    cfg.optimizer.patience = 60;
    cfg
}

/// Mid-size world with a well-trained surrogate LM, for filter-dependent
/// tests.
#[allow(dead_code)]
pub fn small_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let params = SynthParams {
        vocab_size: 200,
        train: 1200,
        eval: 150,
        seed,
        ..SynthParams::default()
    };
    let mut cfg = synthetic_config(&params, dir).expect("synthetic generation");
    cfg.seeds.data = seed;
    cfg.embedder.dim = 24;
    cfg.embedder.kind = EmbedderKind::PositionWeightedPool;
    cfg.retrieval.k = 3;
    cfg.poison.count = 3;
    cfg.lm.order = 2;
    cfg.optimizer.trigger_length = 4;
    cfg.optimizer.beam_width = 4;
    cfg.optimizer.top_m = 150;
    cfg.optimizer.coherence_samples = 8;
    cfg.optimizer.temperature = 0.05;
    cfg.optimizer.eta_tar = 0.55;
    cfg.optimizer.batch_size = 32;
    cfg.optimizer.accumulation_steps = 1;
    cfg.optimizer.target_batch_size = 12;
    cfg.optimizer.max_iters = 60;
    cfg.optimizer.patience = 20;
    cfg
}

/// A small, fast world for behavioural tests.
#[allow(dead_code)]
pub fn tiny_config(dir: &Path, seed: u64) -> ExperimentConfig {
    let params = SynthParams {
        vocab_size: 120,
        train: 150,
        eval: 30,
        seed,
        ..SynthParams::default()
    };
    let mut cfg = synthetic_config(&params, dir).expect("synthetic generation");
    cfg.seeds.data = seed;
    cfg.embedder.dim = 16;
    cfg.embedder.kind = EmbedderKind::PositionWeightedPool;
    cfg.retrieval.k = 2;
    cfg.poison.count = 2;
    cfg.lm.order = 2;
    cfg.optimizer.trigger_length = 3;
    cfg.optimizer.beam_width = 3;
    cfg.optimizer.top_m = 60;
    cfg.optimizer.coherence_samples = 6;
    cfg.optimizer.temperature = 0.05;
    cfg.optimizer.eta_tar = 0.55;
    cfg.optimizer.batch_size = 16;
    cfg.optimizer.accumulation_steps = 1;
    cfg.optimizer.target_batch_size = 8;
    cfg.optimizer.max_iters = 30;
    cfg.optimizer.patience = 10;
    cfg
}
