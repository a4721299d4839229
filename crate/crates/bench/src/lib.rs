//! Fixtures shared by the benchmarks.

use simt_core::config::{ModelConfig, Variant};
use simt_core::multiplex::{DecoderMode, SharingMode};
use simt_core::train::{gen_toy_task, Sample, TaskSpec};

/// Desk-scale model matching the shipped `tiny_*` presets.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    let simt = variant == Variant::Simt;
    ModelConfig {
        d_model: 32,
        d_ff: 128,
        heads: 4,
        enc_layers: 6,
        groups: if simt { 3 } else { 6 },
        dec_layers: if simt { 2 } else { 6 },
        vocab_size: 32,
        feature_dim: 16,
        dropout: 0.0,
        max_len: 64,
        sharing: SharingMode {
            decoder: if simt { DecoderMode::Simt } else { DecoderMode::Baseline },
            ..SharingMode::SIMT_I
        },
        ..ModelConfig::defaults(variant)
    }
}

/// One noiseless utterance with `labels` tokens.
pub fn utterance(labels: usize) -> Sample<f32> {
    let task = gen_toy_task::<f32>(&TaskSpec {
        seed: 1,
        n_samples: 64,
        max_label_len: labels,
        vocab_size: 32,
        feature_dim: 16,
        noise_sd: 0.0,
    })
    .expect("valid task");
    task.samples
        .into_iter()
        .find(|s| s.labels.len() == labels)
        .expect("a sample of the longest length")
}
