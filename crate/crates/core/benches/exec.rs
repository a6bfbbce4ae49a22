//! Parallel against sequential execution of the hot loops.
//!
//! Both variants produce bitwise identical results; only wall time differs.

use std::sync::Arc;

use anticipate_core::model::{Channel, ModalityKind, Model, ModelConfig, SegmentInput};
use anticipate_core::nn::normal_tensor;
use anticipate_core::rng::stream;
use anticipate_core::synthworld::{build_world, export_corpus, WorldConfig};
use anticipate_core::text::embed_text;
use anticipate_core::trainer::{predict_logits, pretrain_batch};
use anticipate_core::Exec;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Exec); 2] = [("parallel", Exec::Parallel), ("sequential", Exec::Sequential)];

fn segments(config: &ModelConfig, n: u64, steps: usize) -> Vec<SegmentInput> {
    (0..n)
        .map(|s| SegmentInput {
            steps,
            channels: config
                .modalities
                .iter()
                .map(|spec| {
                    Some(match spec.kind {
                        ModalityKind::Dense { dim } => {
                            Channel::Dense(Arc::new(normal_tensor::<f32>(&[steps * dim], 1.0, &mut stream(s, dim as u64)).into_vec()))
                        }
                        _ => Channel::Text(
                            (0..steps)
                                .map(|i| Arc::new(embed_text(&format!("wash plate {}", (i as u64 + s) % 5), config.buckets)))
                                .collect(),
                        ),
                    })
                })
                .collect(),
        })
        .collect()
}

fn training_step(c: &mut Criterion) {
    let config = ModelConfig::default();
    let model = Model::<f32>::new(config.clone(), 1).unwrap();
    let batch = segments(&config, 16, 16);
    let texts: Vec<_> = (0..16).map(|i| embed_text(&format!("someone cuts the bag {i}"), config.buckets)).collect();
    let refs: Vec<_> = texts.iter().collect();
    let mut g = c.benchmark_group("pretrain_batch_16");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pretrain_batch(&model, &batch, &refs, 4, exec).unwrap())
        });
    }
    g.finish();
}

fn inference(c: &mut Criterion) {
    let config = ModelConfig::default();
    let model = Model::<f32>::new(config.clone(), 2).unwrap();
    let inputs = segments(&config, 64, 16);
    let mut g = c.benchmark_group("predict_logits_64");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| predict_logits(&model, &inputs, 16, exec).unwrap())
        });
    }
    g.finish();
}

fn corpus_export(c: &mut Criterion) {
    let config = WorldConfig {
        videos: 20,
        frames_per_video: 120,
        ..WorldConfig::default()
    };
    let world = build_world(&config, 3).unwrap();
    let mut g = c.benchmark_group("export_corpus_20_videos");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let dir = tempfile::tempdir().unwrap();
                export_corpus(&world, dir.path(), exec).unwrap()
            })
        });
    }
    g.finish();
}

criterion_group!(benches, training_step, inference, corpus_export);
criterion_main!(benches);
