//! Batch-parallel hot paths on rayon's default pool against the same code
//! pinned to one worker. Build with `--no-default-features` to bench the
//! plain sequential fallback instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cxrinf_core::dataset::synth::{disk_corpus, SynthConfig};
use cxrinf_core::dataset::SegMask;
use cxrinf_core::exec;
use cxrinf_core::infermap::ProbMask;
use cxrinf_core::metrics::confusion_pixel_batch;
use cxrinf_core::segmodel::{build_segmentation_model, image_tensor, DecoderKind, EncoderKind, ModelConfig};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let mut v = vec![("one-thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap())];
    if exec::is_parallel() {
        v.push(("default-pool", rayon::ThreadPoolBuilder::new().build().unwrap()));
    }
    v
}

fn forward(c: &mut Criterion) {
    let data = disk_corpus(&SynthConfig { n: 8, ..SynthConfig::default() });
    let model = build_segmentation_model(&ModelConfig::desk(DecoderKind::Unet, EncoderKind::Densenet121)).unwrap();
    let images: Vec<_> = data.iter().map(|s| &s.image).collect();
    let x = image_tensor(&images).unwrap();
    let mut g = c.benchmark_group("unet_forward_batch8");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| model.predict_batch(&x).unwrap())));
    }
    g.finish();
}

fn pixel_confusion(c: &mut Criterion) {
    let data = disk_corpus(&SynthConfig {
        n: 64,
        size: 128,
        ..SynthConfig::default()
    });
    let gts: Vec<SegMask> = data.iter().map(|s| s.mask.clone().unwrap()).collect();
    let probs: Vec<ProbMask> = data
        .iter()
        .map(|s| ProbMask::new(s.image.id.clone(), s.image.pixels.clone()).unwrap())
        .collect();
    let pairs: Vec<_> = gts.iter().zip(&probs).collect();
    let mut g = c.benchmark_group("pixel_confusion_64x128px");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| confusion_pixel_batch(&pairs, 0.5).unwrap())));
    }
    g.finish();
}

criterion_group!(benches, forward, pixel_confusion);
criterion_main!(benches);
