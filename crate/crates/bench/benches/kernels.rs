use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use crformer::attention::region_cross_attention_values;
use crformer::model::ModelConfig;
use crformer::synth::{self, SyntheticShadowSpec};
use crformer::train::{AugmentConfig, RunConfig, Trainer};
use crformer::Graph;
use crformer_bench::wavy;
use std::hint::black_box;

fn conv2d(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d_3x3");
    for (ch, side) in [(16usize, 32usize), (32, 64)] {
        let x = wavy(&[ch, side, side], 0.1);
        let w = wavy(&[ch, ch, 3, 3], 0.7);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{ch}x{side}x{side}")), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
                black_box(g.value(y)[0])
            })
        });
    }
    group.finish();
}

fn region_attention(c: &mut Criterion) {
    let mut group = c.benchmark_group("region_cross_attention");
    for (tokens, ch) in [(256usize, 16usize), (1024, 32)] {
        let fq = wavy(&[tokens, ch], 0.2);
        let fkv = wavy(&[tokens, ch], 1.3);
        let wq = wavy(&[ch, ch], 2.1);
        let wk = wavy(&[ch, ch], 3.4);
        let wv = wavy(&[ch, ch], 4.2);
        let ms: Vec<f64> = (0..tokens).map(|i| ((i * 7) % 5 < 2) as u8 as f64).collect();
        group.bench_with_input(BenchmarkId::from_parameter(format!("{tokens}x{ch}")), &(), |b, _| {
            b.iter(|| black_box(region_cross_attention_values(&fq, &fkv, &ms, &wq, &wk, &wv).unwrap()))
        });
    }
    group.finish();
}

fn train_step(c: &mut Criterion) {
    let sample = synth::sample(&SyntheticShadowSpec::default(), 0).unwrap();
    let cfg = RunConfig {
        model: ModelConfig {
            base_channels: 16,
            ..ModelConfig::default()
        },
        augment: AugmentConfig { crop: 64, flip: false },
        ..RunConfig::default()
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    c.bench_function("train_step_c16_64x64", |b| {
        b.iter(|| black_box(trainer.train_step(&sample, 0, None).unwrap().losses.total))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv2d, region_attention, train_step
}
criterion_main!(benches);
