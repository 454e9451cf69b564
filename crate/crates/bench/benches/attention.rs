use std::hint::black_box;

use afg_core::attention::{attend, attention_pair_count, AttentionConfig, AttentionMask, Mask, PairPattern};
use afg_core::{Graph, Tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn filled(rows: usize, cols: usize, seed: u64) -> Tensor {
    let data = (0..rows * cols).map(|i| (((i as u64 + 1) * (seed + 7919)) % 1000) as f64 / 500.0 - 1.0).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn pair_count(c: &mut Criterion) {
    let cfg = AttentionConfig::new(16, vec![0]).unwrap();
    c.bench_function("pair_count/closed_form/n=16384", |b| {
        b.iter(|| attention_pair_count(black_box(16_384), PairPattern::Sparse(&cfg)).unwrap())
    });
    c.bench_function("pair_count/mask/n=1024", |b| {
        b.iter(|| AttentionMask::sparse(black_box(1024), &cfg).unwrap().count())
    });
}

fn masked_attend(c: &mut Criterion) {
    let cfg = AttentionConfig::new(16, vec![0]).unwrap();
    let mut group = c.benchmark_group("attend");
    for n in [64usize, 128, 256] {
        let (q, k, v) = (filled(n, 32, 1), filled(n, 32, 2), filled(n, 32, 3));
        let mask = AttentionMask::sparse(n, &cfg).unwrap();
        let run = |mask: Mask<'_>| {
            let mut g = Graph::new();
            let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let out = attend(&mut g, q, k, v, mask).unwrap();
            g.value(out).data()[0]
        };
        group.bench_with_input(BenchmarkId::new("dense", n), &n, |b, _| b.iter(|| run(Mask::None)));
        group.bench_with_input(BenchmarkId::new("sliding_window", n), &n, |b, _| b.iter(|| run(Mask::Explicit(&mask))));
    }
    group.finish();
}

criterion_group!(benches, pair_count, masked_attend);
criterion_main!(benches);
