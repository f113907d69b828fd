// Rayon pool vs a single-thread pool over the same code paths. Built without
// the `parallel` feature both arms run the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use consult::bank::{greedy_coreset, BankConfig, MemoryBank};
use consult::extractor::{initial_weights, Extractor, ExtractorConfig};
use consult::harness::phantom_brain;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let seq = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let par = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", seq), ("parallel", par)]
}

fn small_cfg() -> ExtractorConfig {
    ExtractorConfig {
        base_width: 16,
        ..ExtractorConfig::default()
    }
}

fn coreset(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dim = 112;
    let n = 4096;
    let pts: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = c.benchmark_group("coreset");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new(name, n), |b| {
            b.iter(|| pool.install(|| greedy_coreset(&pts, dim, n / 10, 0)))
        });
    }
    g.finish();
}

fn extraction_and_scoring(c: &mut Criterion) {
    let cfg = small_cfg();
    let imgs: Vec<_> = (0..8).map(|s| phantom_brain(64, s)).collect();
    let ws = initial_weights(&cfg, 0, &imgs[..2]).unwrap();
    let ex = Extractor::new(&cfg, &ws).unwrap();
    let grids = ex.grids(&imgs[..2]).unwrap();
    let bank = MemoryBank::from_grids(&grids, [0; 32], &BankConfig::default(), 0).unwrap();
    let query = ex.grid(&imgs[7]).unwrap();

    let mut g = c.benchmark_group("extract");
    g.sample_size(10);
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new(name, imgs.len()), |b| b.iter(|| pool.install(|| ex.grids(&imgs).unwrap())));
    }
    g.finish();

    let mut g = c.benchmark_group("score");
    for (name, pool) in pools() {
        g.bench_function(BenchmarkId::new(name, query.cells()), |b| {
            b.iter(|| pool.install(|| bank.score_grid(&query, (64, 64), 4.0).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, coreset, extraction_and_scoring);
criterion_main!(benches);
