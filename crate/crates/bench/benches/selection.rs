use criterion::{black_box, criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use seals_bench::{corpus, seed};
use seals_core::classifier::train;
use seals_core::pool::CandidatePool;
use seals_core::strategies::{select_batch, Scorer, SimCache, StrategyKind};
use seals_core::TrainConfig;

fn selection(c: &mut Criterion) {
    let ds = corpus(20_000, 32);
    let labeled = seed(&ds);
    let model = train(&labeled, &ds, &TrainConfig::default()).unwrap();
    let unlabeled: Vec<usize> = (0..ds.len()).filter(|r| !labeled.contains(*r)).collect();

    let mut group = c.benchmark_group("select_batch");
    for (name, kind, pool_size) in [
        ("maxent", StrategyKind::MaxEnt, 10_000usize),
        ("mlp", StrategyKind::Mlp, 10_000),
        ("id_first_round", StrategyKind::info_density(), 1_000),
    ] {
        let pool: CandidatePool = {
            let mut p = CandidatePool::new();
            for &r in &unlabeled[..pool_size] {
                p.insert(r);
            }
            p
        };
        group.bench_with_input(BenchmarkId::new(name, pool_size), &pool, |b, pool| {
            let scorer = Scorer::new(&kind, Some(&model), &ds);
            b.iter_batched(
                || (pool.clone(), SimCache::new()),
                |(mut p, mut cache)| black_box(select_batch(&scorer, &mut p, &mut cache, 100).unwrap()),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, selection);
criterion_main!(benches);
