use criterion::{criterion_group, criterion_main, Criterion};
use sceneloc_core::eval::compare_heads;
use sceneloc_core::eval::stats::{friedman_test, wilcoxon_signed_rank, WilcoxonMethod};
use sceneloc_core::EpisodeRunMatrix;

fn stats(c: &mut Criterion) {
    let a: Vec<f64> = (0..20).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
    let b: Vec<f64> = (0..20).map(|i| ((i * 11) % 13) as f64 / 13.0).collect();
    c.bench_function("wilcoxon_exact_n20", |bench| {
        bench.iter(|| wilcoxon_signed_rank(&a, &b, WilcoxonMethod::Exact).unwrap())
    });
    let data: Vec<Vec<f64>> = (0..6)
        .map(|t| (0..17).map(|e| ((t * 7 + e * 5) % 11) as f64 / 11.0).collect())
        .collect();
    c.bench_function("friedman_6x17", |bench| bench.iter(|| friedman_test(&data).unwrap()));
    let episodes = (0..17).map(|e| format!("e{e}")).collect();
    let m = EpisodeRunMatrix::from_fn(episodes, 7, |k, e, r| {
        ((k.index() * 13 + e * 7 + r * 3) % 19) as f64 / 19.0
    })
    .unwrap();
    c.bench_function("compare_heads_17x7", |bench| bench.iter(|| compare_heads(&m, 0.05).unwrap()));
}

criterion_group!(benches, stats);
criterion_main!(benches);
