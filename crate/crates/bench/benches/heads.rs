use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sceneloc_core::heads::{head_backward, head_forward};
use sceneloc_core::training::grad_check_instance;
use sceneloc_core::HeadKind;

fn forward_backward(c: &mut Criterion) {
    let mut group = c.benchmark_group("head");
    for kind in HeadKind::ALL {
        let (model, x, target) = grad_check_instance(kind, 20, 128, 12, 1).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", kind), &kind, |b, _| {
            b.iter(|| head_forward(&model, &x).unwrap())
        });
        let trace = head_forward(&model, &x).unwrap();
        group.bench_with_input(BenchmarkId::new("backward", kind), &kind, |b, _| {
            b.iter(|| head_backward(&model, &x, &trace, target).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, forward_backward);
criterion_main!(benches);
