use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use stflow_bench::matrix;
use stflow_core::Tape;

fn matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (matrix(n, n, 1), matrix(n, n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| bench.iter(|| black_box(&a).matmul(black_box(&b)).unwrap()));
    }
    group.finish();
}

fn softmax_backward(c: &mut Criterion) {
    let x = matrix(256, 12, 3);
    c.bench_function("softmax_rows forward+backward 256x12", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let s = tape.softmax_rows(v).unwrap();
            let sq = tape.mul(s, s).unwrap();
            let loss = tape.sum(sq);
            black_box(tape.backward(loss).unwrap());
        })
    });
}

criterion_group!(benches, matmul, softmax_backward);
criterion_main!(benches);
