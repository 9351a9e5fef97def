use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ptnet_core::tensor::{gemm, MatRef};
use ptnet_core::{Rng, Tensor};
use std::hint::black_box;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    g.sample_size(10);
    let mut rng = Rng::new(0);
    // square, plus the tall-skinny token projections the model runs
    for (m, k, n) in [(256, 256, 256), (16384, 144, 16), (4096, 512, 64)] {
        let a = Tensor::<f32>::randn(&[m, k], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[k, n], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(format!("{m}x{k}x{n}")), &(), |bch, _| {
            bch.iter(|| gemm(MatRef::new(black_box(a.data()), m, k), MatRef::new(b.data(), k, n)))
        });
    }
    g.finish();
}

criterion_group!(benches, matmul);
criterion_main!(benches);
