use armsentinel::tensor::kernels::{conv2d_forward, gemm, ConvDims, ConvGeom, Exec};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn bench_gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    for &n in &[64usize, 256] {
        let (a, b) = (random(n * n, 1), random(n * n, 2));
        let mut out = vec![0.0f32; n * n];
        for exec in [Exec::Seq, Exec::Par] {
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), n), &n, |bench, &n| {
                bench.iter(|| {
                    gemm(exec, false, false, n, n, n, 1.0, black_box(&a), black_box(&b), 0.0, &mut out);
                })
            });
        }
    }
    group.finish();
}

/// First encoder stage of the default generator on a batch of 4.
fn bench_conv(c: &mut Criterion) {
    let d = ConvDims {
        batch: 4,
        in_channels: 3,
        out_channels: 16,
        geom: ConvGeom {
            channels: 3,
            height: 64,
            width: 64,
            kernel: 4,
            stride: 2,
            padding: 1,
            out_h: 32,
            out_w: 32,
        },
    };
    let input = random(d.batch * d.geom.image_len(), 3);
    let kernel = random(d.out_channels * d.geom.col_rows(), 4);
    let bias = random(d.out_channels, 5);
    let mut group = c.benchmark_group("conv2d_forward");
    for exec in [Exec::Seq, Exec::Par] {
        group.bench_function(format!("{exec:?}"), |bench| {
            bench.iter(|| conv2d_forward(exec, &d, black_box(&input), &kernel, &bias))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gemm, bench_conv);
criterion_main!(benches);
