use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use tempseg_core::gradcheck::random_tensor;
use tempseg_core::Tape;

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [16usize, 64, 256] {
        let a = random_tensor::<f32>(&[n, n], -1.0, 1.0, 1).with_grad();
        let b = random_tensor::<f32>(&[n, n], -1.0, 1.0, 2).with_grad();
        g.bench_with_input(BenchmarkId::new("fwd+bwd", n), &n, |bench, _| {
            bench.iter(|| {
                let mut t = Tape::new();
                let (x, y) = (t.leaf(a.clone()), t.leaf(b.clone()));
                let z = t.matmul(x, y).unwrap();
                let s = t.sum(z).unwrap();
                t.backward(s).unwrap();
                black_box(t.grad(x).is_some())
            })
        });
    }
    g.finish();
}

fn softmax(c: &mut Criterion) {
    let a = random_tensor::<f32>(&[400, 400], -3.0, 3.0, 3).with_grad();
    c.bench_function("softmax 400x400 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let x = t.leaf(a.clone());
            let y = t.softmax(x, 1).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap();
        })
    });
}

fn convolutions(c: &mut Criterion) {
    let x2 = random_tensor::<f32>(&[8, 64, 64], 0.0, 1.0, 4).with_grad();
    let k2 = random_tensor::<f32>(&[16, 8, 3, 3], -0.3, 0.3, 5).with_grad();
    c.bench_function("conv2d 8->16 64x64 k3 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, k) = (t.leaf(x2.clone()), t.leaf(k2.clone()));
            let y = t.conv2d(x, k, 1, 1).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap();
        })
    });

    let x3 = random_tensor::<f32>(&[8, 3, 32, 32], 0.0, 1.0, 6).with_grad();
    let k3 = random_tensor::<f32>(&[8, 8, 3, 1, 1], -0.3, 0.3, 7).with_grad();
    c.bench_function("conv3d 8x3x32x32 temporal reduce fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, k) = (t.leaf(x3.clone()), t.leaf(k3.clone()));
            let y = t.conv3d(x, k, [1, 1, 1]).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap();
        })
    });

    let xt = random_tensor::<f32>(&[16, 1, 16, 16], 0.0, 1.0, 8).with_grad();
    let kt = random_tensor::<f32>(&[16, 8, 1, 2, 2], -0.3, 0.3, 9).with_grad();
    c.bench_function("conv_transpose3d 16->8 16x16 x2 fwd+bwd", |bench| {
        bench.iter(|| {
            let mut t = Tape::new();
            let (x, k) = (t.leaf(xt.clone()), t.leaf(kt.clone()));
            let y = t.conv_transpose3d(x, k, [1, 2, 2]).unwrap();
            let s = t.sum(y).unwrap();
            t.backward(s).unwrap();
        })
    });
}

criterion_group!(benches, matmul, softmax, convolutions);
criterion_main!(benches);
