use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use klgrade::evalstats::{kappa, WeightScheme};
use klgrade::preprocess::{resize_bicubic, Raster16, REFERENCE_SPACING};
use klgrade::tensor::ConvSpec;
use klgrade::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[8, 16, 64, 64], |_| r.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[32, 16, 3, 3], |_| r.random_range(-0.1..0.1));
    let b = Tensor::zeros(&[32]);
    let spec = ConvSpec { stride: 1, padding: 1 };
    c.bench_function("conv2d_forward_8x16x64x64_to_32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
            black_box(g.conv2d(xv, wv, bv, spec).unwrap());
        })
    });
    c.bench_function("conv2d_forward_backward_8x16x64x64_to_32", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.param(x.clone()), g.param(w.clone()), g.param(b.clone()));
            let y = g.conv2d(xv, wv, bv, spec).unwrap();
            let s = g.sum(y);
            g.backward(s).unwrap();
            black_box(g.grad(wv));
        })
    });
}

fn kappas(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let a: Vec<u8> = (0..2_000).map(|_| r.random_range(0..5)).collect();
    let b: Vec<u8> = (0..2_000).map(|_| r.random_range(0..5)).collect();
    for s in WeightScheme::ALL {
        c.bench_function(&format!("kappa_{}_2000", s.name()), |bench| {
            bench.iter(|| black_box(kappa(black_box(&a), black_box(&b), s).unwrap()))
        });
    }
}

fn resize(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let src: Vec<f64> = (0..700 * 700).map(|_| r.random()).collect();
    c.bench_function("resize_bicubic_700_to_256", |bench| {
        bench.iter(|| black_box(resize_bicubic(&src, 700, 700, 256, 256).unwrap()))
    });
    let raw = Raster16::new(1400, 1400, REFERENCE_SPACING * 0.5, (0..1400 * 1400).map(|i| (i % 4096) as u16).collect())
        .unwrap();
    c.bench_function("preprocess_1400_at_half_spacing", |bench| {
        bench.iter_batched(|| raw.clone(), |img| black_box(klgrade::preprocess::preprocess_raw(&img).unwrap()), BatchSize::LargeInput)
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, kappas, resize
}
criterion_main!(benches);
