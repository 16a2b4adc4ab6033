use criterion::{black_box, criterion_group, criterion_main, Criterion};

use fetnet::datagen::generate_corpus;
use fetnet::fet::{background_attention, cosine_similarity_map, SoftmaxMode};
use fetnet::gradcheck::random_tensor;
use fetnet::metrics::image_metrics;
use fetnet::nn::conv::{conv2d, conv_transpose2d};
use fetnet::{DType, Device, Generator, GeneratorConfig};

fn f32_tensor(shape: &[usize], seed: u64) -> fetnet::Tensor {
    random_tensor(shape, -1.0, 1.0, seed)
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap()
}

fn convolutions(c: &mut Criterion) {
    let x = f32_tensor(&[4, 8, 64, 64], 1);
    let w = f32_tensor(&[8, 8, 7, 7], 2);
    c.bench_function("conv2d 8->8 k7 64x64 b4", |b| {
        b.iter(|| conv2d(black_box(&x), &w, 1, 3).unwrap())
    });
    let xs = f32_tensor(&[4, 16, 32, 32], 3);
    let wt = f32_tensor(&[16, 8, 4, 4], 4);
    c.bench_function("conv_transpose2d 16->8 k4 s2 32x32 b4", |b| {
        b.iter(|| conv_transpose2d(black_box(&xs), &wt, 2, 1, 0).unwrap())
    });
}

fn attention(c: &mut Criterion) {
    let f = f32_tensor(&[4, 32, 16, 16], 5);
    let ct = random_tensor(&[4, 1, 16, 16], 0.0, 1.0, 6)
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap();
    c.bench_function("cosine similarity + background attention 16x16", |b| {
        b.iter(|| {
            let s = cosine_similarity_map(black_box(&f)).unwrap();
            background_attention(&s, &ct, SoftmaxMode::Literal).unwrap()
        })
    });
}

fn generator(c: &mut Criterion) {
    let g = Generator::new(GeneratorConfig::toy(), 0, DType::F32, &Device::Cpu).unwrap();
    let x = random_tensor(&[4, 3, 64, 64], 0.0, 1.0, 7)
        .unwrap()
        .to_dtype(DType::F32)
        .unwrap();
    let mut group = c.benchmark_group("toy generator 64x64 b4");
    group.sample_size(10);
    group.bench_function("forward", |b| b.iter(|| g.forward(black_box(&x)).unwrap()));
    group.bench_function("forward+backward", |b| {
        b.iter(|| {
            g.forward(black_box(&x))
                .unwrap()
                .image
                .sum_all()
                .unwrap()
                .backward()
                .unwrap()
        })
    });
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let t = generate_corpus(0, 1, (256, 256), 3).unwrap().remove(0);
    c.bench_function("six metrics 256x256", |b| {
        b.iter(|| image_metrics(black_box(&t.input), &t.gt).unwrap())
    });
}

criterion_group!(benches, convolutions, attention, generator, metrics);
criterion_main!(benches);
