use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use colorfuse_core::colorspace::{lab_to_srgb, srgb_to_lab, RgbImage};
use colorfuse_core::dataset::Batch;
use colorfuse_core::discriminator::VitConfig;
use colorfuse_core::extractor::make_stub_extractor;
use colorfuse_core::fid::{accumulate_stats, fid};
use colorfuse_core::generator::GeneratorConfig;
use colorfuse_core::ops::conv2d;
use colorfuse_core::config::TrainConfig;
use colorfuse_core::trainer::Trainer;
use colorfuse_core::Tensor;

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&[4, 16, 64, 64], &mut rng);
    let w = random_tensor(&[32, 16, 5, 5], &mut rng);
    c.bench_function("conv2d 4x16x64x64 k5 -> 32", |b| b.iter(|| conv2d(black_box(&x), &w, None, 1, 2).unwrap()));
}

fn bench_colorspace(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = RgbImage::from_fn(256, 256, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
    c.bench_function("srgb->lab->srgb 256x256", |b| b.iter(|| lab_to_srgb(&srgb_to_lab(black_box(&img)))));
}

fn bench_train_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = TrainConfig {
        image_size: 64,
        batch_size: 4,
        generator: GeneratorConfig::scaled_down(8),
        discriminator: VitConfig::reduced(),
        ..TrainConfig::default()
    };
    let batch = Batch {
        l: random_tensor(&[4, 1, 64, 64], &mut rng),
        ab: random_tensor(&[4, 2, 64, 64], &mut rng),
        ids: (0..4).collect(),
    };
    let mut trainer = Trainer::new(cfg).unwrap();
    c.bench_function("reduced train step, batch 4 at 64px", |b| b.iter(|| trainer.train_step(black_box(&batch)).unwrap()));
}

fn bench_stub_embed(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ex = make_stub_extractor(0);
    let x = random_tensor(&[1, 3, 299, 299], &mut rng);
    use colorfuse_core::extractor::EmbeddingExtractor;
    c.bench_function("stub embedding 299x299", |b| b.iter(|| ex.embed(black_box(&x)).unwrap()));
}

fn bench_fid(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 128;
    let mut draw = || -> Vec<Vec<f64>> { (0..256).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect() };
    let a = accumulate_stats(draw()).unwrap();
    let b = accumulate_stats(draw()).unwrap();
    c.bench_function("fid d=128", |bch| bch.iter(|| fid(black_box(&a), &b).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_conv, bench_colorspace, bench_train_step, bench_stub_embed, bench_fid
}
criterion_main!(benches);
