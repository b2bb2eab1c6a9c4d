use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;
use wildsplat::losses::ssim;
use wildsplat::raster::{backward, render, RenderSettings};
use wildsplat::refiner::{Refiner, RefinerConfig};
use wildsplat::trainer::{TrainConfig, Trainer};
use wildsplat::ScalarMap;

fn rasterizer(c: &mut Criterion) {
    let scene = wildsplat_bench::scene().unwrap();
    let (field, cam, target) = wildsplat_bench::view(&scene).unwrap();
    let settings = RenderSettings::default();
    c.bench_function("render 48x48", |b| b.iter(|| render(black_box(&field), &cam, &settings).unwrap()));
    let out = render(&field, &cam, &settings).unwrap();
    let d_image: Vec<f64> = out.image.rgb.iter().zip(&target.rgb).map(|(a, b)| a - b).collect();
    let d_opacity = vec![0.0; out.opacity.values.len()];
    c.bench_function("backward 48x48", |b| b.iter(|| backward(&field, &cam, black_box(&out), &d_image, &d_opacity).unwrap()));
}

fn refiner(c: &mut Criterion) {
    let scene = wildsplat_bench::scene().unwrap();
    let (field, cam, reference) = wildsplat_bench::view(&scene).unwrap();
    let rendered = render(&field, &cam, &RenderSettings::default()).unwrap().image;
    let mask = ScalarMap::new(rendered.width, rendered.height);
    let refiner = Refiner::new(RefinerConfig::default()).unwrap();
    c.bench_function("refine 48x48", |b| b.iter(|| refiner.refine(black_box(&rendered), &reference, &mask).unwrap()));
    c.bench_function("ssim 48x48", |b| b.iter(|| ssim(black_box(&rendered), &reference).unwrap()));
}

fn training(c: &mut Criterion) {
    let scene = wildsplat_bench::scene().unwrap();
    let (dataset, masks) = wildsplat_bench::dataset(&scene).unwrap();
    let config = TrainConfig { warmup_iters: 0, replication_cadence: 1_000_000, ..TrainConfig::default() };
    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step with pseudo view", |b| {
        b.iter_batched(
            || Trainer::new(config.clone(), &dataset, &masks).unwrap(),
            |mut trainer| trainer.step().unwrap(),
            BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, rasterizer, refiner, training);
criterion_main!(benches);
