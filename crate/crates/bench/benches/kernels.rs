use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use octgan_core::dataset::make_samples;
use octgan_core::metrics::ssim;
use octgan_core::{Image, LongitudinalDataset, RunConfig, SsimParams, Tape, Tensor, Trainer};
use std::hint::black_box;

fn conv2d(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_k4s2");
    for &(ch, hw) in &[(16usize, 64usize), (32, 32), (64, 16)] {
        let x = Tensor::<f32>::randn(&[8, ch, hw, 2 * hw], 0.0, 1.0, 1).unwrap();
        let k = Tensor::<f32>::randn(&[2 * ch, ch, 4, 4], 0.0, 0.02, 2).unwrap();
        g.bench_with_input(BenchmarkId::new("fwd_bwd", format!("{ch}x{hw}x{}", 2 * hw)), &(), |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let xv = tape.param(x.clone());
                let kv = tape.param(k.clone());
                let y = xv.conv2d(kv, None, 2, 1).unwrap();
                black_box(tape.backward(y.sum()).unwrap());
            })
        });
    }
    g.finish();
}

fn ssim_64x128(c: &mut Criterion) {
    let a = Image::new(64, 128, (0..64 * 128).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap();
    let b = Image::new(64, 128, (0..64 * 128).map(|i| (i % 89) as f32 / 89.0).collect()).unwrap();
    let p = SsimParams::default();
    c.bench_function("ssim_64x128", |bench| bench.iter(|| black_box(ssim(&a, &b, &p).unwrap())));
}

fn training_steps(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let t = &cfg.train;
    let frames = Tensor::<f32>::randn(&[t.batch_size, 1, t.n_visits_in, t.height, t.width], 0.0, 0.5, 3).unwrap();
    let target = Tensor::<f32>::randn(&[t.batch_size, 1, t.height, t.width], 0.0, 0.5, 4).unwrap();
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let mut g = c.benchmark_group("desk_step");
    g.sample_size(10);
    g.bench_function("generator", |b| b.iter(|| black_box(trainer.generator_step(&frames, &target).unwrap())));
    g.bench_function("discriminator", |b| {
        b.iter(|| black_box(trainer.discriminator_step(&frames, &target).unwrap()))
    });
    g.finish();
}

fn sample_windows(c: &mut Criterion) {
    let ds = LongitudinalDataset::from_counts(&[10; 109], 61);
    c.bench_function("make_samples_109_eyes", |b| b.iter(|| black_box(make_samples(&ds, 3).unwrap().len())));
}

criterion_group!(benches, conv2d, ssim_64x128, training_steps, sample_windows);
criterion_main!(benches);
