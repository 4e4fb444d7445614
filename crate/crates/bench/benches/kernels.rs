use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lmreg::autodiff::{Graph, Tensor};
use lmreg::model::{infer, init_params, DetectorConfig};
use lmreg::phantom::{generate_cohort, PhantomSpec};
use lmreg::tps::{dense_field, fit_tps, DEFAULT_KERNEL_SCALE};
use lmreg::trainer::{TrainConfig, Trainer};

fn ramp(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i * 7919) % 113) as f64 / 113.0 - 0.5).collect()).unwrap()
}

fn conv3d(c: &mut Criterion) {
    let input = ramp(vec![8, 24, 24, 24]);
    let weight = ramp(vec![16, 8, 3, 3, 3]);
    c.bench_function("conv3d 8->16 ch 24^3 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let x = g.param(input.clone());
            let w = g.param(weight.clone());
            let y = g.conv3d(x, w, 1).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn tps(c: &mut Criterion) {
    let cohort = generate_cohort(&PhantomSpec::default(), 1, 0).unwrap();
    let (source, target) = (&cohort.landmarks, &cohort.train[0].1);
    c.bench_function("tps fit 6 points", |b| {
        b.iter(|| black_box(fit_tps(source, target, 0.1, DEFAULT_KERNEL_SCALE).unwrap()))
    });
    let t = fit_tps(source, target, 0.1, DEFAULT_KERNEL_SCALE).unwrap();
    c.bench_function("tps dense field 48^3", |b| {
        b.iter(|| black_box(dense_field(&t, &cohort.template.grid)))
    });
}

fn detector(c: &mut Criterion) {
    let cohort = generate_cohort(&PhantomSpec::default(), 4, 0).unwrap();
    let det = DetectorConfig::small(cohort.template.shape(), 6);
    let params = init_params(&det, 0);
    c.bench_function("detector inference 48^3", |b| {
        b.iter(|| black_box(infer(&det, &params, &cohort.template).unwrap()))
    });
    let mut group = c.benchmark_group("train step 48^3");
    group.sample_size(10);
    for (name, warmup) in [("template warm-up", 1_000_000), ("registration", 0)] {
        let cfg = TrainConfig {
            steps: 1_000_001,
            warmup_steps: warmup,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(
            cfg,
            det.clone(),
            params.clone(),
            cohort.template.clone(),
            cohort.landmarks.clone(),
            cohort.train.iter().map(|(v, _)| v.clone()).collect(),
        )
        .unwrap();
        group.bench_function(name, |b| b.iter(|| black_box(trainer.train_step().unwrap())));
    }
    group.finish();
}

criterion_group!(benches, conv3d, tps, detector);
criterion_main!(benches);
