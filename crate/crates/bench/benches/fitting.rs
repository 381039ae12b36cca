use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use fdm_bench::dataset;
use fdm_core::fpca::fit_fpca_values;
use fdm_core::{
    bootstrap_prediction_intervals, run_fdm_pipeline, BootstrapConfig, EodKind, FpcaOptions, PipelineConfig,
    Smoothing, TrainingSet,
};

fn fpca(c: &mut Criterion) {
    let ds = dataset(20, 50, EodKind::Lme);
    let curves: Vec<&[f64]> = ds.records().map(|r| r.scaled.values.as_slice()).collect();
    c.bench_function("fpca 1000 curves x 300 points", |b| {
        b.iter(|| fit_fpca_values(&curves, &FpcaOptions::default()).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let ds = dataset(20, 50, EodKind::Lme);
    let cfg = PipelineConfig::simulation(EodKind::Lme);
    c.bench_function("fdm-lme pipeline, 20 units x 50 cycles", |b| {
        b.iter(|| run_fdm_pipeline(&ds, &cfg).unwrap())
    });

    let ds = dataset(20, 50, EodKind::Flmm);
    let mut cfg = PipelineConfig::simulation(EodKind::Flmm);
    cfg.flmm.smoothing = Smoothing::Fixed { lambda_beta: 1e-2, lambda_b: 1.0 };
    let ts = TrainingSet::new(&ds, &cfg).unwrap();
    let mut g = c.benchmark_group("functional model");
    g.sample_size(10);
    g.bench_function("fit with fixed smoothing, 20 units x 50 cycles", |b| {
        b.iter(|| ts.fit(&cfg).unwrap())
    });
    g.finish();
}

fn bootstrap(c: &mut Criterion) {
    let ds = dataset(20, 50, EodKind::Lme);
    let cfg = PipelineConfig::simulation(EodKind::Lme);
    let boot = BootstrapConfig {
        replicates: 20,
        ..Default::default()
    };
    let mut g = c.benchmark_group("bootstrap");
    g.sample_size(10);
    g.bench_function("20 weighted refits", |b| {
        b.iter_batched(
            || boot.clone(),
            |bc| bootstrap_prediction_intervals(&ds, &cfg, &bc).unwrap(),
            BatchSize::SmallInput,
        )
    });
    g.finish();
}

criterion_group!(benches, fpca, pipeline, bootstrap);
criterion_main!(benches);
