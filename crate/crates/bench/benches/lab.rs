use bapo_bench::{drifted, fixture};
use bapo_core::rollout::generate_groups;
use bapo_core::trainer::run;
use bapo_core::{
    adapt_bounds, batch_gradient, Algorithm, BapoConfig, ClipBounds, EnvSpec, LossAgg, ObjectiveConfig, RatioWeighting,
    RewardMode, SeedStream, TrainerConfig,
};
use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

fn gradient(c: &mut Criterion) {
    let mut group = c.benchmark_group("batch_gradient");
    for &(vocab, horizon) in &[(4usize, 4usize), (8, 4)] {
        let (_, policy, batch) = fixture(vocab, horizon, 8, 8);
        let current = drifted(&policy, 0.4);
        let bounds = ClipBounds::new(0.8, 1.2).unwrap();
        let cfg = ObjectiveConfig::default();
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("v{vocab}_t{horizon}")),
            &batch,
            |b, batch| b.iter(|| batch_gradient(black_box(&current), black_box(batch), bounds, &cfg).unwrap()),
        );
    }
    group.finish();
}

fn bound_search(c: &mut Criterion) {
    let (_, policy, batch) = fixture(4, 4, 8, 8);
    let current = drifted(&policy, 0.4);
    let cfg = BapoConfig {
        rho0: 0.95,
        ..BapoConfig::default()
    };
    c.bench_function("adapt_bounds/full_ladder", |b| {
        b.iter(|| {
            adapt_bounds(
                black_box(&batch),
                black_box(&current),
                &cfg,
                RatioWeighting::ProbWeighted,
            )
            .unwrap()
        })
    });
}

fn rollout(c: &mut Criterion) {
    let (spec, policy, _) = fixture(4, 4, 8, 8);
    let prompts: Vec<usize> = (0..8).collect();
    c.bench_function("generate_groups/8x8", |b| {
        b.iter(|| generate_groups(black_box(&policy), &spec, &prompts, 8, &SeedStream::new(1), 0).unwrap())
    });
}

fn trainer(c: &mut Criterion) {
    let env = EnvSpec::generate(8, 4, 4, RewardMode::ExactMatch, 0).unwrap();
    let mut cfg = TrainerConfig::new(Algorithm::Bapo, env);
    cfg.steps = 20;
    cfg.staleness_epochs = 4;
    cfg.objective.loss_agg = LossAgg::Sum;
    let mut group = c.benchmark_group("trainer");
    group.sample_size(10);
    group.bench_function("bapo_20_steps_e4", |b| b.iter(|| run(black_box(&cfg)).unwrap()));
    group.finish();
}

criterion_group!(benches, gradient, bound_search, rollout, trainer);
criterion_main!(benches);
