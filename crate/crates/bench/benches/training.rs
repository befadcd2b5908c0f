use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use bond_bench::fixture;
use bond_core::baselines::{ReinforceConfig, ReinforceTrainer};
use bond_core::bond::{BondConfig, BondTrainer, GradMode, QuantileSource};
use bond_core::harness::TrainablePolicy;
use bond_core::jbond::{JBondConfig, JBondTrainer};
use bond_core::{AutoregressivePolicy, CategoricalPolicy, Seed};

fn bond_steps(c: &mut Criterion) {
    let sc = fixture(4, 4, 2);
    let cases = [
        ("exact", GradMode::Exact, QuantileSource::Mc),
        ("sampled_mc", GradMode::Sampled, QuantileSource::Mc),
        (
            "sampled_learned",
            GradMode::Sampled,
            QuantileSource::Learned,
        ),
    ];
    for (name, grad_mode, quantile_source) in cases {
        let cfg = BondConfig {
            grad_mode,
            quantile_source,
            ..Default::default()
        };
        c.bench_function(&format!("bond_step/{name}"), |b| {
            b.iter_batched(
                || {
                    BondTrainer::new(cfg.clone(), &sc.prompts, sc.reference.clone(), Seed(1))
                        .unwrap()
                },
                |mut t| t.step().unwrap(),
                BatchSize::SmallInput,
            )
        });
    }

    let ar = AutoregressivePolicy::from_reference(&sc.prompts, &sc.reference).unwrap();
    c.bench_function("bond_step/exact_autoregressive", |b| {
        b.iter_batched(
            || BondTrainer::new(BondConfig::default(), &sc.prompts, ar.clone(), Seed(1)).unwrap(),
            |mut t| t.step().unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn baseline_steps(c: &mut Criterion) {
    let sc = fixture(4, 4, 2);
    let reference: CategoricalPolicy = sc.reference.clone();
    c.bench_function("jbond_step", |b| {
        b.iter_batched(
            || {
                JBondTrainer::new(
                    JBondConfig::default(),
                    &sc.prompts,
                    reference.clone(),
                    Seed(1),
                )
                .unwrap()
            },
            |mut t| t.step().unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("reinforce_step", |b| {
        b.iter_batched(
            || {
                ReinforceTrainer::new(
                    ReinforceConfig::default(),
                    &sc.prompts,
                    reference.clone(),
                    Seed(1),
                )
                .unwrap()
            },
            |mut t| t.step(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bond_steps, baseline_steps);
criterion_main!(benches);
