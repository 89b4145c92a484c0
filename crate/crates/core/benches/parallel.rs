use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use learnsysid::dataio::{build_features, Formulation};
use learnsysid::exec::{self, Execution};
use learnsysid::learn::{LearnConfig, LearnedModel};
use learnsysid::meta::{meta_train_with, MetaConfig, MetaRunOptions, TaskData};
use learnsysid::sim::{generate_trajectory, meta_train_winds, SimConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sim_config() -> SimConfig {
    SimConfig {
        duration: 4.0,
        ..SimConfig::default()
    }
}

fn bench_meta_step(c: &mut Criterion) {
    let cfg = sim_config();
    let f = Formulation::Translational;
    let datasets: Vec<_> = meta_train_winds()
        .iter()
        .enumerate()
        .map(|(i, w)| build_features(&generate_trajectory(w, &cfg, i as u64).unwrap(), f, 0, &w.label).unwrap())
        .collect();
    let tasks: Vec<TaskData> = datasets.iter().map(|d| TaskData::from_dataset(d).unwrap()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let model = LearnedModel::new(f, &LearnConfig::default(), datasets[0].norm.clone(), &mut rng).unwrap();
    let hyper = MetaConfig {
        outer_iters: 2,
        ..MetaConfig::default()
    };
    let mut group = c.benchmark_group("meta_train_2_iters");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let opts = MetaRunOptions {
            exec,
            ..MetaRunOptions::default()
        };
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &opts, |b, opts| {
            b.iter(|| meta_train_with(&model, &model.params, &tasks, &hyper, opts).unwrap())
        });
    }
    group.finish();
}

fn bench_simulation(c: &mut Criterion) {
    let cfg = sim_config();
    let winds = meta_train_winds();
    let mut group = c.benchmark_group("simulate_6_tasks");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| exec::map(exec, &winds, |w| generate_trajectory(w, &cfg, 0).unwrap().len()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_meta_step, bench_simulation);
criterion_main!(benches);
