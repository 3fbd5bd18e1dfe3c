use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use meshlift::config::ModelConfig;
use meshlift::datagen::{generate_split, DataConfig, SPLITS};
use meshlift::model::Model;
use meshlift::parallel::{num_threads, Exec};
use meshlift::train::{evaluate, prepare, sample_step, Phase};

fn batch_eval(c: &mut Criterion) {
    let data = DataConfig { sim_steps: 300, ..DataConfig::default() };
    let samples = generate_split(&data, &SPLITS[1], 24, Exec::Auto).unwrap();
    let config = ModelConfig { channels: 16, stage_width: 16, depth_width: 32, ..ModelConfig::default() };
    let model = Model::new(&config);
    let set = prepare(&model, &samples, Exec::Auto).unwrap();

    let mut g = c.benchmark_group(format!("evaluate_24_samples_{}_threads", num_threads()));
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Auto] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| evaluate(&model, &set, Phase::Joint, exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("gradients_3_samples");
    g.sample_size(10);
    let batch = &set[..3];
    for exec in [Exec::Sequential, Exec::Auto] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| meshlift::parallel::map(exec, batch, |s| sample_step(&model, s, Phase::Joint).unwrap()))
        });
    }
    g.finish();

    let mut g = c.benchmark_group("generate_16_samples");
    g.sample_size(10);
    for exec in [Exec::Sequential, Exec::Auto] {
        g.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &exec, |b, &exec| {
            b.iter(|| generate_split(&data, &SPLITS[1], 16, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, batch_eval);
criterion_main!(benches);
