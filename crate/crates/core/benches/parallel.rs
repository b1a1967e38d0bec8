use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use machplan::exec;
use machplan::geometry::synth::{build_sample, enumerate_specs, GridSpec};
use machplan::geometry::SequenceSample;
use machplan::graph::extract_sequence;
use machplan::model::{Model, ModelConfig};
use machplan::train::prepare_inputs;

const GRID: &str = r#"
segments = 12
jitter = 1.0

[[family]]
family = "simple"
length = [40.0, 48.0]
width = [30.0, 36.0]
height = [12.0]
face_reduction = [0.0, 1.0]

[[family.feature]]
kind = "rect_pocket"
u = [0.3]
v = [0.5]
dims = [[10.0, 6.0], [8.0, 8.0]]
depth = [3.0]

[[family.feature]]
kind = "circ_hole"
u = [0.75]
v = [0.5]
dims = [[4.0]]
depth = [5.0, 20.0]
countersink = [0.0, 7.0]
optional = true
"#;

const MODES: [(&str, bool); 2] = [("serial", false), ("parallel", true)];

fn samples(grid: &GridSpec) -> Vec<SequenceSample> {
    let specs = enumerate_specs(0, grid, true).unwrap();
    exec::try_map(&specs, true, |(id, s)| build_sample(id.clone(), s.clone(), grid.segments)).unwrap()
}

fn generation(c: &mut Criterion) {
    let grid = GridSpec::from_toml(GRID).unwrap();
    let mut group = c.benchmark_group("generate");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let specs = enumerate_specs(0, &grid, par).unwrap();
                exec::try_map(&specs, par, |(id, s)| build_sample(id.clone(), s.clone(), grid.segments)).unwrap()
            })
        });
    }
    group.finish();
}

fn extraction(c: &mut Criterion) {
    let grid = GridSpec::from_toml(GRID).unwrap();
    let data = samples(&grid);
    let mut group = c.benchmark_group("extract");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec::try_map(&data, par, extract_sequence).unwrap())
        });
    }
    group.finish();
}

fn batch_gradient(c: &mut Criterion) {
    let grid = GridSpec::from_toml(GRID).unwrap();
    let extracted = exec::try_map(&samples(&grid), true, extract_sequence).unwrap();
    let take = extracted.len().min(16);
    let inputs = prepare_inputs(&extracted[..take], None, true).unwrap();
    let config = ModelConfig {
        d_latent: 32,
        n_heads: 4,
        ffn_width: 64,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = Model::new(config, 0).unwrap();
    let mut group = c.benchmark_group("forward_backward");
    group.sample_size(10);
    for (name, par) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| exec::try_map(&inputs, par, |i| model.loss_and_grads(i, None)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, generation, extraction, batch_gradient);
criterion_main!(benches);
