use std::collections::HashMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use creasenet::datakit::{generate_synthetic, SynthSpec};
use creasenet::evaluation::{make_split, score_protocol, SplitConfig};
use creasenet::model::{Backbone, BackboneConfig};
use creasenet::par;
use creasenet::tensor::Volume;
use rand::Rng;

fn cubes(n: usize, dims: [usize; 4]) -> Vec<Volume> {
    let mut rng = rand::rng();
    (0..n)
        .map(|_| {
            let data = (0..dims.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect();
            Volume::from_vec(dims, data).unwrap()
        })
        .collect()
}

fn modes() -> [(&'static str, bool); 2] {
    [("parallel", true), ("sequential", false)]
}

fn backbone_batch(c: &mut Criterion) {
    let cfg = BackboneConfig::reduced([16, 32, 32, 3], 8, 3);
    let net = Backbone::new(cfg, 1).unwrap();
    let inputs = cubes(16, [16, 32, 32, 3]);
    let mut group = c.benchmark_group("backbone_forward_x16");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_enabled(on);
            b.iter(|| par::map(&inputs, |x| net.forward(x).unwrap().embedding));
        });
    }
    group.finish();
    par::set_enabled(true);
}

fn protocol_scoring(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        num_subjects: 60,
        samples_per_subject: 20,
        sessions: 2,
        image_height: 8,
        image_width: 8,
        ..Default::default()
    };
    let manifest = generate_synthetic(&spec, dir.path()).unwrap();
    let plan = make_split(&manifest, &SplitConfig::default()).unwrap();
    let mut rng = rand::rng();
    let embeddings: HashMap<String, Vec<f64>> = manifest
        .samples()
        .into_iter()
        .map(|s| (s.sample_id, (0..512).map(|_| rng.random::<f64>() - 0.5).collect()))
        .collect();
    let mut group = c.benchmark_group("score_protocol_60_subjects");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::set_enabled(on);
            b.iter(|| score_protocol(&embeddings, &plan).unwrap());
        });
    }
    group.finish();
    par::set_enabled(true);
}

criterion_group!(benches, backbone_batch, protocol_scoring);
criterion_main!(benches);
