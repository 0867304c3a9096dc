use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use kmn_core::icp::{icp, IcpConfig};
use kmn_core::kdtree::KdTree;
use kmn_core::pipeline::ViewConfig;
use kmn_core::regressor::{forward, loss_and_gradients, Example, NetworkSpec, NetworkWeights};
use kmn_core::render::{backproject, downsample, render_mesh, splat_metric};
use kmn_core::scene::{instantiate, prototype, sample_params};
use kmn_core::{Affine3, PointCloud, Task};
use nalgebra::Point3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn render(c: &mut Criterion) {
    for task in [Task::BoxA, Task::Door] {
        let def = task.definition();
        let cam = ViewConfig::for_task(&def).camera(&def).unwrap();
        let model = prototype(&def);
        c.bench_function(&format!("render_mesh/{task}"), |b| b.iter(|| render_mesh(black_box(&model), &cam)));
        let r = render_mesh(&model, &cam);
        c.bench_function(&format!("resplat/{task}"), |b| {
            b.iter(|| splat_metric(&backproject(black_box(&r.metric), &cam), &cam))
        });
    }
}

fn network(c: &mut Criterion) {
    let spec = NetworkSpec::new(64, 48, [2, 4, 6, 8, 10], 2).unwrap();
    let w = NetworkWeights::init(&spec, 1);
    let def = Task::BoxA.definition();
    let cam = ViewConfig::for_task(&def).camera(&def).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let examples: Vec<Example> = (0..64)
        .map(|_| {
            let p = sample_params(&def.schema, &mut rng);
            let d = render_mesh(&instantiate(&def, &p).unwrap(), &cam).depth;
            Example {
                input: downsample(&d, 4).unwrap(),
                target: p.theta,
            }
        })
        .collect();
    c.bench_function("forward/64x48", |b| b.iter(|| forward(black_box(&examples[0].input), &w)));
    let batch: Vec<&Example> = examples.iter().collect();
    c.bench_function("loss_and_gradients/64x48/batch64", |b| b.iter(|| loss_and_gradients(black_box(&batch), &w)));
}

fn nearest(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pts: Vec<Point3<f64>> = (0..20_000).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect();
    let queries: Vec<Point3<f64>> = (0..1000).map(|_| Point3::new(rng.random(), rng.random(), rng.random())).collect();
    c.bench_function("kdtree/build/20000", |b| {
        b.iter_batched(|| pts.clone(), KdTree::new, BatchSize::LargeInput)
    });
    let tree = KdTree::new(pts);
    c.bench_function("kdtree/nearest/1000_queries", |b| {
        b.iter(|| queries.iter().map(|q| tree.nearest(q).unwrap().1).sum::<f64>())
    });
}

fn alignment(c: &mut Criterion) {
    let def = Task::BoxB.definition();
    let target = PointCloud::from_points(prototype(&def).sample_surface(0.01));
    let source = Affine3::translation(0.02, -0.01, 0.0)
        .compose(&Affine3::rotation_z(0.1))
        .apply(&PointCloud::from_points(target.points.iter().step_by(4).copied().collect()));
    c.bench_function("icp/box_b", |b| b.iter(|| icp(black_box(&source), &target, &IcpConfig::default())));
}

criterion_group!(benches, render, network, nearest, alignment);
criterion_main!(benches);
