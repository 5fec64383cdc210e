use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dawn_bench::bench_scene;
use dawn_core::config::DatasetConfig;
use dawn_core::encoding::segmentation_targets;
use dawn_core::metrics::evaluate_image;
use dawn_core::predictor::{synthetic_predict, SyntheticPredictorConfig};
use dawn_core::raster::{distance_to_points, label_components};
use dawn_core::{cpl, extract_instances, PostprocParams};

const SIZES: [(u32, usize); 2] = [(256, 60), (512, 240)];

fn kernels(c: &mut Criterion) {
    let ds = DatasetConfig::preset("TNBC").unwrap();
    for (side, count) in SIZES {
        let scene = bench_scene(side, count, 1);
        let fg = scene.instances.foreground();
        let targets = segmentation_targets(&scene.instances);
        let prob = targets.foreground.map(|&f| if f { 1.0 } else { 0.0 });
        let cfg = SyntheticPredictorConfig {
            drop_fraction: 0.3,
            blur_radius: 1.0,
            noise_sigma: 0.05,
            seed: 2,
            ..Default::default()
        };
        let bundle = synthetic_predict(&scene.instances, &scene.points, &cfg, &ds.encoding).unwrap();
        let post = PostprocParams::default();

        c.bench_with_input(BenchmarkId::new("label_components", side), &fg, |b, m| {
            b.iter(|| label_components(black_box(m)))
        });
        c.bench_with_input(BenchmarkId::new("distance_to_points", side), &scene.points, |b, p| {
            b.iter(|| distance_to_points(black_box(p)).unwrap())
        });
        c.bench_function(&format!("segmentation_targets/{side}"), |b| {
            b.iter(|| segmentation_targets(black_box(&scene.instances)))
        });
        c.bench_function(&format!("extract_instances/{side}"), |b| {
            b.iter(|| extract_instances(black_box(&prob), &targets.hx, &targets.hy, &post).unwrap())
        });
        c.bench_function(&format!("cpl/{side}"), |b| {
            b.iter(|| cpl(black_box(&bundle.prob), &bundle.det, &scene.points, &ds.cpl).unwrap())
        });
        c.bench_function(&format!("evaluate_image/{side}"), |b| {
            b.iter(|| {
                evaluate_image(black_box(&scene.instances), &scene.instances, &scene.points, ds.match_radius).unwrap()
            })
        });
    }
}

criterion_group!(benches, kernels);
criterion_main!(benches);
