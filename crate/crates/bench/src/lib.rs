//! Shared fixtures for the kernel benchmarks.

use dawn_core::synthgen::{generate_scene, Scene, SceneSpec};

/// A dense, non-overlapping disc scene of the given side length.
pub fn bench_scene(side: u32, count: usize, seed: u64) -> Scene {
    generate_scene(&SceneSpec {
        width: side,
        height: side,
        count,
        radius_min: 5.0,
        radius_max: 9.0,
        ellipticity_min: 0.7,
        ellipticity_max: 1.0,
        min_spacing: 1.0,
        allow_overlap: false,
        seed,
    })
    .expect("benchmark scene is feasible")
}
