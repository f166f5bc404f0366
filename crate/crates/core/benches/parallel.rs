//! Sequential vs data-parallel throughput on the two hot paths: batched
//! convolution and phantom video rendering.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array4;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use dsa_ltd_core::exec::{self, ExecMode};
use dsa_ltd_core::nn::Tape;
use dsa_ltd_core::synthgen::{generate_scene, render_video, PhantomConfig};

fn modes() -> Vec<(&'static str, ExecMode)> {
    vec![
        ("sequential", ExecMode::Sequential),
        ("parallel", ExecMode::Parallel),
    ]
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Array4::from_shape_fn((8, 8, 64, 64), |_| rng.gen_range(-1.0..1.0));
    let w = Array4::from_shape_fn((16, 8, 3, 3), |_| rng.gen_range(-0.2..0.2));
    let b = Array4::zeros((1, 16, 1, 1));

    let mut group = c.benchmark_group("conv_batch8_64x64");
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |bench, &mode| {
            bench.iter(|| {
                let mut tape = Tape::new(mode);
                let xi = tape.leaf(x.clone());
                let wi = tape.leaf(w.clone());
                let bi = tape.leaf(b.clone());
                let out = tape.conv(xi, wi, bi, 3).unwrap();
                tape.value(out)[[0, 0, 0, 0]]
            })
        });
    }
    group.finish();
}

fn bench_render(c: &mut Criterion) {
    let cfg = PhantomConfig {
        height: 64,
        width: 64,
        frame_count: 20,
        washin_midpoint_range: (10, 14),
        ..PhantomConfig::default()
    };
    let scenes: Vec<_> = (0..4)
        .map(|i| generate_scene(&cfg, i).unwrap())
        .collect();

    let mut group = c.benchmark_group("render_4_videos_64x64");
    for (name, mode) in modes() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &mode, |bench, &mode| {
            bench.iter(|| {
                exec::map_indexed(mode, scenes.len(), |i| {
                    render_video(&scenes[i], &cfg).unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench_conv, bench_render);
criterion_main!(benches);
