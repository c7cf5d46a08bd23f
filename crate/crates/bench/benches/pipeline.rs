use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use metalwan::disentangle::{self, GlueConfig};
use metalwan::frames::FrameOptions;
use metalwan::geometry::{self, SurfaceMesh};
use metalwan::model::{self, grid_points};
use metalwan::wannier;
use metalwan::{KPoint, ModelSpec};

fn spectra(c: &mut Criterion) {
    let m = ModelSpec::by_name("weyl4").unwrap();
    let k = KPoint::new(0.13, 0.27, 0.41);
    c.bench_function("spectrum_at/weyl4", |b| b.iter(|| model::spectrum_at(&m, black_box(&k)).unwrap()));
}

fn chern(c: &mut Criterion) {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let mesh = SurfaceMesh::sphere([0.0, 0.0, 0.25], 0.1, 16, 32).unwrap();
    let field: Vec<_> = mesh.nodes.iter().map(|p| model::projector_at(&m, &KPoint::new(p[0], p[1], p[2]), 1).unwrap()).collect();
    c.bench_function("chern_number/sphere_16x32", |b| b.iter(|| geometry::chern_number(&mesh, black_box(&field)).unwrap()));
}

fn fourier(c: &mut Criterion) {
    let m = ModelSpec::by_name("insulator2").unwrap();
    let grid = [12, 12, 12];
    let values: Vec<_> = grid_points(grid).iter().map(|k| model::eval(&m, k).unwrap().matrix().clone()).collect();
    c.bench_function("fourier_coefficients/12^3", |b| b.iter(|| wannier::fourier_coefficients(grid, black_box(&values)).unwrap()));
}

fn frames(c: &mut Criterion) {
    let m = ModelSpec::by_name("insulator2").unwrap();
    let grid = [8, 8, 8];
    let p: Vec<_> = grid_points(grid).iter().map(|k| model::projector_at(&m, k, 1).unwrap().matrix).collect();
    let opts = FrameOptions::default();
    c.bench_function("global_frame_of/insulator2_8^3", |b| b.iter(|| wannier::global_frame_of(grid, black_box(&p), 1, None, &opts).unwrap()));
}

fn pipeline(c: &mut Criterion) {
    let m = ModelSpec::by_name("weyl2").unwrap();
    let glue = GlueConfig { grid: [6, 6, 6], ..GlueConfig::default() };
    let mut g = c.benchmark_group("disentangle");
    g.sample_size(10);
    g.bench_function("weyl2_6^3", |b| b.iter(|| disentangle::disentangle(&m, 0, &glue, [12, 12, 12]).unwrap()));
    g.finish();
}

criterion_group!(benches, spectra, chern, fourier, frames, pipeline);
criterion_main!(benches);
