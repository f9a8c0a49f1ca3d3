use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;

use necklab::catalog::{make_example, ExampleKind, ExampleSpec};
use necklab::cylgrid::CylinderGrid;
use necklab::geometry::{el_residual, fundamental_forms, gauss_map, ImmersionField};
use necklab::harmonic::empirical_l0_search;
use necklab::residues::residue_sweep;

fn sphere(nt: usize, nth: usize) -> ImmersionField {
    let grid = CylinderGrid::new(-4.0, 4.0, nt, nth).unwrap();
    make_example(&ExampleSpec::new(ExampleKind::Sphere), &grid).unwrap()
}

fn bench_geometry(c: &mut Criterion) {
    let single = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut group = c.benchmark_group("geometry");
    group.sample_size(10);
    for nt in [256, 1024] {
        let imm = sphere(nt, 128);
        let work = || {
            let forms = fundamental_forms(&imm).unwrap();
            let g = gauss_map(&imm, &forms).unwrap();
            let r = el_residual(&imm, &forms, 1e-6).unwrap();
            black_box((g.max_unit_defect(), r.max()))
        };
        group.bench_with_input(BenchmarkId::new("parallel", nt), &nt, |b, _| b.iter(work));
        group.bench_with_input(BenchmarkId::new("sequential", nt), &nt, |b, _| {
            b.iter(|| single.install(work))
        });
    }
    group.finish();
}

fn bench_residues(c: &mut Criterion) {
    let single = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let imm = sphere(801, 64);
    let forms = fundamental_forms(&imm).unwrap();
    let stations = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let work = || black_box(residue_sweep(&imm, &forms, &stations, 1e-6).unwrap().max_abs());
    let mut group = c.benchmark_group("residue_sweep");
    group.bench_function("parallel", |b| b.iter(work));
    group.bench_function("sequential", |b| b.iter(|| single.install(work)));
    group.finish();
}

fn bench_l0_search(c: &mut Criterion) {
    let single = ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let work = || black_box(empirical_l0_search(1, 1.0, 200, 4, 1).unwrap().l0);
    let mut group = c.benchmark_group("l0_search");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(work));
    group.bench_function("sequential", |b| b.iter(|| single.install(work)));
    group.finish();
}

criterion_group!(benches, bench_geometry, bench_residues, bench_l0_search);
criterion_main!(benches);
