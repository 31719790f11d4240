use std::hint::black_box;

use abdopipe_core::anomaly::{body_mask_from, AnomalyConfig};
use abdopipe_core::imgproc::close;
use abdopipe_core::phantom::multiecho::{make_multiecho_phantom, MultiEchoConfig, GRE_ECHO_TIMES_MS};
use abdopipe_core::quantify::{fit_map, fit_voxel, forward_signal, QuantConfig, SignalParams};
use abdopipe_core::volume::{read_nifti_bytes, resample, write_nifti_bytes, Geometry, Interpolation, Volume};
use criterion::{criterion_group, criterion_main, Criterion};

fn blob(dims: [usize; 3]) -> (Geometry, Vec<f32>) {
    let g = Geometry::axis_aligned(dims, [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
    let c = dims.map(|d| d as f64 / 2.0);
    let data = (0..g.voxel_count())
        .map(|i| {
            let [x, y, z] = g.coords(i);
            let r = ((x as f64 - c[0]) / c[0]).powi(2) + ((y as f64 - c[1]) / c[1]).powi(2) + ((z as f64 - c[2]) / c[2]).powi(2);
            if r < 0.7 { 300.0 } else { 4.0 }
        })
        .collect();
    (g, data)
}

fn quantify(c: &mut Criterion) {
    let cfg = QuantConfig::default();
    let model = cfg.model(&GRE_ECHO_TIMES_MS);
    let p = SignalParams { water: 800.0, fat: 200.0, r2star: 60.0, field_offset: 15.0, phase0: 0.4 };
    let signal = forward_signal(&p, &cfg.spectrum, &GRE_ECHO_TIMES_MS);
    c.bench_function("fit_voxel_gre", |b| b.iter(|| fit_voxel(black_box(&signal), &model, None, &cfg).unwrap()));

    let me = MultiEchoConfig { dims: [48, 32], tile_pdffs: vec![5.0, 30.0], tile_r2stars: vec![40.0], ..Default::default() };
    let (series, _) = make_multiecho_phantom(&me).unwrap();
    let mut group = c.benchmark_group("fit_map_48x32");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| fit_map(&series, None, &cfg, false).unwrap()));
    group.bench_function("parallel", |b| b.iter(|| fit_map(&series, None, &cfg, true).unwrap()));
    group.finish();
}

fn volumes(c: &mut Criterion) {
    let (g, data) = blob([96, 80, 60]);
    let vol = Volume::from_f32(g.clone(), data.clone());
    c.bench_function("nifti_round_trip_96x80x60", |b| {
        b.iter(|| read_nifti_bytes(&write_nifti_bytes(black_box(&vol)).unwrap()).unwrap())
    });
    let target = Geometry::axis_aligned([64, 64, 40], [2.9, 2.4, 4.1], [3.0, 2.0, 1.0]).unwrap();
    c.bench_function("resample_trilinear", |b| b.iter(|| resample(&vol, &target, Interpolation::Trilinear).unwrap()));

    let cfg = AnomalyConfig::default();
    let mut group = c.benchmark_group("masks");
    group.sample_size(10);
    group.bench_function("body_mask_96x80x60", |b| b.iter(|| body_mask_from(black_box(&data), &g, &cfg).unwrap()));
    let mask: Vec<bool> = data.iter().map(|&v| v > 100.0).collect();
    group.bench_function("closing_r2", |b| b.iter(|| close(black_box(&mask), [96, 80, 60], 2)));
    group.finish();
}

criterion_group!(benches, quantify, volumes);
criterion_main!(benches);
