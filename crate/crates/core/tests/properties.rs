//! Property tests for invariants that hold across inputs.

use abdopipe_core::anomaly::{analyze_slice, body_mask_from, AnomalyConfig};
use abdopipe_core::assembly::{assemble, AssemblyConfig, DixonSeries, DixonSubject, DIXON_CHANNELS};
use abdopipe_core::imgproc::{dilate, Plane};
use abdopipe_core::landmarks::{refine_landmark, LandmarkConfig};
use abdopipe_core::phantom::multiecho::{make_multiecho_phantom, MultiEchoConfig, GRE_ECHO_TIMES_MS};
use abdopipe_core::placement::{liver_percent_location, locate_slice, pancreas_census};
use abdopipe_core::quantify::{fit_map, fit_voxel, forward_signal, harmonize_fit, QuantConfig, SignalParams};
use abdopipe_core::swap::{classify_swap, swap_region, Region, SwapConfig, SwapLabel};
use abdopipe_core::volume::{
    read_nifti_bytes, resample, write_nifti_bytes, Channel, Geometry, Interpolation, Mask, Volume, VoxelData,
};
use num_complex::Complex64;
use proptest::prelude::*;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

fn stack(name: &str, z0: f64, values: [f32; 4]) -> DixonSeries {
    let g = Geometry::axis_aligned([6, 5, 10], [2.0, 2.0, 3.0], [0.0, 0.0, z0]).unwrap();
    let n = g.voxel_count();
    let channels = DIXON_CHANNELS.iter().zip(values).map(|(c, v)| Channel::new(*c, VoxelData::Float32(vec![v; n]))).collect();
    DixonSeries::new(name, Volume::new(g, channels).unwrap())
}

fn rect_plane(w: usize, h: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> Plane<bool> {
    let mut p = Plane::filled(w, h, false);
    for y in y0..y1 {
        for x in x0..x1 {
            p.set(x, y, true);
        }
    }
    p
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn nifti_round_trip_is_exact(
        nx in 1usize..6, ny in 1usize..6, nz in 1usize..4,
        sp in prop::array::uniform3(1u8..16),
        origin in prop::array::uniform3(-200i32..200),
        ints in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let g = Geometry::axis_aligned([nx, ny, nz], sp.map(|s| s as f64 * 0.25), origin.map(|o| o as f64)).unwrap();
        let n = g.voxel_count();
        let mut state = seed;
        let mut next = move || { state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); (state >> 33) as u32 };
        let data = if ints {
            VoxelData::Int16((0..n).map(|_| next() as i16).collect())
        } else {
            VoxelData::Float32((0..n).map(|_| f32::from_bits(next() & 0x3fff_ffff)).collect())
        };
        let vol = Volume::new(g, vec![Channel::new("data", data)]).unwrap();
        let back = read_nifti_bytes(&write_nifti_bytes(&vol).unwrap()).unwrap();
        prop_assert_eq!(&back, &vol);
    }

    #[test]
    fn resampling_a_constant_gives_the_constant(
        value in -1000.0f32..1000.0,
        shift in prop::array::uniform3(-3.0f64..3.0),
        sp in prop::array::uniform3(0.5f64..4.0),
    ) {
        let src = Volume::from_f32(Geometry::axis_aligned([12, 12, 12], [2.0; 3], [0.0; 3]).unwrap(), vec![value; 1728]);
        let target = Geometry::axis_aligned([4, 4, 4], sp, [6.0 + shift[0], 6.0 + shift[1], 6.0 + shift[2]]).unwrap();
        for method in [Interpolation::Nearest, Interpolation::Trilinear] {
            let out = resample(&src, &target, method).unwrap().to_f32();
            for v in out {
                prop_assert!((v - value).abs() <= 1e-4 * value.abs().max(1.0), "{v} vs {value}");
            }
        }
    }

    #[test]
    fn harmonization_recovers_exact_lines(a in -5.0f64..5.0, b in 0.2f64..2.0, n in 5usize..60) {
        let pairs: Vec<(f64, f64)> = (0..n).map(|i| { let x = 1.0 + i as f64 * 0.7; (x, a + b * x) }).collect();
        let h = harmonize_fit(&pairs).unwrap();
        prop_assert!((h.linear.coefficients[0] - a).abs() < 1e-8);
        prop_assert!((h.linear.coefficients[1] - b).abs() < 1e-8);
        prop_assert!(h.quadratic.coefficients[2].abs() < 1e-8);
    }

    #[test]
    fn pancreas_census_grows_under_dilation(bits in prop::collection::vec(any::<bool>(), 64), radius in 1usize..3) {
        let dilated = dilate(&bits, [8, 8, 1], radius);
        let a = pancreas_census(&bits, 0.01).voxel_count.unwrap();
        let b = pancreas_census(&dilated, 0.01).voxel_count.unwrap();
        prop_assert!(b >= a);
    }

    #[test]
    fn swap_region_is_an_involution(
        values in prop::collection::vec(0.0f32..1000.0, 4 * 6 * 5 * 10),
        region in prop::sample::select(vec![Region::Whole, Region::LeftHalf, Region::RightHalf]),
    ) {
        let g = Geometry::axis_aligned([6, 5, 10], [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
        let channels = DIXON_CHANNELS
            .iter()
            .zip(values.chunks(300))
            .map(|(c, v)| Channel::new(*c, VoxelData::Float32(v.to_vec())))
            .collect();
        let original = DixonSeries::new("s", Volume::new(g, channels).unwrap());
        let mut s = original.clone();
        swap_region(&mut s, region).unwrap();
        if region == Region::Whole {
            prop_assert_eq!(s.channel_f32("fat").unwrap(), original.channel_f32("water").unwrap());
        }
        swap_region(&mut s, region).unwrap();
        prop_assert_eq!(s, original);
    }

    #[test]
    fn swap_classifier_is_equivariant(
        fat in prop::collection::vec(0.0f32..500.0, 40 * 16),
        water in prop::collection::vec(0.0f32..500.0, 40 * 16),
        region in prop::sample::select(vec![Region::Whole, Region::LeftHalf, Region::RightHalf]),
    ) {
        let cfg = SwapConfig::default();
        let f = Plane::from_vec(40, 16, fat);
        let w = Plane::from_vec(40, 16, water);
        let a = classify_swap(&f, &w, 5, region, &cfg);
        let b = classify_swap(&w, &f, 5, region, &cfg);
        prop_assert!((a.score + b.score - 1.0).abs() < 1e-9);
        if (a.score - 0.5).abs() > 1e-9 {
            prop_assert_ne!(a.label, b.label);
        }
        prop_assert_eq!(a.label == SwapLabel::Swapped, a.score <= 0.5);
    }

    #[test]
    fn contour_run_grows_with_notch_width(w1 in 2usize..30, extra in 0usize..20, depth in 4usize..12) {
        let cfg = AnomalyConfig::default();
        let run = |w: usize| {
            let mut p = rect_plane(80, 60, 10, 70, 0, 60);
            for y in 25..25 + depth {
                for x in 10..10 + w {
                    p.set(x, y, false);
                }
            }
            analyze_slice(p, &cfg).max_run().0
        };
        let (a, b) = (run(w1), run(w1 + extra));
        prop_assert!(a <= b, "width {w1}: {a}, width {}: {b}", w1 + extra);
        prop_assert!(a.abs_diff(w1) <= 1, "width {w1} measured {a}");
    }
}

proptest! {
    #![proptest_config(cases(24))]

    #[test]
    fn fit_ignores_global_phase_and_scale(
        pdff in 0.0f64..60.0,
        r2 in 10.0f64..150.0,
        field in -60.0f64..60.0,
        phase in -3.0f64..3.0,
        scale in 0.05f64..20.0,
        rot in -3.0f64..3.0,
    ) {
        let cfg = QuantConfig::default();
        let model = cfg.model(&GRE_ECHO_TIMES_MS);
        let p = SignalParams { water: 1000.0 * (1.0 - pdff / 100.0), fat: 1000.0 * pdff / 100.0, r2star: r2, field_offset: field, phase0: phase };
        let s = forward_signal(&p, &cfg.spectrum, &GRE_ECHO_TIMES_MS);
        let base = fit_voxel(&s, &model, None, &cfg).unwrap();
        let turned: Vec<Complex64> = s.iter().map(|z| z * Complex64::from_polar(scale, rot)).collect();
        let other = fit_voxel(&turned, &model, None, &cfg).unwrap();
        prop_assert!((base.pdff - other.pdff).abs() < 1e-3, "PDFF {} vs {}", base.pdff, other.pdff);
        prop_assert!((base.r2star - other.r2star).abs() < 1e-2, "R2* {} vs {}", base.r2star, other.r2star);
        prop_assert!((base.water_amp * scale - other.water_amp).abs() < 1e-3 * scale * 1000.0);
    }

    #[test]
    fn liver_location_is_invariant_to_z_translation(
        top in 5usize..20, len in 1usize..20, k in 0.0f64..40.0, dz in -500.0f64..500.0,
    ) {
        let g = Geometry::axis_aligned([4, 4, 40], [2.0, 2.0, 3.0], [0.0, 0.0, -60.0]).unwrap();
        let mut data = vec![false; g.voxel_count()];
        for s in top..(top + len).min(40) {
            data[g.index(1, 2, s)] = true;
        }
        let slice = Geometry::axis_aligned([4, 4, 1], [2.0, 2.0, 8.0], [0.0, 0.0, -60.0 + 3.0 * k]).unwrap();
        let a = liver_percent_location(locate_slice(&slice, &g).unwrap(), &Mask::new(g.clone(), data.clone())).unwrap();
        let moved = g.translated([0.0, 0.0, dz]);
        let b = liver_percent_location(locate_slice(&slice.translated([0.0, 0.0, dz]), &moved).unwrap(), &Mask::new(moved, data)).unwrap();
        prop_assert!((a.percent_location.unwrap() - b.percent_location.unwrap()).abs() < 1e-6);
        prop_assert_eq!(a.flag, b.flag);
    }

    #[test]
    fn assembly_is_order_free_and_blends_at_most_two_series(
        values in prop::collection::vec(prop::array::uniform4(1.0f32..500.0), 6),
        order in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let series: Vec<DixonSeries> = values.iter().enumerate().map(|(s, v)| stack(&format!("s{}", s + 1), -(s as f64) * 18.0, *v)).collect();
        let subject = DixonSubject { series: series.clone() };
        let shuffled = DixonSubject { series: order.iter().map(|&i| series[i].clone()).collect() };
        let cfg = AssemblyConfig { dims: [6, 5, 40], spacing: [2.0, 2.0, 3.0], rebias: false, ..Default::default() };
        let a = assemble(&subject, &cfg).unwrap();
        prop_assert_eq!(&a, &assemble(&shuffled, &cfg).unwrap());
        for p in &a.provenance {
            prop_assert!(!p.sources.is_empty() && p.sources.len() <= 2, "slice {} has {} sources", p.k, p.sources.len());
            let total: f64 = p.sources.iter().map(|s| s.weight).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(cases(6))]

    #[test]
    fn parallel_fit_matches_sequential(seed in any::<u64>(), snr in 20.0f64..200.0) {
        let cfg = MultiEchoConfig {
            seed,
            snr: Some(snr),
            dims: [24, 16],
            tile_pdffs: vec![5.0, 30.0],
            tile_r2stars: vec![40.0, 120.0],
            ..Default::default()
        };
        let (series, _) = make_multiecho_phantom(&cfg).unwrap();
        let quant = QuantConfig::default();
        let a = fit_map(&series, None, &quant, true).unwrap();
        let b = fit_map(&series, None, &quant, false).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn refinement_stays_within_the_crop(
        blob in prop::array::uniform3(4usize..76),
        coarse in prop::array::uniform3(20.0f64..60.0),
    ) {
        let g = Geometry::axis_aligned([80, 80, 80], [2.0; 3], [0.0; 3]).unwrap();
        let data: Vec<f32> = (0..g.voxel_count())
            .map(|i| {
                let c = g.coords(i);
                let r2: usize = (0..3).map(|a| c[a].abs_diff(blob[a]).pow(2)).sum();
                if r2 <= 9 { 1000.0 } else { 10.0 + (i % 7) as f32 }
            })
            .collect();
        let cfg = LandmarkConfig::default();
        let coarse_mm = coarse.map(|v| 2.0 * v);
        let p = refine_landmark(&Volume::from_f32(g, data), coarse_mm, &cfg).unwrap();
        let moved = (0..3).map(|a| ((p[a] - coarse_mm[a]) / 2.0).powi(2)).sum::<f64>().sqrt();
        prop_assert!(moved <= cfg.max_move_voxels + 1e-9, "moved {moved:.2} voxels");
    }

    #[test]
    fn body_mask_is_deterministic(seed in any::<u64>()) {
        let g = Geometry::axis_aligned([20, 16, 12], [2.0; 3], [0.0; 3]).unwrap();
        let mut state = seed | 1;
        let data: Vec<f32> = (0..g.voxel_count())
            .map(|i| {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                let [x, y, _] = g.coords(i);
                let inside = (4..16).contains(&x) && (3..13).contains(&y);
                (if inside { 200.0 } else { 5.0 }) + (state % 50) as f32
            })
            .collect();
        let cfg = AnomalyConfig::default();
        let a = body_mask_from(&data, &g, &cfg).unwrap();
        let b = body_mask_from(&data, &g, &cfg).unwrap();
        prop_assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn noiseless_fits_close_over_the_parameter_grid() {
    let cfg = QuantConfig::default();
    let model = cfg.model(&GRE_ECHO_TIMES_MS);
    for pdff in (0..=10).map(|i| 10.0 * i as f64) {
        for r2 in (0..=5).map(|i| 30.0 * i as f64) {
            let p = SignalParams { water: 1000.0 - 10.0 * pdff, fat: 10.0 * pdff, r2star: r2, field_offset: 20.0, phase0: 0.3 };
            let fit = fit_voxel(&forward_signal(&p, &cfg.spectrum, &GRE_ECHO_TIMES_MS), &model, None, &cfg).unwrap();
            // Relative error, with the scale floored at 1 so zero truths are checked absolutely.
            assert!((fit.pdff - pdff).abs() <= 2e-3 * pdff.max(1.0), "PDFF {pdff}, R2* {r2}: {}", fit.pdff);
            assert!((fit.r2star - r2).abs() <= 2e-3 * r2.max(1.0), "PDFF {pdff}, R2* {r2}: {}", fit.r2star);
        }
    }
}
