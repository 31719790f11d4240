//! Acceptance gate: runs every acceptance criterion, prints one pass/fail line
//! per criterion and fails if any of them failed.

use std::collections::BTreeMap;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use abdopipe_core::anomaly::{analyze_anomalies, AnomalyConfig, AnomalyFlag};
use abdopipe_core::assembly::{assemble, check_inventory, target_geometry, AssemblyConfig, SeriesHeader, DIXON_CHANNELS};
use abdopipe_core::landmarks::{detect_joints, propagate_and_vote, Joint, LandmarkConfig, LandmarkStatus, Sex, SubjectMeta};
use abdopipe_core::phantom::atlas::{make_atlas_bank_with, AtlasBankConfig};
use abdopipe_core::phantom::body::Shape;
use abdopipe_core::phantom::multiecho::{make_multiecho_phantom, MultiEchoConfig, GRE_ECHO_TIMES_MS, IDEAL_ECHO_TIMES_MS};
use abdopipe_core::phantom::subject::{write_phantom_subject, SubjectPhantomConfig};
use abdopipe_core::phantom::{inject_notch, Defect, DixonPhantom, NotchAxis, PhantomConfig};
use abdopipe_core::pipeline::cohort::SUMMARY_JSON;
use abdopipe_core::pipeline::{Pipeline, PipelineConfig};
use abdopipe_core::placement::{liver_percent_location, locate_slice, pancreas_census, voxel_volume_ml, PlacementFlag};
use abdopipe_core::quantify::{fit_map, harmonize_fit, iron_concentration, QuantConfig};
use abdopipe_core::rng::SplitMix64;
use abdopipe_core::swap::{detect_swaps, regions_for, swap_region, Region, SwapConfig, SwapLabel};
use abdopipe_core::volume::{read_nifti_bytes, write_nifti_bytes, Channel, Geometry, Volume, VoxelData};
use abdopipe_core::Error;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn iron_exactness() -> Outcome {
    let a = iron_concentration(0.0).map_err(|e| e.to_string())?;
    let b = iron_concentration(100.0).map_err(|e| e.to_string())?;
    ensure((a - 0.202).abs() <= 1e-12, format!("iron(0) = {a}"))?;
    ensure((b - 2.742).abs() <= 1e-12, format!("iron(100) = {b}"))?;
    Ok(format!("iron(0) = {a}, iron(100) = {b}"))
}

/// Skewed draw of GRE PDFF values resembling a liver population.
fn gre_pdffs(rng: &mut SplitMix64, n: usize) -> Vec<f64> {
    (0..n).map(|_| (1.2 + 0.8 * rng.normal()).exp().clamp(0.5, 45.0)).collect()
}

fn harmonization_recovery() -> Outcome {
    let t = Instant::now();
    let mut rng = SplitMix64::new(1463);
    let x = gre_pdffs(&mut rng, 1463);
    let linear: Vec<(f64, f64)> = x.iter().map(|&g| (g, 1.0 + 0.7678 * g + 0.2 * rng.normal())).collect();
    let quad: Vec<(f64, f64)> = x.iter().map(|&g| (g, 1.1 + 0.7326 * g + 0.0012 * g * g + 0.2 * rng.normal())).collect();
    let h = harmonize_fit(&linear).map_err(|e| e.to_string())?;
    let hq = harmonize_fit(&quad).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let c = &h.linear.coefficients;
    ensure((c[0] - 1.0).abs() <= 0.05, format!("intercept {}", c[0]))?;
    ensure((c[1] - 0.7678).abs() <= 0.01, format!("slope {}", c[1]))?;
    let crossing = h.linear.identity_crossing().ok_or("no identity crossing")?;
    ensure((crossing - 4.3).abs() <= 0.1, format!("crossing {crossing}"))?;
    ensure(!h.quadratic_significant(0.001), format!("quadratic significant on linear data, p = {}", h.p_value))?;
    ensure(hq.quadratic_significant(0.001), format!("quadratic not significant on quadratic data, p = {}", hq.p_value))?;
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!(
        "intercept {:.3}, slope {:.4}, crossing {crossing:.2}%, p linear {:.3}, p quadratic {:.1e}, {elapsed:.1?}",
        c[0], c[1], h.p_value, hq.p_value
    ))
}

struct TileErrors {
    worst_pdff: f64,
    worst_r2: f64,
}

/// Per-voxel worst errors (noiseless) or per-tile worst median errors (noisy).
fn tile_errors(cfg: &MultiEchoConfig, per_voxel: bool) -> Result<(TileErrors, Duration), String> {
    let (series, truth) = make_multiecho_phantom(cfg).map_err(|e| e.to_string())?;
    let t = Instant::now();
    let maps = fit_map(&series, None, &QuantConfig::default(), true).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();
    let g = &series.volume.geometry;
    let pdff = maps.pdff.to_f32();
    let r2 = maps.r2star.to_f32();
    let mut out = TileErrors { worst_pdff: 0.0, worst_r2: 0.0 };
    for (i, tile) in truth.tiles.iter().enumerate() {
        let m = truth.tile_mask(g, i, 0);
        let idx: Vec<usize> = (0..m.data.len()).filter(|&v| m.data[v]).collect();
        let mut dp: Vec<f64> = idx.iter().map(|&v| pdff[v] as f64 - tile.pdff).collect();
        let mut dr: Vec<f64> = idx.iter().map(|&v| r2[v] as f64 - tile.r2star).collect();
        let (ep, er) = if per_voxel {
            (dp.iter().fold(0.0f64, |a, d| a.max(d.abs())), dr.iter().fold(0.0f64, |a, d| a.max(d.abs())))
        } else {
            (median(&mut dp).abs(), median(&mut dr).abs())
        };
        out.worst_pdff = out.worst_pdff.max(ep);
        out.worst_r2 = out.worst_r2.max(er);
    }
    Ok((out, elapsed))
}

fn quant_closure() -> Outcome {
    let mut notes = Vec::new();
    for (name, tes) in [("GRE", &GRE_ECHO_TIMES_MS[..]), ("IDEAL", &IDEAL_ECHO_TIMES_MS[..])] {
        let clean = MultiEchoConfig { echo_times_ms: tes.to_vec(), snr: None, ..Default::default() };
        let (e, elapsed) = tile_errors(&clean, true)?;
        ensure(e.worst_pdff <= 0.2, format!("{name} noiseless PDFF error {:.3} pp", e.worst_pdff))?;
        ensure(e.worst_r2 <= 0.5, format!("{name} noiseless R2* error {:.3} 1/s", e.worst_r2))?;
        ensure(elapsed < Duration::from_secs(60), format!("{name} 160x160 fit took {elapsed:?}"))?;
        notes.push(format!("{name} noiseless {:.2e} pp / {:.2e} 1/s in {elapsed:.1?}", e.worst_pdff, e.worst_r2));

        let noisy = MultiEchoConfig { echo_times_ms: tes.to_vec(), snr: Some(50.0), dims: [336, 192], seed: 50, ..Default::default() };
        let (e, _) = tile_errors(&noisy, false)?;
        ensure(e.worst_pdff < 1.0, format!("{name} SNR 50 median PDFF error {:.3} pp", e.worst_pdff))?;
        ensure(e.worst_r2 < 3.0, format!("{name} SNR 50 median R2* error {:.3} 1/s", e.worst_r2))?;
        notes.push(format!("SNR 50 {:.2} pp / {:.2} 1/s", e.worst_pdff, e.worst_r2));
    }
    Ok(notes.join("; "))
}

fn assembly_seamlessness() -> Outcome {
    let cfg = PhantomConfig { seed: 4, shape: Shape::Cylinder { radius_mm: 150.0 }, ..Default::default() };
    let phantom = DixonPhantom::new(cfg).map_err(|e| e.to_string())?;
    let assembled = assemble(&phantom.subject(), &AssemblyConfig::default()).map_err(|e| e.to_string())?;
    let dims = assembled.dims();
    ensure(dims == [224, 174, 370], format!("dims {dims:?}"))?;
    let truth = phantom.body_mask(&assembled.volume.geometry);
    let inphase = assembled.channel("in");
    let plane = dims[0] * dims[1];
    let means: Vec<f64> = (0..dims[2])
        .map(|k| {
            let (mut s, mut n) = (0.0, 0usize);
            for v in k * plane..(k + 1) * plane {
                if truth.data[v] {
                    s += inphase[v] as f64;
                    n += 1;
                }
            }
            s / n.max(1) as f64
        })
        .collect();
    let jump = means.windows(2).map(|w| (w[1] - w[0]).abs() / w[0]).fold(0.0f64, f64::max);
    ensure(jump < 0.02, format!("adjacent-slice body-mean jump {:.2}%", 100.0 * jump))?;
    let report = analyze_anomalies(&assembled, &AnomalyConfig::default()).report;
    ensure(report.flags.is_empty(), format!("anomaly flags {:?}", report.flags))?;
    Ok(format!("dims {dims:?}, max jump {:.3}%, no anomaly flags", 100.0 * jump))
}

fn swap_suite() -> Outcome {
    let t = Instant::now();
    let cfg = SwapConfig::default();
    let (mut injected, mut detected, mut false_pos, mut checks, mut corrected) = (0, 0, 0, 0, 0);
    for subject in 0..200u64 {
        let mut rng = SplitMix64::derive(2024, subject);
        let mut defects = Vec::new();
        for series in 1..=6 {
            for &region in regions_for(series) {
                if rng.uniform() < 0.2 {
                    defects.push(Defect::Swap { series, region });
                }
            }
        }
        let base = PhantomConfig {
            seed: 10_000 + subject,
            sex: if rng.uniform() < 0.5 { Sex::F } else { Sex::M },
            height_mm: rng.range(1550.0, 1950.0),
            lateral_scale: rng.range(0.9, 1.1),
            ..Default::default()
        };
        let truth: Vec<(usize, Region)> = defects
            .iter()
            .map(|d| match d {
                Defect::Swap { series, region } => (*series, *region),
                _ => unreachable!(),
            })
            .collect();
        let phantom = DixonPhantom::new(PhantomConfig { defects, ..base.clone() }).map_err(|e| e.to_string())?;
        let clean = DixonPhantom::new(base).map_err(|e| e.to_string())?;
        let subject_data = phantom.subject();
        let report = detect_swaps(&subject_data, &cfg).map_err(|e| e.to_string())?;
        checks += report.checks.len();
        injected += truth.len();
        for c in &report.checks {
            let is_true = truth.contains(&(c.series, c.region));
            let flagged = c.label == SwapLabel::Swapped;
            match (is_true, flagged) {
                (true, true) => detected += 1,
                (false, true) => false_pos += 1,
                _ => {}
            }
            if flagged {
                let original = &subject_data.series[c.series - 1];
                ensure(original.name == DixonPhantom::series_name(c.series), "series order")?;
                let mut once = original.clone();
                swap_region(&mut once, c.region).map_err(|e| e.to_string())?;
                let mut twice = once.clone();
                swap_region(&mut twice, c.region).map_err(|e| e.to_string())?;
                ensure(&twice == original, format!("correction of series {} {:?} is not an involution", c.series, c.region))?;
                let others_swapped = truth.iter().any(|&(s, r)| s == c.series && r != c.region);
                if is_true && !others_swapped {
                    ensure(once == clean.series(c.series), format!("correction of series {} does not restore the data", c.series))?;
                    corrected += 1;
                }
            }
        }
    }
    ensure(checks == 1600, format!("{checks} checks"))?;
    ensure(detected == injected, format!("sensitivity {detected}/{injected}"))?;
    ensure(false_pos <= 1, format!("{false_pos} false positives"))?;
    Ok(format!(
        "{checks} checks, {injected} injected, {detected} detected, {false_pos} false positive(s), {corrected} corrections restore the data, {:.0?}",
        t.elapsed()
    ))
}

/// Horizontal extent left of a `cut`-pixel notch after a radius-`r` disk
/// closing, by brute force on an idealized flank.
fn closed_notch_run(cut: usize, r: i64) -> usize {
    let (w, h) = (cut as i64 + 20, 30i64);
    let edge = w - 8;
    let (z0, z1) = (10i64, 20i64);
    let body = |x: i64, z: i64| x < edge && !(x >= edge - cut as i64 && (z0..z1).contains(&z));
    let disk: Vec<(i64, i64)> = (-r..=r).flat_map(|dx| (-r..=r).map(move |dz| (dx, dz))).filter(|(dx, dz)| dx * dx + dz * dz <= r * r).collect();
    let inside = |x: i64, z: i64| x >= 0 && z >= 0 && x < w && z < h;
    let dilated = |x: i64, z: i64| disk.iter().any(|&(dx, dz)| inside(x + dx, z + dz) && body(x + dx, z + dz));
    let closed = |x: i64, z: i64| disk.iter().all(|&(dx, dz)| !inside(x + dx, z + dz) || dilated(x + dx, z + dz));
    (0..w).filter(|&x| body(x, z0 - 1) && !closed(x, z0)).count()
}

fn anomaly_thresholds() -> Outcome {
    let cfg = AnomalyConfig::default();
    let radius = cfg.closing_radius as i64;
    let cut_for = |n: usize| (n..n + 8).find(|&c| closed_notch_run(c, radius) == n).expect("some cut leaves an n-voxel step");
    let phantom = DixonPhantom::new(PhantomConfig { seed: 6, ..Default::default() }).map_err(|e| e.to_string())?;
    let base = assemble(&phantom.subject(), &AssemblyConfig::default()).map_err(|e| e.to_string())?;
    let clean = analyze_anomalies(&base, &cfg).report;
    ensure(clean.flags.is_empty(), format!("clean phantom flagged {:?}", clean.flags))?;
    let ks = 150..160;
    let mut notes = Vec::new();
    let scenarios: [(usize, bool, bool); 6] =
        [(9, true, false), (10, true, false), (11, true, true), (12, true, true), (25, false, false), (26, false, true)];
    for (n, dual, expect) in scenarios {
        let cut = cut_for(n);
        let mut a = base.clone();
        inject_notch(&mut a, NotchAxis::Lateral, cut, ks.clone());
        if dual {
            inject_notch(&mut a, NotchAxis::Anterior, cut, ks.clone());
        }
        let report = analyze_anomalies(&a, &cfg).report;
        let ev = &report.evidence;
        ensure(ev.coronal_max_run == n, format!("{n}-voxel defect measured {} coronally", ev.coronal_max_run))?;
        if dual {
            ensure(ev.sagittal_max_run == n, format!("{n}-voxel defect measured {} sagittally", ev.sagittal_max_run))?;
        }
        let flagged = report.flags.contains(&AnomalyFlag::Other);
        let kind = if dual { "dual" } else { "single" };
        ensure(flagged == expect, format!("{n}-voxel {kind}-slice defect flagged = {flagged}"))?;
        notes.push(format!("{n}{}{}", &kind[..1], if flagged { "+" } else { "-" }));
    }
    Ok(format!("cut = N + {} by the closing oracle; {}", cut_for(12) - 12, notes.join(" ")))
}

fn joint_errors(phantom: &PhantomConfig, bank: &[abdopipe_core::landmarks::Atlas]) -> Result<Vec<(Joint, LandmarkStatus, bool, f64)>, String> {
    let p = DixonPhantom::new(phantom.clone()).map_err(|e| e.to_string())?;
    let truth = p.truth();
    let assembled = assemble(&p.subject(), &AssemblyConfig::default()).map_err(|e| e.to_string())?;
    let body = analyze_anomalies(&assembled, &AnomalyConfig::default()).body.ok_or("empty body")?;
    let water = Volume {
        geometry: assembled.volume.geometry.clone(),
        channels: vec![assembled.volume.channel("water").ok_or("water")?.clone()],
    };
    let meta = SubjectMeta { sex: phantom.sex, height_mm: phantom.height_mm };
    let report = detect_joints(&water, &body.mask, &meta, bank, &LandmarkConfig::default()).map_err(|e| e.to_string())?;
    Ok(truth
        .landmarks
        .iter()
        .map(|t| {
            let l = report.get(t.joint).expect("every joint reported");
            let err = (0..3).map(|a| (l.position_mm[a] - t.position_mm[a]).powi(2)).sum::<f64>().sqrt();
            (t.joint, l.status, t.in_fov, err)
        })
        .collect())
}

fn landmark_suite() -> Outcome {
    let t = Instant::now();
    let bank_cfg = AtlasBankConfig::default();
    ensure(bank_cfg.jitter_mm == 3.0, "atlas jitter is not 3 mm")?;
    let bank = make_atlas_bank_with(&bank_cfg).map_err(|e| e.to_string())?;
    let voxel = AssemblyConfig::default().spacing;
    let voxel_mm = voxel.iter().sum::<f64>() / 3.0;
    let mut errors: BTreeMap<Joint, Vec<f64>> = BTreeMap::new();
    for i in 0..30u64 {
        let mut rng = SplitMix64::derive(77, i);
        let cfg = PhantomConfig {
            seed: 500 + i,
            sex: if i % 2 == 0 { Sex::F } else { Sex::M },
            height_mm: rng.range(1580.0, 1880.0),
            lateral_scale: rng.range(0.9, 1.1),
            ..Default::default()
        };
        for (joint, status, in_fov, err) in joint_errors(&cfg, &bank)? {
            ensure(in_fov, format!("phantom {i}: {joint:?} outside the field of view"))?;
            ensure(status == LandmarkStatus::Present, format!("phantom {i}: {joint:?} missing"))?;
            errors.entry(joint).or_default().push(err);
        }
    }
    let mut worst = 0.0f64;
    for (joint, e) in &errors {
        let mean = e.iter().sum::<f64>() / e.len() as f64;
        ensure(mean <= 2.0 * voxel_mm, format!("{joint:?} mean error {mean:.1} mm"))?;
        worst = worst.max(mean);
    }

    let g = Geometry::axis_aligned([10, 10, 10], [1.0; 3], [0.0; 3]).map_err(|e| e.to_string())?;
    for (inside, expect) in [(17, LandmarkStatus::Missing), (18, LandmarkStatus::Present)] {
        let mapped: Vec<BTreeMap<Joint, [f64; 3]>> = (0..35)
            .map(|a| Joint::ALL.iter().map(|&j| (j, [5.0, 5.0, if a < inside { 5.0 } else { 50.0 }])).collect())
            .collect();
        let votes = propagate_and_vote(&g, &mapped).map_err(|e| e.to_string())?;
        let threshold = LandmarkConfig::default().support_threshold;
        ensure(votes.iter().all(|v| v.status(threshold) == expect), format!("{inside}/35 votes not {expect:?}"))?;
    }

    let tall = PhantomConfig { seed: 13, height_mm: 1990.0, ..Default::default() };
    for (joint, status, in_fov, _) in joint_errors(&tall, &bank)? {
        let knee = matches!(joint, Joint::KneeLeft | Joint::KneeRight);
        ensure(in_fov != knee, format!("{joint:?} field-of-view truth unexpected"))?;
        let expect = if knee { LandmarkStatus::Missing } else { LandmarkStatus::Present };
        ensure(status == expect, format!("knee-out phantom: {joint:?} {status:?}"))?;
    }
    Ok(format!(
        "worst mean error {worst:.1} mm (limit {:.1} mm), 17/35 missing and 18/35 present, knee-out phantom misses knees only, {:.0?}",
        2.0 * voxel_mm,
        t.elapsed()
    ))
}

fn placement_checks() -> Outcome {
    let phantom = DixonPhantom::new(PhantomConfig::default()).map_err(|e| e.to_string())?;
    let headers: Vec<SeriesHeader> = (1..=6)
        .map(|s| SeriesHeader {
            name: DixonPhantom::series_name(s),
            geometry: phantom.geometry(s).clone(),
            channels: DIXON_CHANNELS.iter().map(|c| c.to_string()).collect(),
        })
        .collect();
    let order = check_inventory(&headers).map_err(|e| e.to_string())?;
    let target = target_geometry(&headers, &order, &AssemblyConfig::default()).map_err(|e| e.to_string())?;
    let liver = phantom.liver_mask(&target);
    let (top, bottom) = phantom.truth().liver_z_range_mm;
    let slice_at = |z: f64| Geometry::axis_aligned([96, 96, 1], [2.5, 2.5, 6.0], [-118.75, -118.75, z]);
    let mid = slice_at(0.5 * (top + bottom)).map_err(|e| e.to_string())?;
    let k = locate_slice(&mid, &target).map_err(|e| e.to_string())?;
    let score = liver_percent_location(k, &liver).map_err(|e| e.to_string())?;
    let pct = score.percent_location.unwrap_or(f64::NAN);
    ensure((pct - 50.0).abs() <= 1.0, format!("mid-liver slice at {pct:.2}%"))?;
    ensure(score.flag == PlacementFlag::Ok, format!("mid-liver flag {:?}", score.flag))?;
    let above = slice_at(top + 20.0).map_err(|e| e.to_string())?;
    let score = liver_percent_location(locate_slice(&above, &target).map_err(|e| e.to_string())?, &liver).map_err(|e| e.to_string())?;
    ensure(score.flag == PlacementFlag::Unreliable, format!("slice above the liver flagged {:?}", score.flag))?;

    let g = Geometry::axis_aligned([96, 96, 1], [2.5, 2.5, 6.0], [0.0; 3]).map_err(|e| e.to_string())?;
    let mask: Vec<bool> = (0..g.voxel_count()).map(|v| v < 274).collect();
    let p = pancreas_census(&mask, voxel_volume_ml(&g));
    let area = p.area_ml.unwrap_or(f64::NAN);
    ensure(p.voxel_count == Some(274), "pancreas voxel count")?;
    ensure((area - 10.3).abs() <= 0.05, format!("pancreas area {area} ml"))?;
    Ok(format!("mid-liver {pct:.2}%, above-liver unreliable, 274 voxels = {area:.3} ml"))
}

fn random_volume(rng: &mut SplitMix64) -> Volume {
    let dims = [1 + (rng.uniform() * 12.0) as usize, 1 + (rng.uniform() * 12.0) as usize, 1 + (rng.uniform() * 6.0) as usize];
    let f = |x: f64| x as f32 as f64;
    let mut affine = nalgebra::Matrix4::identity();
    for r in 0..3 {
        for c in 0..4 {
            affine[(r, c)] = f(if r == c { rng.range(0.5, 4.0) } else if c == 3 { rng.range(-300.0, 300.0) } else { rng.range(-0.3, 0.3) });
        }
    }
    let geometry = Geometry::new(dims, affine).expect("diagonally dominant affine");
    let n = geometry.voxel_count();
    let channels = (0..1 + (rng.uniform() * 3.0) as usize)
        .map(|c| {
            let finite = |rng: &mut SplitMix64| loop {
                let v = f32::from_bits((rng.uniform() * u32::MAX as f64) as u32);
                if v.is_finite() {
                    return v;
                }
            };
            let data = match (rng.uniform() * 3.0) as usize {
                0 => VoxelData::Int16((0..n).map(|_| (rng.uniform() * 65535.0 - 32768.0) as i16).collect()),
                1 => VoxelData::Float32((0..n).map(|_| finite(rng)).collect()),
                _ => VoxelData::Complex64((0..n).map(|_| num_complex::Complex32::new(finite(rng), finite(rng))).collect()),
            };
            Channel::new(format!("c{c}"), data)
        })
        .collect::<Vec<_>>();
    // Channels of one volume share a kind.
    let kind = std::mem::discriminant(&channels[0].data);
    let channels = channels.into_iter().filter(|c| std::mem::discriminant(&c.data) == kind).collect();
    Volume::new(geometry, channels).expect("consistent channels")
}

fn malformed_corpus() -> Vec<(&'static str, Vec<u8>)> {
    let g = Geometry::axis_aligned([4, 3, 2], [1.0, 1.0, 2.0], [0.0; 3]).unwrap();
    let good = write_nifti_bytes(&Volume::from_f32(g, vec![1.0; 24])).unwrap();
    let patch = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = good.clone();
        f(&mut b);
        b
    };
    vec![
        ("short file", good[..200].to_vec()),
        ("sizeof_hdr", patch(&|b| b[0..4].copy_from_slice(&540i32.to_le_bytes()))),
        ("magic", patch(&|b| b[344..348].copy_from_slice(b"abc\0"))),
        ("dim[0] = 0", patch(&|b| b[40..42].copy_from_slice(&0i16.to_le_bytes()))),
        ("dim[2] = 0", patch(&|b| b[44..46].copy_from_slice(&0i16.to_le_bytes()))),
        ("datatype", patch(&|b| b[70..72].copy_from_slice(&128i16.to_le_bytes()))),
        ("bitpix", patch(&|b| b[72..74].copy_from_slice(&8i16.to_le_bytes()))),
        ("vox_offset", patch(&|b| b[108..112].copy_from_slice(&100f32.to_le_bytes()))),
        ("truncated payload", good[..good.len() - 5].to_vec()),
        ("singular sform", patch(&|b| b[280..328].fill(0))),
    ]
}

fn nifti_round_trip() -> Outcome {
    let t = Instant::now();
    let mut rng = SplitMix64::new(99);
    for i in 0..100 {
        let vol = random_volume(&mut rng);
        let bytes = write_nifti_bytes(&vol).map_err(|e| e.to_string())?;
        let back = read_nifti_bytes(&bytes).map_err(|e| e.to_string())?;
        ensure(back.geometry == vol.geometry, format!("volume {i}: geometry differs"))?;
        ensure(back.channels.len() == vol.channels.len(), format!("volume {i}: channel count"))?;
        for (a, b) in back.channels.iter().zip(&vol.channels) {
            let bits = |d: &VoxelData| -> Vec<u32> {
                match d {
                    VoxelData::Int16(v) => v.iter().map(|&x| x as u16 as u32).collect(),
                    VoxelData::Float32(v) => v.iter().map(|x| x.to_bits()).collect(),
                    VoxelData::Complex64(v) => v.iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]).collect(),
                }
            };
            ensure(std::mem::discriminant(&a.data) == std::mem::discriminant(&b.data), format!("volume {i}: kind changed"))?;
            ensure(bits(&a.data) == bits(&b.data), format!("volume {i}: payload differs"))?;
        }
    }
    let corpus = malformed_corpus();
    for (name, bytes) in &corpus {
        match read_nifti_bytes(bytes) {
            Err(Error::MalformedHeader(_) | Error::UnsupportedDatatype(_) | Error::TruncatedData { .. }) => {}
            Err(e) => return Err(format!("{name}: untyped rejection {e}")),
            Ok(_) => return Err(format!("{name}: accepted")),
        }
    }
    let elapsed = t.elapsed();
    ensure(elapsed < Duration::from_secs(5), format!("took {elapsed:?}"))?;
    Ok(format!("100 volumes bit-exact, {} malformed headers rejected, {elapsed:.1?}", corpus.len()))
}

fn summary_without_timestamp(root: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(root.join(SUMMARY_JSON)).map_err(|e| e.to_string())?;
    let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v.as_object_mut().ok_or("summary is not an object")?.remove("generated_at");
    Ok(v)
}

fn cohort_determinism() -> Outcome {
    let t = Instant::now();
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (id, seed, sex) in [("sub-a", 31, Sex::F), ("sub-b", 32, Sex::M)] {
        let cfg = SubjectPhantomConfig {
            subject_id: id.into(),
            body: PhantomConfig { seed, sex, ..Default::default() },
            ..Default::default()
        };
        write_phantom_subject(&root.path().join(id), &cfg).map_err(|e| e.to_string())?;
    }
    let config = PipelineConfig::default();
    let bank = config.atlas_bank.load().map_err(|e| e.to_string())?;
    let pipeline = Pipeline::with_bank(config, bank);
    let first = pipeline.run_cohort(root.path(), 1).map_err(|e| e.to_string())?;
    let sequential = summary_without_timestamp(root.path())?;
    let csv1 = std::fs::read(root.path().join("cohort_subjects.csv")).map_err(|e| e.to_string())?;
    pipeline.run_cohort(root.path(), 8).map_err(|e| e.to_string())?;
    let parallel = summary_without_timestamp(root.path())?;
    let csv8 = std::fs::read(root.path().join("cohort_subjects.csv")).map_err(|e| e.to_string())?;
    ensure(sequential == parallel, "parallelism 1 and 8 summaries differ")?;
    ensure(csv1 == csv8, "parallelism 1 and 8 subject tables differ")?;
    ensure(first.records.iter().all(|r| !r.any_failed()), "clean cohort has failures")?;

    let mag = root.path().join("sub-b/raw/liver_gre/mag.nii");
    let bytes = std::fs::read(&mag).map_err(|e| e.to_string())?;
    std::fs::write(&mag, &bytes[..bytes.len() / 2]).map_err(|e| e.to_string())?;
    let corrupted = pipeline.run_cohort(root.path(), 8).map_err(|e| e.to_string())?;
    ensure(corrupted.records[0] == first.records[0], "corrupting sub-b changed sub-a's record")?;
    ensure(corrupted.records[1] != first.records[1], "corruption left sub-b's record unchanged")?;
    ensure(corrupted.records[1].any_failed(), "corrupt sub-b has no failed stage")?;
    Ok(format!("parallelism 1 vs 8 identical, corruption confined to one subject, {:.0?}", t.elapsed()))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 iron conversion exactness", iron_exactness),
        ("2 harmonization recovery", harmonization_recovery),
        ("3 PDFF/R2* oracle closure", quant_closure),
        ("4 assembly seamlessness", assembly_seamlessness),
        ("5 swap suite", swap_suite),
        ("6 anomaly thresholds", anomaly_thresholds),
        ("7 landmarks", landmark_suite),
        ("8 placement", placement_checks),
        ("9 NIfTI round trip", nifti_round_trip),
        ("10 pipeline determinism", cohort_determinism),
    ];
    let only = std::env::var("ACCEPTANCE_ONLY").ok();
    let mut failed = Vec::new();
    for (name, check) in criteria {
        if only.as_deref().is_some_and(|o| !o.split(',').any(|n| name.split(' ').next() == Some(n.trim()))) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let line = match &outcome {
            Ok(detail) => format!("criterion {name}: PASS ({detail})"),
            Err(why) => format!("criterion {name}: FAIL ({why})"),
        };
        // Written past the test harness capture so the lines always show.
        let _ = writeln!(std::io::stderr(), "{line}");
        if outcome.is_err() {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
