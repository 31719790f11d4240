//! Whole-volume QC behaviour on phantom subjects: clean bodies raise no
//! anomaly flags and joint detection is left/right symmetric.

use abdopipe_core::anomaly::{analyze_anomalies, AnomalyConfig};
use abdopipe_core::assembly::{assemble, AssemblyConfig};
use abdopipe_core::landmarks::{detect_joints, Joint, LandmarkConfig, LandmarkStatus, Sex, SubjectMeta};
use abdopipe_core::phantom::atlas::make_atlas_bank_with;
use abdopipe_core::phantom::{DixonPhantom, PhantomConfig};
use abdopipe_core::rng::SplitMix64;
use abdopipe_core::volume::{Channel, Geometry, Mask, Volume, VoxelData};

/// Clean phantoms checked per run; `ABDOPIPE_CLEAN_PHANTOMS` raises it.
fn clean_phantom_count() -> u64 {
    std::env::var("ABDOPIPE_CLEAN_PHANTOMS").ok().and_then(|v| v.parse().ok()).unwrap_or(40)
}

#[test]
fn clean_phantoms_raise_no_anomaly_flags() {
    let cfg = AnomalyConfig::default();
    for i in 0..clean_phantom_count() {
        let mut rng = SplitMix64::derive(4242, i);
        let body = PhantomConfig {
            seed: 9000 + i,
            sex: if rng.uniform() < 0.5 { Sex::F } else { Sex::M },
            height_mm: rng.range(1550.0, 1950.0),
            lateral_scale: rng.range(0.9, 1.1),
            ..Default::default()
        };
        let phantom = DixonPhantom::new(body.clone()).unwrap();
        let assembled = assemble(&phantom.subject(), &AssemblyConfig::default()).unwrap();
        let report = analyze_anomalies(&assembled, &cfg).report;
        assert!(report.is_clean(), "phantom {i} ({body:?}) flagged {:?}", report.flags);
    }
}

fn mirror_x<T: Copy>(data: &[T], dims: [usize; 3]) -> Vec<T> {
    let mut out = data.to_vec();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            let row = dims[0] * (j + dims[1] * k);
            for i in 0..dims[0] {
                out[row + i] = data[row + dims[0] - 1 - i];
            }
        }
    }
    out
}

fn voxel_distance(g: &Geometry, a: [f64; 3], b: [f64; 3]) -> f64 {
    let s = g.spacing();
    (0..3).map(|i| ((a[i] - b[i]) / s[i]).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn mirrored_subject_mirrors_joint_predictions() {
    let phantom = DixonPhantom::new(PhantomConfig { seed: 21, ..Default::default() }).unwrap();
    let assembled = assemble(&phantom.subject(), &AssemblyConfig::default()).unwrap();
    let body = analyze_anomalies(&assembled, &AnomalyConfig::default()).body.unwrap().mask;
    let g = assembled.volume.geometry.clone();
    let dims = g.dims();
    let water = assembled.volume.channel("water").unwrap().data.to_f32();
    let meta = SubjectMeta { sex: Sex::F, height_mm: PhantomConfig::default().height_mm };
    let bank = make_atlas_bank_with(&Default::default()).unwrap();
    let cfg = LandmarkConfig::default();

    let as_volume = |data: Vec<f32>| Volume::new(g.clone(), vec![Channel::new("water", VoxelData::Float32(data))]).unwrap();
    let original = detect_joints(&as_volume(water.clone()), &body, &meta, &bank, &cfg).unwrap();
    let flipped_body = Mask::new(g.clone(), mirror_x(&body.data, dims));
    let mirrored = detect_joints(&as_volume(mirror_x(&water, dims)), &flipped_body, &meta, &bank, &cfg).unwrap();

    let centre_x = g.voxel_to_world([(dims[0] as f64 - 1.0) / 2.0, 0.0, 0.0])[0];
    for joint in Joint::ALL {
        let a = original.get(joint).unwrap();
        let b = mirrored.get(joint.mirror()).unwrap();
        assert_eq!(a.status, LandmarkStatus::Present, "{joint:?}");
        assert_eq!(b.status, LandmarkStatus::Present, "{joint:?}");
        let reflected = [2.0 * centre_x - b.position_mm[0], b.position_mm[1], b.position_mm[2]];
        let d = voxel_distance(&g, a.position_mm, reflected);
        assert!(d <= 2.0, "{joint:?}: mirrored prediction {d:.2} voxels away");
    }
}
