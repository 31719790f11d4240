//! Complete phantom subject on disk: the raw acquisitions a scanner export
//! would hold, organ masks, subject metadata and a `truth.json`.
//!
//! Layout under the subject directory:
//!
//! ```text
//! raw/meta.json
//! raw/dixon/series_N_{in,opp,fat,water}.nii
//! raw/pancreas_t1w/t1w.nii
//! raw/{liver_gre,liver_ideal,pancreas_gre}/{mag,phase}.nii + sidecar.json
//! raw/masks/{liver_3d,liver_gre,liver_ideal,pancreas_gre}.nii
//! truth.json
//! ```

use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::body::PANCREAS_SHAPE;
use super::multiecho::{GRE_ECHO_TIMES_MS, IDEAL_ECHO_TIMES_MS};
use super::{DixonPhantom, PhantomConfig, PhantomTruth, SIGNAL_SCALE};
use crate::assembly::{check_inventory, target_geometry, AssemblyConfig, DIXON_CHANNELS};
use crate::error::{Error, Result};
use crate::landmarks::{Sex, SubjectMeta};
use crate::quantify::{FatSpectrum, SignalModel, SignalParams, LARMOR_MHZ};
use crate::rng::SplitMix64;
use crate::volume::{write_nifti, Channel, Geometry, Mask, Sidecar, Volume, VoxelData};

/// Raw phase units per pi in the exported phase images.
pub const PHASE_SCALE: f64 = 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueValues {
    pub pdff_pct: f64,
    pub r2star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubjectPhantomConfig {
    pub subject_id: String,
    /// Body, field of view and Dixon defects. Sex and height also go to `meta.json`.
    pub body: PhantomConfig,
    pub dixon: bool,
    pub pancreas_t1w: bool,
    pub liver_gre: bool,
    pub liver_ideal: bool,
    pub pancreas_gre: bool,
    pub masks: bool,
    pub liver: TissueValues,
    pub pancreas: TissueValues,
    /// Everything in the body that is neither liver nor pancreas.
    pub background_tissue: TissueValues,
    /// Liver slice position: 0 at the liver top, 1 at its bottom.
    pub liver_slice_fraction: f64,
    pub multiecho_dims: [usize; 2],
    pub multiecho_snr: Option<f64>,
    pub field_hz: f64,
}

impl Default for SubjectPhantomConfig {
    fn default() -> Self {
        Self {
            subject_id: "sub-0001".into(),
            body: PhantomConfig::default(),
            dixon: true,
            pancreas_t1w: true,
            liver_gre: true,
            liver_ideal: true,
            pancreas_gre: true,
            masks: true,
            liver: TissueValues { pdff_pct: 8.0, r2star: 40.0 },
            pancreas: TissueValues { pdff_pct: 6.0, r2star: 35.0 },
            background_tissue: TissueValues { pdff_pct: 3.0, r2star: 30.0 },
            liver_slice_fraction: 0.5,
            multiecho_dims: [96, 96],
            multiecho_snr: Some(50.0),
            field_hz: 12.0,
        }
    }
}

impl SubjectPhantomConfig {
    /// Parses a TOML description; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.message().to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiEchoSliceTruth {
    pub slice_z_mm: f64,
    pub echo_times_ms: Vec<f64>,
    pub roi_voxels: usize,
    pub roi_pdff_pct: f64,
    pub roi_r2star: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectTruth {
    pub subject_id: String,
    pub meta: SubjectMeta,
    pub dixon: Option<PhantomTruth>,
    pub liver_gre: Option<MultiEchoSliceTruth>,
    pub liver_ideal: Option<MultiEchoSliceTruth>,
    pub pancreas_gre: Option<MultiEchoSliceTruth>,
    /// Expected liver slice position in percent of the liver extent.
    pub liver_percent_location: f64,
    pub pancreas_voxels: usize,
}

/// Writes a phantom subject under `dir` and returns its truth.
pub fn write_phantom_subject(dir: &Path, cfg: &SubjectPhantomConfig) -> Result<SubjectTruth> {
    if !(0.0..=1.0).contains(&cfg.liver_slice_fraction) {
        return Err(Error::InvalidConfig("liver_slice_fraction must lie in [0, 1]".into()));
    }
    let phantom = DixonPhantom::new(cfg.body.clone())?;
    let raw = dir.join("raw");
    mkdir(&raw)?;
    let meta = SubjectMeta { sex: cfg.body.sex, height_mm: cfg.body.height_mm };
    let meta_json = serde_json::json!({
        "subject_id": cfg.subject_id,
        "sex": match meta.sex { Sex::F => "F", Sex::M => "M" },
        "height_mm": meta.height_mm,
    });
    write_json(&raw.join("meta.json"), &meta_json)?;

    let mut truth = SubjectTruth {
        subject_id: cfg.subject_id.clone(),
        meta,
        dixon: None,
        liver_gre: None,
        liver_ideal: None,
        pancreas_gre: None,
        liver_percent_location: 100.0 * cfg.liver_slice_fraction,
        pancreas_voxels: 0,
    };

    if cfg.dixon {
        let d = raw.join("dixon");
        mkdir(&d)?;
        for s in 1..=6 {
            let series = phantom.series(s);
            for ch in &series.volume.channels {
                let data = VoxelData::Int16(ch.data.to_f32().iter().map(|&v| v.round().clamp(-32768.0, 32767.0) as i16).collect());
                let vol = Volume { geometry: series.volume.geometry.clone(), channels: vec![Channel::new(ch.name.clone(), data)] };
                write_nifti(&vol, &d.join(format!("{}_{}.nii", series.name, ch.name)))?;
            }
        }
        truth.dixon = Some(phantom.truth());
    }

    let model = phantom.model;
    let (liver_top, liver_bottom) = model.liver_z_range();
    let liver_z = liver_top + cfg.liver_slice_fraction * (liver_bottom - liver_top);
    let pancreas_z = model.world_z(PANCREAS_SHAPE.center[2]);
    let masks = raw.join("masks");
    if cfg.masks {
        mkdir(&masks)?;
        let headers: Vec<_> = (1..=6)
            .map(|s| crate::assembly::SeriesHeader {
                name: DixonPhantom::series_name(s),
                geometry: phantom.geometry(s).clone(),
                channels: DIXON_CHANNELS.iter().map(|c| c.to_string()).collect(),
            })
            .collect();
        let order = check_inventory(&headers)?;
        let target = target_geometry(&headers, &order, &AssemblyConfig::default())?;
        write_nifti(&phantom.liver_mask(&target).to_volume(), &masks.join("liver_3d.nii"))?;
    }

    let acquisitions = [
        ("liver_gre", cfg.liver_gre, liver_z, &GRE_ECHO_TIMES_MS[..], 1u64),
        ("liver_ideal", cfg.liver_ideal, liver_z, &IDEAL_ECHO_TIMES_MS[..], 2),
        ("pancreas_gre", cfg.pancreas_gre, pancreas_z, &GRE_ECHO_TIMES_MS[..], 3),
    ];
    for (name, present, z, tes, stream) in acquisitions {
        if !present {
            continue;
        }
        let slice = synth_slice(cfg, &model, z, tes, SplitMix64::derive(cfg.body.seed, 100 + stream))?;
        let acq_dir = raw.join(name);
        mkdir(&acq_dir)?;
        write_nifti(&slice.magnitude, &acq_dir.join("mag.nii"))?;
        write_nifti(&slice.phase, &acq_dir.join("phase.nii"))?;
        Sidecar {
            series: name.to_string(),
            echo_times_ms: tes.to_vec(),
            flip_angle_deg: 20.0,
            tr_ms: 27.0,
            orientation: Some("axial".into()),
        }
        .write(&acq_dir.join("sidecar.json"))?;
        let roi = if name == "pancreas_gre" { &slice.pancreas } else { &slice.liver };
        if cfg.masks {
            write_nifti(&roi.to_volume(), &masks.join(format!("{name}.nii")))?;
        }
        let values = if name == "pancreas_gre" { cfg.pancreas } else { cfg.liver };
        let t = MultiEchoSliceTruth {
            slice_z_mm: z,
            echo_times_ms: tes.to_vec(),
            roi_voxels: roi.count(),
            roi_pdff_pct: values.pdff_pct,
            roi_r2star: values.r2star,
        };
        match name {
            "liver_gre" => truth.liver_gre = Some(t),
            "liver_ideal" => truth.liver_ideal = Some(t),
            _ => {
                truth.pancreas_voxels = roi.count();
                truth.pancreas_gre = Some(t);
            }
        }
    }

    if cfg.pancreas_t1w {
        let d = raw.join("pancreas_t1w");
        mkdir(&d)?;
        write_nifti(&synth_t1w(&model, &mut SplitMix64::derive(cfg.body.seed, 200))?, &d.join("t1w.nii"))?;
    }

    write_json(&dir.join("truth.json"), &truth)?;
    Ok(truth)
}

struct SliceData {
    magnitude: Volume,
    phase: Volume,
    liver: Mask,
    pancreas: Mask,
}

/// Axial multiecho slice through the body at world z `z`.
fn synth_slice(cfg: &SubjectPhantomConfig, model: &super::BodyModel, z: f64, tes: &[f64], mut rng: SplitMix64) -> Result<SliceData> {
    let [nx, ny] = cfg.multiecho_dims;
    let sp = [2.5, 2.5, 6.0];
    let g = Geometry::axis_aligned([nx, ny, 1], sp, [-(nx as f64 - 1.0) / 2.0 * sp[0], -(ny as f64 - 1.0) / 2.0 * sp[1], z])?;
    let signal = SignalModel::new(&FatSpectrum::default(), tes, LARMOR_MHZ);
    let sigma = cfg.multiecho_snr.map_or(0.0, |s| SIGNAL_SCALE / s);
    let n = nx * ny;
    let mut mag = vec![vec![0f32; n]; tes.len()];
    let mut phase = vec![vec![0f32; n]; tes.len()];
    let mut liver = vec![false; n];
    let mut pancreas = vec![false; n];
    for idx in 0..n {
        let c = g.coords(idx);
        let p = g.voxel_to_world([c[0] as f64, c[1] as f64, 0.0]);
        liver[idx] = model.in_liver(p);
        pancreas[idx] = model.in_pancreas(p);
        let tissue = if liver[idx] {
            Some(cfg.liver)
        } else if pancreas[idx] {
            Some(cfg.pancreas)
        } else if model.in_body(p) {
            Some(cfg.background_tissue)
        } else {
            None
        };
        let s: Vec<Complex64> = match tissue {
            Some(t) => signal.evaluate(&SignalParams {
                water: SIGNAL_SCALE * (1.0 - t.pdff_pct / 100.0),
                fat: SIGNAL_SCALE * t.pdff_pct / 100.0,
                r2star: t.r2star,
                field_offset: cfg.field_hz + 8.0 * p[0] / 200.0,
                phase0: 0.2,
            }),
            None => vec![Complex64::new(0.0, 0.0); tes.len()],
        };
        for (e, v) in s.into_iter().enumerate() {
            let v = if sigma > 0.0 { v + Complex64::new(sigma * rng.normal(), sigma * rng.normal()) } else { v };
            mag[e][idx] = v.norm() as f32;
            phase[e][idx] = (v.arg() / std::f64::consts::PI * PHASE_SCALE) as f32;
        }
    }
    let channels = |data: Vec<Vec<f32>>| -> Vec<Channel> {
        data.into_iter().enumerate().map(|(e, d)| Channel::new(format!("echo{e}"), VoxelData::Float32(d))).collect()
    };
    Ok(SliceData {
        magnitude: Volume::new(g.clone(), channels(mag))?,
        phase: Volume::new(g.clone(), channels(phase))?,
        liver: Mask::new(g.clone(), liver),
        pancreas: Mask::new(g, pancreas),
    })
}

/// High-resolution T1-weighted block around the pancreas with a smooth receive gain.
fn synth_t1w(model: &super::BodyModel, rng: &mut SplitMix64) -> Result<Volume> {
    let dims = [96, 80, 40];
    let sp = [1.1875, 1.1875, 1.6];
    let centre = model.to_world(PANCREAS_SHAPE.center);
    let origin = [0, 1, 2].map(|a| centre[a] - (dims[a] as f64 - 1.0) / 2.0 * sp[a]);
    let g = Geometry::axis_aligned(dims, sp, origin)?;
    let data = (0..g.voxel_count())
        .map(|idx| {
            let c = g.coords(idx);
            let p = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            let t = model.tissue(p);
            let gain = 1.0 + 0.2 * (c[0] as f64 / dims[0] as f64 - 0.5);
            let v = (t.fat as f64 + 0.5 * t.water as f64) * gain + 10.0 * rng.normal();
            v.round().clamp(0.0, 32767.0) as i16
        })
        .collect();
    Volume::new(g, vec![Channel::new("t1w", VoxelData::Int16(data))])
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("truth serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
