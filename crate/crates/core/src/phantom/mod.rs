//! Deterministic synthetic subjects with ground truth.
//!
//! The Dixon phantom reproduces the six-series neck-to-knee layout (slice
//! counts, thicknesses and in-plane matrices of the scanner protocol) around
//! an analytic body. Defects are injected per configuration and recorded in
//! the truth.

pub mod atlas;
pub mod body;
pub mod multiecho;
pub mod subject;

use serde::{Deserialize, Serialize};

use crate::assembly::{AssembledVolume, DixonSeries, DixonSubject};
use crate::error::{Error, Result};
use crate::landmarks::{Joint, Sex};
use crate::rng::SplitMix64;
use crate::swap::{regions_for, swap_region, Region};
use crate::volume::{Channel, Geometry, Mask, Volume, VoxelData};

pub use body::{BodyModel, Shape, Tissue};

pub const PIXEL_MM: f64 = 2.232;
pub const SERIES_COLUMNS: usize = 224;
/// (rows, slices, slice thickness mm) per series, superior first.
pub const SERIES_LAYOUT: [(usize, usize, f64); 6] =
    [(168, 64, 3.0), (174, 44, 4.5), (174, 44, 4.5), (174, 44, 4.5), (162, 72, 3.5), (156, 64, 4.0)];
/// Overlap that makes the six series span exactly 370 slices of 3 mm.
pub const DEFAULT_OVERLAP_MM: f64 = 32.6;
/// Nominal signal scale: SNR is relative to this amplitude.
pub const SIGNAL_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotchAxis {
    /// Cut into the subject's left flank; visible in coronal slices.
    Lateral,
    /// Cut into the anterior wall; visible in sagittal slices.
    Anterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSite {
    Chest,
    Abdomen,
    Knee,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Defect {
    /// Fat and water exchanged in a region of a series (1-based).
    Swap { series: usize, region: Region },
    /// All channels zeroed in a box of `size_vox` target voxels.
    Dropout { center_mm: [f64; 3], size_vox: [usize; 3] },
    /// Tissue removed from the skin inward by `width_vox` target voxels over a
    /// slab of `height_mm` centred at body depth `depth_mm`.
    Notch { axis: NotchAxis, width_vox: usize, depth_mm: f64, height_mm: f64 },
    /// Subject displaced laterally during one series.
    SeriesShift { series: usize, dx_mm: f64 },
    /// Smooth receive gain in [1 - amplitude, 1 + amplitude] on one series.
    BiasGain { series: usize, amplitude: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomConfig {
    pub seed: u64,
    pub shape: Shape,
    pub sex: Sex,
    pub height_mm: f64,
    /// Lateral build relative to the reference body.
    pub lateral_scale: f64,
    /// Positive values move the field of view inferiorly relative to the body.
    pub fov_offset_mm: f64,
    pub overlaps_mm: Vec<f64>,
    /// Signal-to-noise ratio relative to [`SIGNAL_SCALE`]; `None` is noiseless.
    pub snr: Option<f64>,
    pub defects: Vec<Defect>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            shape: Shape::Anatomical,
            sex: Sex::F,
            height_mm: body::REFERENCE_HEIGHT_MM,
            lateral_scale: 1.0,
            fov_offset_mm: 0.0,
            overlaps_mm: vec![DEFAULT_OVERLAP_MM; 5],
            snr: Some(50.0),
            defects: Vec::new(),
        }
    }
}

impl PhantomConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Default::default() }
    }

    pub fn body_model(&self) -> BodyModel {
        let scale = self.height_mm / body::REFERENCE_HEIGHT_MM;
        BodyModel {
            shape: self.shape,
            z_vertex: body::NOMINAL_FOV_TOP_DEPTH * scale + self.fov_offset_mm,
            scale,
            lateral_scale: self.lateral_scale,
            x_center: 0.0,
            y_center: 0.0,
        }
    }

    /// World centre of a dropout at an anatomical site.
    pub fn dropout_center(&self, site: DropoutSite) -> [f64; 3] {
        let b = match site {
            DropoutSite::Chest => [0.0, 0.0, 430.0],
            DropoutSite::Abdomen => [0.0, 0.0, 700.0],
            DropoutSite::Knee => [body::leg_center_x(1180.0), 0.0, 1180.0],
        };
        self.body_model().to_world(b)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.overlaps_mm.len() != 5 || self.overlaps_mm.iter().any(|&o| !(o > 0.0)) {
            return bad("phantom needs five positive overlaps".into());
        }
        if !(self.height_mm > 0.0) || !(self.lateral_scale > 0.0) {
            return bad("height and lateral scale must be positive".into());
        }
        if self.snr.is_some_and(|s| !(s > 0.0)) {
            return bad("snr must be positive".into());
        }
        for d in &self.defects {
            match d {
                Defect::Swap { series, region } => {
                    if !(1..=6).contains(series) || !regions_for(*series).contains(region) {
                        return bad(format!("invalid swap injection {series}/{region:?}"));
                    }
                }
                Defect::BiasGain { amplitude, .. } if !(0.0..1.0).contains(amplitude) => {
                    return bad("bias amplitude must be in [0, 1)".into());
                }
                Defect::SeriesShift { series, .. } | Defect::BiasGain { series, .. } => {
                    if !(1..=6).contains(series) {
                        return bad(format!("series {series} out of range"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesTruth {
    pub name: String,
    pub z_top_mm: f64,
    pub z_bottom_mm: f64,
    pub slices: usize,
    pub thickness_mm: f64,
    pub rows: usize,
    /// Coronal row through the body axis.
    pub body_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkTruth {
    pub joint: Joint,
    pub position_mm: [f64; 3],
    pub in_fov: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub config: PhantomConfig,
    pub series: Vec<SeriesTruth>,
    pub overlaps_mm: Vec<f64>,
    pub landmarks: Vec<LandmarkTruth>,
    /// World z of the top and bottom of the liver.
    pub liver_z_range_mm: (f64, f64),
    pub defects: Vec<Defect>,
}

impl PhantomTruth {
    pub fn swaps(&self) -> impl Iterator<Item = (usize, Region)> + '_ {
        self.defects.iter().filter_map(|d| match d {
            Defect::Swap { series, region } => Some((*series, *region)),
            _ => None,
        })
    }
}

/// Lazily generated Dixon phantom: series are synthesized on request from
/// per-series random streams, so any subset can be produced independently.
#[derive(Debug, Clone)]
pub struct DixonPhantom {
    pub config: PhantomConfig,
    pub model: BodyModel,
    geometries: Vec<Geometry>,
    tops: Vec<f64>,
}

/// Target-grid voxel size used to express defect sizes.
const TARGET_VOXEL: [f64; 3] = [PIXEL_MM, PIXEL_MM, 3.0];

impl DixonPhantom {
    pub fn new(config: PhantomConfig) -> Result<Self> {
        config.validate()?;
        let model = config.body_model();
        let x0 = -(SERIES_COLUMNS as f64 - 1.0) / 2.0 * PIXEL_MM;
        let mut geometries = Vec::new();
        let mut tops = Vec::new();
        let mut top = 0.0;
        for (s, &(rows, slices, dz)) in SERIES_LAYOUT.iter().enumerate() {
            let y0 = -(87.0 - (174 - rows) as f64 / 2.0) * PIXEL_MM;
            let bottom = top - (slices - 1) as f64 * dz;
            let g = Geometry::axis_aligned([SERIES_COLUMNS, rows, slices], [PIXEL_MM, PIXEL_MM, dz], [x0, y0, bottom])?;
            geometries.push(g);
            tops.push(top);
            if s < 5 {
                top = bottom + config.overlaps_mm[s];
            }
        }
        Ok(Self { config, model, geometries, tops })
    }

    pub fn geometry(&self, series: usize) -> &Geometry {
        &self.geometries[series - 1]
    }

    pub fn series_name(series: usize) -> String {
        format!("series_{series}")
    }

    fn model_for(&self, series: usize) -> BodyModel {
        let mut m = self.model;
        for d in &self.config.defects {
            if let Defect::SeriesShift { series: s, dx_mm } = d {
                if *s == series {
                    m.x_center += dx_mm;
                }
            }
        }
        m
    }

    fn removed(&self, m: &BodyModel, p: [f64; 3]) -> bool {
        self.config.defects.iter().any(|d| match d {
            Defect::Dropout { center_mm, size_vox } => {
                (0..3).all(|a| (p[a] - center_mm[a]).abs() <= 0.5 * size_vox[a] as f64 * TARGET_VOXEL[a])
            }
            Defect::Notch { axis, width_vox, depth_mm, height_mm } => {
                if (p[2] - m.world_z(*depth_mm)).abs() > 0.5 * height_mm {
                    return false;
                }
                let b = m.to_body(p);
                let w = *width_vox as f64 * PIXEL_MM;
                let wx = w / m.lateral_scale;
                match axis {
                    NotchAxis::Lateral => m.lateral_surface(b[1], b[2]).is_some_and(|s| b[0] > s - wx),
                    NotchAxis::Anterior => m.anterior_surface(b[0], b[2]).is_some_and(|s| b[1] < s + w),
                }
            }
            _ => false,
        })
    }

    fn gain(&self, series: usize, dims: [usize; 3], i: usize, k: usize) -> f32 {
        let mut g = 1.0;
        for d in &self.config.defects {
            if let Defect::BiasGain { series: s, amplitude } = d {
                if *s == series {
                    let u = i as f64 / (dims[0] - 1) as f64 * 2.0 - 1.0;
                    let w = k as f64 / (dims[2] - 1) as f64 * 2.0 - 1.0;
                    g *= 1.0 + amplitude * (0.7 * (std::f64::consts::FRAC_PI_2 * u).sin() + 0.3 * w);
                }
            }
        }
        g as f32
    }

    /// Synthesizes series `series` (1-based) with all defects applied.
    pub fn series(&self, series: usize) -> DixonSeries {
        let g = self.geometry(series).clone();
        let dims = g.dims();
        let m = self.model_for(series);
        let sigma = self.config.snr.map_or(0.0, |s| (SIGNAL_SCALE / s) as f32);
        let mut rng = SplitMix64::derive(self.config.seed, series as u64);
        let n = g.voxel_count();
        let mut water = Vec::with_capacity(n);
        let mut fat = Vec::with_capacity(n);
        let mut opp = Vec::with_capacity(n);
        let mut inp = Vec::with_capacity(n);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let p = g.voxel_to_world([i as f64, j as f64, k as f64]);
                    let t = if !m.may_contain(p) || self.removed(&m, p) { body::BACKGROUND } else { m.tissue(p) };
                    let mut noise = || if sigma > 0.0 { sigma * rng.normal() as f32 } else { 0.0 };
                    let w = (t.water + noise()).abs();
                    let f = (t.fat + noise()).abs();
                    let o = (w - f).abs() + noise();
                    let gain = self.gain(series, dims, i, k);
                    water.push(w * gain);
                    fat.push(f * gain);
                    opp.push(o * gain);
                    inp.push((w + f) * gain);
                }
            }
        }
        let channels = vec![
            Channel::new("in", VoxelData::Float32(inp)),
            Channel::new("opp", VoxelData::Float32(opp)),
            Channel::new("fat", VoxelData::Float32(fat)),
            Channel::new("water", VoxelData::Float32(water)),
        ];
        let mut out = DixonSeries::new(Self::series_name(series), Volume { geometry: g, channels });
        for d in &self.config.defects {
            if let Defect::Swap { series: s, region } = d {
                if *s == series {
                    swap_region(&mut out, *region).expect("phantom series has fat and water");
                }
            }
        }
        out
    }

    pub fn subject(&self) -> DixonSubject {
        DixonSubject { series: (1..=6).map(|s| self.series(s)).collect() }
    }

    /// True body mask on an arbitrary grid, before defects.
    pub fn body_mask(&self, g: &Geometry) -> Mask {
        let data = (0..g.voxel_count())
            .map(|idx| {
                let c = g.coords(idx);
                self.model.in_body(g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]))
            })
            .collect();
        Mask::new(g.clone(), data)
    }

    pub fn liver_mask(&self, g: &Geometry) -> Mask {
        let data = (0..g.voxel_count())
            .map(|idx| {
                let c = g.coords(idx);
                self.model.in_liver(g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]))
            })
            .collect();
        Mask::new(g.clone(), data)
    }

    /// World z of the top voxel centre of the assembled field of view and of its bottom.
    pub fn fov_z_range(&self) -> (f64, f64) {
        let last = self.geometry(6);
        (self.tops[0], last.voxel_to_world([0.0; 3])[2])
    }

    pub fn truth(&self) -> PhantomTruth {
        let (top, bottom) = self.fov_z_range();
        let series = (1..=6)
            .map(|s| {
                let (rows, slices, dz) = SERIES_LAYOUT[s - 1];
                SeriesTruth {
                    name: Self::series_name(s),
                    z_top_mm: self.tops[s - 1],
                    z_bottom_mm: self.tops[s - 1] - (slices - 1) as f64 * dz,
                    slices,
                    thickness_mm: dz,
                    rows,
                    body_row: 87 - (174 - rows) / 2,
                }
            })
            .collect();
        let landmarks = Joint::ALL
            .iter()
            .map(|&j| {
                let p = self.model.joint_world(j);
                LandmarkTruth { joint: j, position_mm: p, in_fov: p[2] <= top + 1.5 && p[2] >= bottom - 1.5 }
            })
            .collect();
        PhantomTruth {
            config: self.config.clone(),
            series,
            overlaps_mm: self.config.overlaps_mm.clone(),
            landmarks,
            liver_z_range_mm: self.model.liver_z_range(),
            defects: self.config.defects.clone(),
        }
    }
}

/// Removes `width_vox` voxels of tissue from the skin inward in the slices
/// `ks` of an assembled volume. A lateral notch spans the rows within
/// `NOTCH_BAND` of the body axis and an anterior notch the columns within
/// `NOTCH_BAND` of the mid-sagittal plane, so the two never meet. The cut is
/// voxel-aligned: the horizontal extent of the defect is exactly `width_vox`.
pub fn inject_notch(assembled: &mut AssembledVolume, axis: NotchAxis, width_vox: usize, ks: std::ops::Range<usize>) {
    let [nx, ny, _] = assembled.dims();
    let band = |c: usize, n: usize| (c as isize - n as isize / 2).unsigned_abs() <= NOTCH_BAND;
    let inphase = assembled.channel("in").to_vec();
    let tissue = 0.2 * crate::imgproc::histogram_quantile(&inphase, 0.98);
    let mut cut = Vec::new();
    for k in ks {
        match axis {
            NotchAxis::Lateral => {
                for j in (0..ny).filter(|&j| band(j, ny)) {
                    let row = |i: usize| i + nx * (j + ny * k);
                    if let Some(last) = (0..nx).rev().find(|&i| inphase[row(i)] > tissue) {
                        cut.extend(((last + 1).saturating_sub(width_vox)..=last).map(row));
                    }
                }
            }
            NotchAxis::Anterior => {
                for i in (0..nx).filter(|&i| band(i, nx)) {
                    let col = |j: usize| i + nx * (j + ny * k);
                    if let Some(first) = (0..ny).find(|&j| inphase[col(j)] > tissue) {
                        cut.extend((first..(first + width_vox).min(ny)).map(col));
                    }
                }
            }
        }
    }
    for ch in assembled.volume.channels.iter_mut() {
        if let VoxelData::Float32(v) = &mut ch.data {
            for &idx in &cut {
                v[idx] = 0.0;
            }
        }
    }
}

/// Half-width, in voxels, of the band an assembled-volume notch spans.
pub const NOTCH_BAND: usize = 30;

/// Generates all six series and the truth.
pub fn make_dixon_phantom(config: &PhantomConfig) -> Result<(DixonSubject, PhantomTruth)> {
    let p = DixonPhantom::new(config.clone())?;
    Ok((p.subject(), p.truth()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::geometry_extent;

    #[test]
    fn default_layout_spans_370_slices() {
        let p = DixonPhantom::new(PhantomConfig::default()).unwrap();
        let (top, bottom) = p.fov_z_range();
        assert!((top - bottom - 369.0 * 3.0).abs() < 1e-9);
    }

    #[test]
    fn adjacent_overlap_matches_configuration() {
        let cfg = PhantomConfig { overlaps_mm: vec![30.0, 31.0, 32.0, 33.0, 34.0], ..Default::default() };
        let p = DixonPhantom::new(cfg).unwrap();
        for s in 1..6 {
            let a = geometry_extent(p.geometry(s));
            let b = geometry_extent(p.geometry(s + 1));
            assert!((a.overlap(&b, 2) - (29.0 + s as f64)).abs() < 1e-9);
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = PhantomConfig { overlaps_mm: vec![1.0; 4], ..Default::default() };
        assert!(matches!(DixonPhantom::new(cfg), Err(Error::InvalidConfig(_))));
        let cfg = PhantomConfig {
            defects: vec![Defect::Swap { series: 2, region: Region::LeftHalf }],
            ..Default::default()
        };
        assert!(matches!(DixonPhantom::new(cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn channels_are_consistent_and_deterministic() {
        let p = DixonPhantom::new(PhantomConfig::with_seed(9)).unwrap();
        let s = p.series(1);
        let get = |n: &str| s.channel_f32(n).unwrap();
        let (inp, fat, water) = (get("in"), get("fat"), get("water"));
        for i in 0..inp.len() {
            assert_eq!(inp[i], fat[i] + water[i]);
        }
        assert_eq!(s, p.series(1));
        let other = DixonPhantom::new(PhantomConfig::with_seed(10)).unwrap().series(1);
        assert_ne!(s, other);
    }
}
