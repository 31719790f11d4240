//! Bone-joint landmarks: shoulders, hips and knees.
//!
//! Atlases matched on sex and height are registered to the subject body mask
//! with an axis-scaled similarity transform. Their annotated joints are mapped
//! into the subject, votes outside the field of view count against the joint,
//! and the in-view centroid is refined on the water image.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{gaussian_3d, label_3d, quantile};
use crate::volume::{read_nifti, write_nifti, Geometry, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Joint {
    ShoulderLeft,
    ShoulderRight,
    HipLeft,
    HipRight,
    KneeLeft,
    KneeRight,
}

impl Joint {
    pub const ALL: [Joint; 6] =
        [Joint::ShoulderLeft, Joint::ShoulderRight, Joint::HipLeft, Joint::HipRight, Joint::KneeLeft, Joint::KneeRight];

    pub fn is_left(self) -> bool {
        matches!(self, Joint::ShoulderLeft | Joint::HipLeft | Joint::KneeLeft)
    }

    pub fn mirror(self) -> Joint {
        match self {
            Joint::ShoulderLeft => Joint::ShoulderRight,
            Joint::ShoulderRight => Joint::ShoulderLeft,
            Joint::HipLeft => Joint::HipRight,
            Joint::HipRight => Joint::HipLeft,
            Joint::KneeLeft => Joint::KneeRight,
            Joint::KneeRight => Joint::KneeLeft,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Joint::ShoulderLeft => "shoulder_left",
            Joint::ShoulderRight => "shoulder_right",
            Joint::HipLeft => "hip_left",
            Joint::HipRight => "hip_right",
            Joint::KneeLeft => "knee_left",
            Joint::KneeRight => "knee_right",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    F,
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkStatus {
    Present,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub joint: Joint,
    pub status: LandmarkStatus,
    pub position_mm: [f64; 3],
    /// Fraction of atlas votes that land inside the field of view.
    pub support: f64,
    /// Whether crop refinement was applied.
    #[serde(default)]
    pub refined: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubjectMeta {
    pub sex: Sex,
    pub height_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atlas {
    pub id: String,
    pub sex: Sex,
    pub height_mm: f64,
    pub landmarks: BTreeMap<Joint, [f64; 3]>,
    /// Whole-body mask on a coarse grid.
    pub body_mask: Mask,
}

#[derive(Serialize, Deserialize)]
struct AtlasRecord {
    id: String,
    sex: Sex,
    height_mm: f64,
    landmarks: BTreeMap<Joint, [f64; 3]>,
}

impl Atlas {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("atlas {}: {m}", self.id)));
        for j in Joint::ALL {
            match self.landmarks.get(&j) {
                Some(p) if p.iter().all(|v| v.is_finite()) => {}
                _ => return bad(format!("{} missing or non-finite", j.name())),
            }
        }
        for j in Joint::ALL.into_iter().filter(|j| j.is_left()) {
            if self.landmarks[&j][0] <= self.landmarks[&j.mirror()][0] {
                return bad(format!("{} is not left of its pair", j.name()));
            }
        }
        if self.body_mask.is_empty() {
            return bad("empty body mask".into());
        }
        Ok(())
    }
}

/// Writes `<id>.nii` and `<id>.json` per atlas.
pub fn save_bank(bank: &[Atlas], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for a in bank {
        write_nifti(&a.body_mask.to_volume(), &dir.join(format!("{}.nii", a.id)))?;
        let rec = AtlasRecord { id: a.id.clone(), sex: a.sex, height_mm: a.height_mm, landmarks: a.landmarks.clone() };
        let path = dir.join(format!("{}.json", a.id));
        let text = serde_json::to_string_pretty(&rec).expect("atlas record serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads every `<id>.json` with a matching `<id>.nii`, sorted by id.
pub fn load_bank(dir: &Path) -> Result<Vec<Atlas>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    let mut bank = Vec::new();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let rec: AtlasRecord = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        let mask = Mask::from_volume(&read_nifti(&path.with_extension("nii"))?);
        let atlas = Atlas { id: rec.id, sex: rec.sex, height_mm: rec.height_mm, landmarks: rec.landmarks, body_mask: mask };
        atlas.validate()?;
        bank.push(atlas);
    }
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    Ok(bank)
}

/// Same-sex atlases ranked by height difference, nearest first. Falls back to
/// the whole bank when no atlas shares the subject's sex.
pub fn select_atlases<'a>(meta: &SubjectMeta, bank: &'a [Atlas], k: usize) -> Result<Vec<&'a Atlas>> {
    if bank.is_empty() {
        return Err(Error::EmptyBank);
    }
    let mut pool: Vec<&Atlas> = bank.iter().filter(|a| a.sex == meta.sex).collect();
    if pool.is_empty() {
        pool = bank.iter().collect();
    }
    pool.sort_by(|a, b| {
        (a.height_mm - meta.height_mm)
            .abs()
            .total_cmp(&(b.height_mm - meta.height_mm).abs())
            .then_with(|| a.id.cmp(&b.id))
    });
    pool.truncate(k.max(1));
    Ok(pool)
}

/// Maps atlas world coordinates to subject world coordinates:
/// `p_s = scale * p_a + translation`, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisTransform {
    pub scale: [f64; 3],
    pub translation: [f64; 3],
}

impl AxisTransform {
    pub fn identity() -> Self {
        Self { scale: [1.0; 3], translation: [0.0; 3] }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| self.scale[a] * p[a] + self.translation[a])
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.translation[a]) / self.scale[a])
    }

    fn params(&self) -> [f64; 6] {
        [self.translation[0], self.translation[1], self.translation[2], self.scale[0], self.scale[1], self.scale[2]]
    }

    fn from_params(p: [f64; 6]) -> Self {
        Self { translation: [p[0], p[1], p[2]], scale: [p[3], p[4], p[5]] }
    }
}

/// Fractional occupancy on an axis-aligned grid.
#[derive(Debug, Clone)]
struct SoftMask {
    dims: [usize; 3],
    origin: [f64; 3],
    step: [f64; 3],
    data: Vec<f32>,
    /// Index bounds of the occupied voxels per axis, inclusive.
    support: [[usize; 2]; 3],
}

fn axis_aligned_steps(g: &Geometry) -> Result<([f64; 3], [f64; 3])> {
    let a = g.affine();
    for r in 0..3 {
        for c in 0..3 {
            if r != c && a[(r, c)].abs() > 1e-9 {
                return Err(Error::InvalidGeometry("registration needs axis-aligned grids".into()));
            }
        }
    }
    Ok(([a[(0, 3)], a[(1, 3)], a[(2, 3)]], [a[(0, 0)], a[(1, 1)], a[(2, 2)]]))
}

impl SoftMask {
    /// Block-averages a mask by `block` voxels per axis.
    fn from_mask(mask: &Mask, block: [usize; 3]) -> Result<Self> {
        let (origin, step) = axis_aligned_steps(&mask.geometry)?;
        let d = mask.geometry.dims();
        let dims = [0, 1, 2].map(|a| d[a].div_ceil(block[a]));
        let mut sum = vec![0u32; dims.iter().product()];
        let mut cnt = vec![0u32; sum.len()];
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    let o = i / block[0] + dims[0] * (j / block[1] + dims[1] * (k / block[2]));
                    cnt[o] += 1;
                    if mask.data[i + d[0] * (j + d[1] * k)] {
                        sum[o] += 1;
                    }
                }
            }
        }
        let data: Vec<f32> = sum.iter().zip(&cnt).map(|(&s, &c)| s as f32 / c.max(1) as f32).collect();
        let origin = [0, 1, 2].map(|a| origin[a] + step[a] * (block[a] as f64 - 1.0) / 2.0);
        let step = [0, 1, 2].map(|a| step[a] * block[a] as f64);
        let mut support = [[usize::MAX, 0]; 3];
        for idx in (0..data.len()).filter(|&i| data[i] > 0.0) {
            let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            for a in 0..3 {
                support[a] = [support[a][0].min(c[a]), support[a][1].max(c[a])];
            }
        }
        Ok(Self { dims, origin, step, data, support })
    }

    fn world(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + self.step[axis] * i as f64
    }

    fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Occupied cross-section (mm²) per slice, with the slice world z.
    fn area_profile(&self) -> Vec<(f64, f64)> {
        let plane = self.dims[0] * self.dims[1];
        let cell = (self.step[0] * self.step[1]).abs();
        (0..self.dims[2])
            .map(|k| (self.world(2, k), self.data[k * plane..(k + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() * cell))
            .collect()
    }

    fn centroid_xy(&self) -> [f64; 2] {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (idx, &v) in self.data.iter().enumerate() {
            if v > 0.0 {
                let i = idx % self.dims[0];
                let j = (idx / self.dims[0]) % self.dims[1];
                sx += v as f64 * self.world(0, i);
                sy += v as f64 * self.world(1, j);
                n += v as f64;
            }
        }
        if n > 0.0 {
            [sx / n, sy / n]
        } else {
            [0.0; 2]
        }
    }
}

fn interp_profile(profile: &[(f64, f64)], z: f64) -> f64 {
    // Profiles are monotone in z, either direction.
    let n = profile.len();
    if n == 0 {
        return 0.0;
    }
    let (z0, zn) = (profile[0].0, profile[n - 1].0);
    let step = if n > 1 { (zn - z0) / (n - 1) as f64 } else { 1.0 };
    let t = (z - z0) / step;
    if t < -0.5 || t > n as f64 - 0.5 {
        return 0.0;
    }
    let t = t.clamp(0.0, (n - 1) as f64);
    let i = (t.floor() as usize).min(n.saturating_sub(2));
    let f = t - i as f64;
    if n == 1 {
        return profile[0].1;
    }
    profile[i].1 * (1.0 - f) + profile[i + 1].1 * f
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f32,
    w1: f32,
}

/// Soft Dice between the subject occupancy and the atlas occupancy pulled
/// back through `t`, evaluated over the subject grid only.
fn soft_dice(subject: &SoftMask, subject_total: f64, atlas: &SoftMask, t: &AxisTransform) -> f64 {
    let axis_taps = |a: usize| -> Vec<Option<Tap>> {
        (0..subject.dims[a])
            .map(|i| {
                let pa = (subject.world(a, i) - t.translation[a]) / t.scale[a];
                let c = (pa - atlas.origin[a]) / atlas.step[a];
                let n = atlas.dims[a] as isize;
                let [lo, hi] = atlas.support[a];
                if !(c > lo as f64 - 1.0 && c < hi as f64 + 1.0) {
                    return None;
                }
                let lo = c.floor() as isize;
                let f = (c - c.floor()) as f32;
                // Neighbours off the atlas grid read as empty.
                Some(Tap {
                    i0: lo.max(0) as usize,
                    i1: (lo + 1).min(n - 1) as usize,
                    w0: if lo >= 0 { 1.0 - f } else { 0.0 },
                    w1: if lo + 1 < n { f } else { 0.0 },
                })
            })
            .collect()
    };
    let (cx, cy, cz) = (axis_taps(0), axis_taps(1), axis_taps(2));
    let ax = &atlas.data;
    let (nx, ny) = (atlas.dims[0], atlas.dims[0] * atlas.dims[1]);
    let mut inter = 0.0f64;
    let mut total_b = 0.0f64;
    for (k, ez) in cz.iter().enumerate() {
        let Some(Tap { i0: z0, i1: z1, w0: wz0, w1: wz1 }) = *ez else { continue };
        for (j, ey) in cy.iter().enumerate() {
            let Some(Tap { i0: y0, i1: y1, w0: wy0, w1: wy1 }) = *ey else { continue };
            let row = subject.dims[0] * (j + subject.dims[1] * k);
            for (i, ex) in cx.iter().enumerate() {
                let Some(Tap { i0: x0, i1: x1, w0: wx0, w1: wx1 }) = *ex else { continue };
                let g = |x: usize, y: usize, z: usize| ax[x + nx * y + ny * z];
                let b = wz0 * (wy0 * (wx0 * g(x0, y0, z0) + wx1 * g(x1, y0, z0)) + wy1 * (wx0 * g(x0, y1, z0) + wx1 * g(x1, y1, z0)))
                    + wz1
                        * (wy0 * (wx0 * g(x0, y0, z1) + wx1 * g(x1, y0, z1))
                            + wy1 * (wx0 * g(x0, y1, z1) + wx1 * g(x1, y1, z1)));
                if b > 0.0 {
                    total_b += b as f64;
                    inter += (b * subject.data[i + row]) as f64;
                }
            }
        }
    }
    let denom = subject_total + total_b;
    if denom > 0.0 {
        2.0 * inter / denom
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkConfig {
    /// Atlases used per subject.
    pub atlas_count: usize,
    /// Block sizes (voxels) of the coarse and fine registration levels.
    pub coarse_block: [usize; 3],
    pub fine_block: [usize; 3],
    /// Search range of the axial scale.
    pub scale_range: [f64; 2],
    pub crop_size: usize,
    /// Intensity quantile kept inside the refinement crop.
    pub crop_quantile: f64,
    /// Gaussian smoothing of the crop, in voxels.
    pub crop_sigma: f64,
    pub max_move_voxels: f64,
    /// Crops with more than this fraction outside the grid keep the coarse estimate.
    pub max_clipped: f64,
    pub support_threshold: f64,
}

impl Default for LandmarkConfig {
    fn default() -> Self {
        Self {
            atlas_count: 35,
            coarse_block: [8, 8, 6],
            fine_block: [6, 6, 4],
            scale_range: [0.8, 1.25],
            crop_size: 64,
            crop_quantile: 0.9,
            crop_sigma: 1.0,
            max_move_voxels: 32.0,
            max_clipped: 0.5,
            support_threshold: 0.5,
        }
    }
}

/// Initial axial scale and offset by matching cross-section profiles.
fn profile_init(subject: &SoftMask, atlas: &SoftMask, cfg: &LandmarkConfig) -> AxisTransform {
    let ps = subject.area_profile();
    let pa = atlas.area_profile();
    let s_norm: f64 = ps.iter().map(|p| p.1 * p.1).sum::<f64>().max(1e-12);
    let (zs_min, zs_max) = ps.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (za_min, za_max) = pa.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let mut best = (f64::MAX, 1.0, 0.0, 1.0);
    let n_scales = 19;
    for si in 0..n_scales {
        let sz = cfg.scale_range[0] + (cfg.scale_range[1] - cfg.scale_range[0]) * si as f64 / (n_scales - 1) as f64;
        // Offsets that keep at least part of the atlas in view.
        let (t_lo, t_hi) = (zs_min - sz * za_max, zs_max - sz * za_min);
        let steps = ((t_hi - t_lo) / 4.0).ceil().max(1.0) as usize;
        for ti in 0..=steps {
            let tz = t_lo + (t_hi - t_lo) * ti as f64 / steps as f64;
            let (mut sa, mut aa) = (0.0, 0.0);
            let vals: Vec<f64> = ps.iter().map(|p| interp_profile(&pa, (p.0 - tz) / sz)).collect();
            for (p, &a) in ps.iter().zip(&vals) {
                sa += p.1 * a;
                aa += a * a;
            }
            if aa <= 0.0 {
                continue;
            }
            let gain = sa / aa;
            let resid: f64 = ps.iter().zip(&vals).map(|(p, &a)| (p.1 - gain * a).powi(2)).sum::<f64>() / s_norm;
            if resid < best.0 {
                best = (resid, sz, tz, gain);
            }
        }
    }
    let (_, sz, tz, gain) = best;
    let sxy = gain.max(0.25).sqrt().clamp(0.7, 1.4);
    let cs = subject.centroid_xy();
    let ca = atlas.centroid_xy();
    AxisTransform { scale: [sxy, sxy, sz], translation: [cs[0] - sxy * ca[0], cs[1] - sxy * ca[1], tz] }
}

/// Pattern search on the soft Dice with step halving.
fn refine_transform(subject: &SoftMask, atlas: &SoftMask, init: AxisTransform, steps: [f64; 6], min_step: [f64; 6]) -> (AxisTransform, f64) {
    let total = subject.total();
    let mut p = init.params();
    let mut best = soft_dice(subject, total, atlas, &init);
    let mut step = steps;
    let mut evals = 0;
    while step.iter().zip(&min_step).any(|(s, m)| s >= m) && evals < 400 {
        let mut improved = false;
        for a in 0..6 {
            if step[a] < min_step[a] {
                continue;
            }
            for dir in [1.0, -1.0] {
                let mut q = p;
                q[a] += dir * step[a];
                if a >= 3 && q[a] <= 0.1 {
                    continue;
                }
                evals += 1;
                let d = soft_dice(subject, total, atlas, &AxisTransform::from_params(q));
                if d > best + 1e-9 {
                    best = d;
                    p = q;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            for s in step.iter_mut() {
                *s *= 0.5;
            }
        }
    }
    (AxisTransform::from_params(p), best)
}

/// Subject body mask at both registration levels.
#[derive(Debug, Clone)]
pub struct RegistrationTarget {
    coarse: SoftMask,
    fine: SoftMask,
}

impl RegistrationTarget {
    pub fn new(subject: &Mask, cfg: &LandmarkConfig) -> Result<Self> {
        if subject.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self { coarse: SoftMask::from_mask(subject, cfg.coarse_block)?, fine: SoftMask::from_mask(subject, cfg.fine_block)? })
    }

    /// Registers an atlas body mask; returns the transform and its soft Dice.
    pub fn register(&self, atlas: &Mask, cfg: &LandmarkConfig) -> Result<(AxisTransform, f64)> {
        if atlas.is_empty() {
            return Err(Error::EmptyMask);
        }
        let atlas_soft = SoftMask::from_mask(atlas, [1, 1, 1])?;
        let init = profile_init(&self.coarse, &atlas_soft, cfg);
        let (t, _) =
            refine_transform(&self.coarse, &atlas_soft, init, [8.0, 8.0, 8.0, 0.04, 0.04, 0.04], [1.0, 1.0, 1.0, 0.005, 0.005, 0.005]);
        Ok(refine_transform(&self.fine, &atlas_soft, t, [1.0, 1.0, 1.0, 0.005, 0.005, 0.005], [0.5, 0.5, 0.5, 0.0025, 0.0025, 0.0025]))
    }
}

/// Registers an atlas body mask to a subject body mask. Both grids must be
/// axis-aligned.
pub fn register_atlas(subject: &Mask, atlas: &Mask, cfg: &LandmarkConfig) -> Result<(AxisTransform, f64)> {
    RegistrationTarget::new(subject, cfg)?.register(atlas, cfg)
}

/// Per-joint vote result before refinement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointVote {
    pub joint: Joint,
    pub centroid_mm: Option<[f64; 3]>,
    pub support: f64,
    pub votes_in_fov: usize,
    pub votes: usize,
}

impl JointVote {
    pub fn status(&self, threshold: f64) -> LandmarkStatus {
        if self.support < threshold || self.centroid_mm.is_none() {
            LandmarkStatus::Missing
        } else {
            LandmarkStatus::Present
        }
    }
}

/// Maps each atlas landmark into the subject and aggregates the votes that
/// fall inside the subject grid.
pub fn propagate_and_vote(fov: &Geometry, mapped: &[BTreeMap<Joint, [f64; 3]>]) -> Result<Vec<JointVote>> {
    let inv = fov.inverse_affine()?;
    let inside = |p: [f64; 3]| {
        let v = inv * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
        fov.contains_voxel([v[0], v[1], v[2]])
    };
    Ok(Joint::ALL
        .iter()
        .map(|&joint| {
            let pts: Vec<[f64; 3]> = mapped.iter().filter_map(|m| m.get(&joint).copied()).collect();
            let in_fov: Vec<[f64; 3]> = pts.iter().copied().filter(|&p| inside(p)).collect();
            let centroid = (!in_fov.is_empty())
                .then(|| [0, 1, 2].map(|a| in_fov.iter().map(|p| p[a]).sum::<f64>() / in_fov.len() as f64));
            let support = if pts.is_empty() { 0.0 } else { in_fov.len() as f64 / pts.len() as f64 };
            JointVote { joint, centroid_mm: centroid, support, votes_in_fov: in_fov.len(), votes: pts.len() }
        })
        .collect())
}

/// Bone-centre estimate inside a cubic crop of `intensity` around `coarse_mm`:
/// smoothed crop, top-quantile threshold, component holding the brightest
/// voxel, then the intensity-weighted centroid of its upper half range.
pub fn refine_landmark(intensity: &Volume, coarse_mm: [f64; 3], cfg: &LandmarkConfig) -> Result<[f64; 3]> {
    let g = &intensity.geometry;
    let data = intensity.channels.first().map(|c| c.data.to_f32()).ok_or(Error::EmptyMask)?;
    let dims = g.dims();
    let c = g.world_to_voxel(coarse_mm)?;
    let n = cfg.crop_size;
    let half = (n / 2) as isize;
    let start = c.map(|v| v.round() as isize - half);
    let mut crop = vec![0.0f64; n * n * n];
    let mut valid = vec![false; n * n * n];
    let mut outside = 0usize;
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let (i, j, k) = (start[0] + x as isize, start[1] + y as isize, start[2] + z as isize);
                let o = x + n * (y + n * z);
                if i < 0 || j < 0 || k < 0 || i >= dims[0] as isize || j >= dims[1] as isize || k >= dims[2] as isize {
                    outside += 1;
                    continue;
                }
                crop[o] = data[g.index(i as usize, j as usize, k as usize)] as f64;
                valid[o] = true;
            }
        }
    }
    let clipped = outside as f64 / (n * n * n) as f64;
    if clipped > cfg.max_clipped {
        return Err(Error::CropOutOfBounds { clipped: 100.0 * clipped });
    }
    let smooth = gaussian_3d(&crop, [n, n, n], [cfg.crop_sigma; 3], true);
    let mut vals: Vec<f64> = smooth.iter().zip(&valid).filter(|(_, &v)| v).map(|(&s, _)| s).collect();
    let thr = quantile(&mut vals, cfg.crop_quantile);
    let above: Vec<bool> = smooth.iter().zip(&valid).map(|(&s, &v)| v && s > thr).collect();
    let (labels, _) = label_3d(&above, [n, n, n]);
    let peak = (0..smooth.len()).filter(|&o| above[o]).max_by(|&a, &b| smooth[a].total_cmp(&smooth[b]).then(b.cmp(&a)));
    let Some(peak) = peak else { return Ok(coarse_mm) };
    let label = labels[peak];
    let top = smooth[peak];
    let floor = 0.5 * (thr + top);
    let mut acc = [0.0f64; 3];
    let mut wsum = 0.0;
    for o in 0..smooth.len() {
        if labels[o] == label && smooth[o] > floor {
            let w = smooth[o] - floor;
            let (x, y, z) = (o % n, (o / n) % n, o / (n * n));
            acc[0] += w * (start[0] + x as isize) as f64;
            acc[1] += w * (start[1] + y as isize) as f64;
            acc[2] += w * (start[2] + z as isize) as f64;
            wsum += w;
        }
    }
    if wsum <= 0.0 {
        return Ok(coarse_mm);
    }
    let mut v = acc.map(|a| a / wsum);
    let moved = [0, 1, 2].map(|a| v[a] - c[a]);
    let dist = moved.iter().map(|d| d * d).sum::<f64>().sqrt();
    if dist > cfg.max_move_voxels {
        let f = cfg.max_move_voxels / dist;
        v = [0, 1, 2].map(|a| c[a] + moved[a] * f);
    }
    Ok(g.voxel_to_world(v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub landmarks: Vec<Landmark>,
    pub atlases: Vec<String>,
    /// Mean soft Dice of the atlas registrations.
    pub mean_dice: f64,
}

impl JointReport {
    pub fn missing(&self) -> Vec<Joint> {
        self.landmarks.iter().filter(|l| l.status == LandmarkStatus::Missing).map(|l| l.joint).collect()
    }

    pub fn get(&self, joint: Joint) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.joint == joint)
    }
}

/// Select, register, vote and refine. `water` supplies the refinement
/// intensities and defines the field of view.
pub fn detect_joints(
    water: &Volume,
    body: &Mask,
    meta: &SubjectMeta,
    bank: &[Atlas],
    cfg: &LandmarkConfig,
) -> Result<JointReport> {
    let atlases = select_atlases(meta, bank, cfg.atlas_count)?;
    let target = RegistrationTarget::new(body, cfg)?;
    let regs: Vec<Result<(AxisTransform, f64)>> =
        atlases.par_iter().map(|a| target.register(&a.body_mask, cfg)).collect();
    let mut mapped = Vec::new();
    let mut dice = Vec::new();
    for (a, r) in atlases.iter().zip(regs) {
        let (t, d) = r?;
        mapped.push(a.landmarks.iter().map(|(&j, &p)| (j, t.apply(p))).collect::<BTreeMap<_, _>>());
        dice.push(d);
    }
    let votes = propagate_and_vote(&water.geometry, &mapped)?;
    let mut landmarks = Vec::new();
    for v in votes {
        let status = v.status(cfg.support_threshold);
        let coarse = v.centroid_mm.unwrap_or([f64::NAN; 3]);
        let (position_mm, refined) = match status {
            LandmarkStatus::Present => match refine_landmark(water, coarse, cfg) {
                Ok(p) => (p, true),
                Err(Error::CropOutOfBounds { clipped }) => {
                    log::info!("{}: crop {clipped:.0}% outside the field of view, keeping coarse estimate", v.joint.name());
                    (coarse, false)
                }
                Err(e) => return Err(e),
            },
            LandmarkStatus::Missing => (coarse, false),
        };
        landmarks.push(Landmark { joint: v.joint, status, position_mm, support: v.support, refined });
    }
    Ok(JointReport {
        landmarks,
        atlases: atlases.iter().map(|a| a.id.clone()).collect(),
        mean_dice: dice.iter().sum::<f64>() / dice.len().max(1) as f64,
    })
}
