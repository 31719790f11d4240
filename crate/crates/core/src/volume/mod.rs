//! Geometry-aware voxel containers shared by every stage.
//!
//! Voxel arrays are stored in NIfTI order: the first index varies fastest.
//! World coordinates are millimetres; the phantom and the pipeline use an
//! LPS-style convention (+x toward the subject's left, +y posterior,
//! +z superior).

mod nifti;
mod resample;
mod sidecar;

pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes, HEADER_SIZE, VOX_OFFSET};
pub use resample::{resample, resample_slices, Interpolation};
pub use sidecar::Sidecar;

use nalgebra::{Matrix3, Matrix4, Vector4};
use num_complex::Complex32;

use crate::error::{Error, Result};

/// Tolerance on `|column norm - spacing|`.
const SPACING_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
}

impl Geometry {
    /// Builds a geometry from a voxel-to-world affine; spacing is taken from the
    /// column norms of the linear block.
    pub fn new(dims: [usize; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidGeometry(format!("non-positive dims {dims:?}")));
        }
        if affine.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite affine".into()));
        }
        let linear: Matrix3<f64> = affine.fixed_view::<3, 3>(0, 0).into();
        if linear.determinant().abs() < 1e-12 {
            return Err(Error::SingularAffine);
        }
        let spacing = [0, 1, 2].map(|c| linear.column(c).norm());
        Ok(Self { dims, spacing, affine })
    }

    /// Axis-aligned geometry with `origin` at voxel (0, 0, 0).
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
            affine[(a, 3)] = origin[a];
        }
        Self::new(dims, affine)
    }

    /// Like [`Geometry::new`] but also checks the stated spacing against the affine.
    pub fn with_spacing(dims: [usize; 3], spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        let g = Self::new(dims, affine)?;
        for a in 0..3 {
            if (g.spacing[a] - spacing[a]).abs() > SPACING_TOL {
                return Err(Error::InvalidGeometry(format!(
                    "axis {a}: affine column norm {} disagrees with spacing {}",
                    g.spacing[a], spacing[a]
                )));
            }
        }
        Ok(g)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Voxel volume in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.linear().determinant().abs()
    }

    pub fn linear(&self) -> Matrix3<f64> {
        self.affine.fixed_view::<3, 3>(0, 0).into()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let r = idx / self.dims[0];
        [i, r % self.dims[1], r / self.dims[1]]
    }

    pub fn voxel_to_world(&self, p: [f64; 3]) -> [f64; 3] {
        let w = self.affine * Vector4::new(p[0], p[1], p[2], 1.0);
        [w[0], w[1], w[2]]
    }

    pub fn inverse_affine(&self) -> Result<Matrix4<f64>> {
        self.affine.try_inverse().ok_or(Error::SingularAffine)
    }

    pub fn world_to_voxel(&self, p: [f64; 3]) -> Result<[f64; 3]> {
        let inv = self.inverse_affine()?;
        let v = inv * Vector4::new(p[0], p[1], p[2], 1.0);
        Ok([v[0], v[1], v[2]])
    }

    /// Same grid translated by `offset` mm in world space.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let mut affine = self.affine;
        for a in 0..3 {
            affine[(a, 3)] += offset[a];
        }
        Self { affine, ..self.clone() }
    }

    /// True when continuous voxel coordinate `p` lies within half a voxel of the grid.
    pub fn contains_voxel(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= -0.5 && p[a] <= self.dims[a] as f64 - 0.5)
    }

    pub fn same_grid(&self, other: &Geometry, tol: f64) -> bool {
        self.dims == other.dims && (self.affine - other.affine).abs().max() <= tol
    }
}

/// Axis-aligned box of voxel-centre world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Extent {
    /// Signed overlap along `axis`; negative when disjoint.
    pub fn overlap(&self, other: &Extent, axis: usize) -> f64 {
        self.max[axis].min(other.max[axis]) - self.min[axis].max(other.min[axis])
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| 0.5 * (self.min[a] + self.max[a]))
    }
}

pub fn geometry_extent(g: &Geometry) -> Extent {
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    for corner in 0..8 {
        let p = [0, 1, 2].map(|a| if corner >> a & 1 == 1 { (g.dims[a] - 1) as f64 } else { 0.0 });
        let w = g.voxel_to_world(p);
        for a in 0..3 {
            min[a] = min[a].min(w[a]);
            max[a] = max[a].max(w[a]);
        }
    }
    Extent { min, max }
}

/// Bounding box of the voxel centres of `vol`.
pub fn world_extent(vol: &Volume) -> Extent {
    geometry_extent(&vol.geometry)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Int16,
    Float32,
    Complex64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    Int16(Vec<i16>),
    Float32(Vec<f32>),
    Complex64(Vec<Complex32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::Int16(v) => v.len(),
            VoxelData::Float32(v) => v.len(),
            VoxelData::Complex64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            VoxelData::Int16(_) => ElementKind::Int16,
            VoxelData::Float32(_) => ElementKind::Float32,
            VoxelData::Complex64(_) => ElementKind::Complex64,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            VoxelData::Int16(_) => true,
            VoxelData::Float32(v) => v.iter().all(|x| x.is_finite()),
            VoxelData::Complex64(v) => v.iter().all(|c| c.re.is_finite() && c.im.is_finite()),
        }
    }

    /// Real view; complex data is reduced to magnitude.
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            VoxelData::Int16(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::Float32(v) => v.clone(),
            VoxelData::Complex64(v) => v.iter().map(|c| c.norm()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub name: String,
    pub data: VoxelData,
}

impl Channel {
    pub fn new(name: impl Into<String>, data: VoxelData) -> Self {
        Self { name: name.into(), data }
    }
}

/// Voxel arrays sharing one geometry and one element kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub channels: Vec<Channel>,
}

impl Volume {
    /// Checked constructor: lengths, single element kind and finiteness.
    pub fn new(geometry: Geometry, channels: Vec<Channel>) -> Result<Self> {
        let v = Self { geometry, channels };
        v.validate()?;
        Ok(v)
    }

    /// Single float channel named `data`. Panics when the length disagrees with the grid.
    pub fn from_f32(geometry: Geometry, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), geometry.voxel_count(), "voxel count mismatch");
        Self { geometry, channels: vec![Channel::new("data", VoxelData::Float32(data))] }
    }

    pub fn zeros(geometry: Geometry) -> Self {
        let n = geometry.voxel_count();
        Self::from_f32(geometry, vec![0.0; n])
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::InvalidGeometry("volume has no channels".into()));
        }
        let n = self.geometry.voxel_count();
        let kind = self.channels[0].data.kind();
        for c in &self.channels {
            if c.data.len() != n {
                return Err(Error::GeometryMismatch(format!(
                    "channel `{}` has {} voxels, grid has {n}",
                    c.name,
                    c.data.len()
                )));
            }
            if c.data.kind() != kind {
                return Err(Error::ChannelKind(c.name.clone()));
            }
            if !c.data.is_finite() {
                return Err(Error::NonFinite(c.name.clone()));
            }
        }
        Ok(())
    }

    pub fn element_kind(&self) -> ElementKind {
        self.channels[0].data.kind()
    }

    pub fn channel(&self, name: &str) -> Option<&Channel> {
        self.channels.iter().find(|c| c.name == name)
    }

    /// First channel as float data.
    pub fn data(&self) -> Result<&[f32]> {
        match &self.channels.first().map(|c| &c.data) {
            Some(VoxelData::Float32(v)) => Ok(v),
            _ => Err(Error::ChannelKind(self.channels.first().map(|c| c.name.clone()).unwrap_or_default())),
        }
    }

    pub fn data_mut(&mut self) -> Result<&mut Vec<f32>> {
        let name = self.channels.first().map(|c| c.name.clone()).unwrap_or_default();
        match self.channels.first_mut().map(|c| &mut c.data) {
            Some(VoxelData::Float32(v)) => Ok(v),
            _ => Err(Error::ChannelKind(name)),
        }
    }

    /// First channel converted to float, whatever its stored kind.
    pub fn to_f32(&self) -> Vec<f32> {
        self.channels[0].data.to_f32()
    }

    pub fn into_f32(self) -> Vec<f32> {
        match self.channels.into_iter().next().map(|c| c.data) {
            Some(VoxelData::Float32(v)) => v,
            Some(other) => other.to_f32(),
            None => Vec::new(),
        }
    }
}

/// Binary mask on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub geometry: Geometry,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), geometry.voxel_count(), "voxel count mismatch");
        Self { geometry, data }
    }

    pub fn empty(geometry: Geometry) -> Self {
        let n = geometry.voxel_count();
        Self::new(geometry, vec![false; n])
    }

    pub fn full(geometry: Geometry) -> Self {
        let n = geometry.voxel_count();
        Self::new(geometry, vec![true; n])
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Nonzero voxels of the first channel.
    pub fn from_volume(vol: &Volume) -> Self {
        let data = match &vol.channels[0].data {
            VoxelData::Int16(v) => v.iter().map(|&x| x != 0).collect(),
            VoxelData::Float32(v) => v.iter().map(|&x| x != 0.0).collect(),
            VoxelData::Complex64(v) => v.iter().map(|c| c.norm_sqr() != 0.0).collect(),
        };
        Self::new(vol.geometry.clone(), data)
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry.clone(),
            channels: vec![Channel::new(
                "mask",
                VoxelData::Int16(self.data.iter().map(|&b| b as i16).collect()),
            )],
        }
    }

    /// Mean voxel index of the set voxels.
    pub fn centroid_voxel(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (idx, _) in self.data.iter().enumerate().filter(|(_, &b)| b) {
            let c = self.geometry.coords(idx);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
            n += 1;
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }
}

/// Multi-echo complex acquisition: one complex channel per echo.
#[derive(Debug, Clone, PartialEq)]
pub struct EchoSeries {
    pub volume: Volume,
    pub echo_times_ms: Vec<f64>,
    pub flip_angle_deg: f64,
    pub repetition_time_ms: f64,
    /// Scanner-reported slice orientation, when the sidecar carries one.
    pub orientation: Option<String>,
}

impl EchoSeries {
    pub fn new(volume: Volume, echo_times_ms: Vec<f64>, flip_angle_deg: f64, repetition_time_ms: f64) -> Result<Self> {
        if volume.channels.len() != echo_times_ms.len() {
            return Err(Error::InvalidConfig(format!(
                "{} echo channels but {} echo times",
                volume.channels.len(),
                echo_times_ms.len()
            )));
        }
        if echo_times_ms.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("echo times must be strictly increasing".into()));
        }
        if volume.element_kind() != ElementKind::Complex64 {
            return Err(Error::ChannelKind("echo series must be complex".into()));
        }
        Ok(Self { volume, echo_times_ms, flip_angle_deg, repetition_time_ms, orientation: None })
    }

    /// Combines magnitude and raw phase volumes (one channel per echo) using
    /// `phase_rad = raw * PI / phase_scale`.
    pub fn from_magnitude_phase(mag: &Volume, phase: &Volume, phase_scale: f64, sidecar: &Sidecar) -> Result<Self> {
        if !mag.geometry.same_grid(&phase.geometry, 1e-6) || mag.channels.len() != phase.channels.len() {
            return Err(Error::GeometryMismatch("magnitude and phase volumes differ".into()));
        }
        let channels = mag
            .channels
            .iter()
            .zip(&phase.channels)
            .enumerate()
            .map(|(e, (m, p))| {
                let m = m.data.to_f32();
                let p = p.data.to_f32();
                let data = m
                    .iter()
                    .zip(&p)
                    .map(|(&m, &p)| Complex32::from_polar(m, (p as f64 * std::f64::consts::PI / phase_scale) as f32))
                    .collect();
                Channel::new(format!("echo{e}"), VoxelData::Complex64(data))
            })
            .collect();
        let vol = Volume::new(mag.geometry.clone(), channels)?;
        let mut series = Self::new(vol, sidecar.echo_times_ms.clone(), sidecar.flip_angle_deg, sidecar.tr_ms)?;
        series.orientation = sidecar.orientation.clone();
        Ok(series)
    }

    pub fn echo(&self, e: usize) -> &[Complex32] {
        match &self.volume.channels[e].data {
            VoxelData::Complex64(v) => v,
            _ => unreachable!("validated as complex"),
        }
    }

    pub fn sidecar(&self, series: &str) -> Sidecar {
        Sidecar {
            series: series.to_string(),
            echo_times_ms: self.echo_times_ms.clone(),
            flip_angle_deg: self.flip_angle_deg,
            tr_ms: self.repetition_time_ms,
            orientation: self.orientation.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_geom(n: usize, spacing: f64, origin_z: f64) -> Geometry {
        Geometry::axis_aligned([1, 1, n], [1.0, 1.0, spacing], [0.0, 0.0, origin_z]).unwrap()
    }

    #[test]
    fn extent_of_ten_voxel_axis() {
        let g = line_geom(10, 2.0, 0.0);
        let e = world_extent(&Volume::zeros(g));
        assert_eq!(e.min[2], 0.0);
        assert_eq!(e.max[2], 18.0);
    }

    #[test]
    fn extent_is_translation_equivariant() {
        let g = Geometry::axis_aligned([4, 5, 6], [1.5, 2.0, 3.0], [-10.0, 3.0, 7.0]).unwrap();
        let a = geometry_extent(&g);
        let b = geometry_extent(&g.translated([0.0, 0.0, 5.0]));
        for ax in 0..3 {
            let shift = if ax == 2 { 5.0 } else { 0.0 };
            assert_eq!(b.min[ax] - a.min[ax], shift);
            assert_eq!(b.max[ax] - a.max[ax], shift);
        }
    }

    #[test]
    fn singular_affine_rejected() {
        let mut m = Matrix4::identity();
        m[(2, 2)] = 0.0;
        assert!(matches!(Geometry::new([2, 2, 2], m), Err(Error::SingularAffine)));
    }

    #[test]
    fn spacing_follows_column_norms() {
        let mut m = Matrix4::zeros();
        // 90 degree rotation in x/y with anisotropic voxels.
        m[(0, 1)] = -2.0;
        m[(1, 0)] = 3.0;
        m[(2, 2)] = 4.0;
        m[(3, 3)] = 1.0;
        let g = Geometry::with_spacing([2, 2, 2], [3.0, 2.0, 4.0], m).unwrap();
        assert_eq!(g.spacing(), [3.0, 2.0, 4.0]);
        assert!(Geometry::with_spacing([2, 2, 2], [2.0, 2.0, 4.0], m).is_err());
        assert!((g.voxel_volume() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn index_and_coords_agree() {
        let g = Geometry::axis_aligned([3, 4, 5], [1.0; 3], [0.0; 3]).unwrap();
        for idx in 0..g.voxel_count() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn nan_channel_fails_validation() {
        let g = Geometry::axis_aligned([2, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let v = Volume::from_f32(g, vec![1.0, f32::NAN]);
        assert!(matches!(v.validate(), Err(Error::NonFinite(_))));
    }

    #[test]
    fn echo_times_must_increase() {
        let g = Geometry::axis_aligned([1, 1, 1], [1.0; 3], [0.0; 3]).unwrap();
        let ch = |n: &str| Channel::new(n, VoxelData::Complex64(vec![Complex32::new(1.0, 0.0)]));
        let vol = Volume::new(g, vec![ch("a"), ch("b")]).unwrap();
        assert!(EchoSeries::new(vol.clone(), vec![2.0, 1.0], 20.0, 27.0).is_err());
        assert!(EchoSeries::new(vol, vec![1.0, 2.0], 20.0, 27.0).is_ok());
    }
}
