use std::ops::{Add, Mul, Range};

use nalgebra::{Matrix4, Vector4};
use num_complex::Complex32;

use super::{Channel, Geometry, Volume, VoxelData};
use crate::error::Result;

/// Samples this close outside the grid (in voxels) are clamped onto it.
const EDGE_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Trilinear,
}

trait Sample: Copy + Add<Output = Self> + Mul<f32, Output = Self> {
    const ZERO: Self;
}

impl Sample for f32 {
    const ZERO: Self = 0.0;
}

impl Sample for Complex32 {
    const ZERO: Self = Complex32::new(0.0, 0.0);
}

/// Target-voxel to source-voxel map.
fn voxel_map(src: &Geometry, target: &Geometry) -> Result<Matrix4<f64>> {
    Ok(src.inverse_affine()? * target.affine())
}

struct Sampler<'a, T> {
    data: &'a [T],
    dims: [usize; 3],
}

impl<T: Sample> Sampler<'_, T> {
    #[inline]
    fn at(&self, i: usize, j: usize, k: usize) -> T {
        self.data[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    /// Lower corner index and weight of the upper neighbour along one axis.
    #[inline]
    fn axis(x: f64, n: usize) -> Option<(usize, usize, f32)> {
        let hi = (n - 1) as f64;
        if x < -EDGE_TOL || x > hi + EDGE_TOL {
            return None;
        }
        let x = x.clamp(0.0, hi);
        if n == 1 {
            return Some((0, 0, 0.0));
        }
        let x0 = (x.floor() as usize).min(n - 2);
        Some((x0, x0 + 1, (x - x0 as f64) as f32))
    }

    #[inline]
    fn trilinear(&self, p: [f64; 3]) -> T {
        let (Some((x0, x1, fx)), Some((y0, y1, fy)), Some((z0, z1, fz))) =
            (Self::axis(p[0], self.dims[0]), Self::axis(p[1], self.dims[1]), Self::axis(p[2], self.dims[2]))
        else {
            return T::ZERO;
        };
        let lerp = |a: T, b: T, t: f32| a * (1.0 - t) + b * t;
        let c00 = lerp(self.at(x0, y0, z0), self.at(x1, y0, z0), fx);
        let c10 = lerp(self.at(x0, y1, z0), self.at(x1, y1, z0), fx);
        let c01 = lerp(self.at(x0, y0, z1), self.at(x1, y0, z1), fx);
        let c11 = lerp(self.at(x0, y1, z1), self.at(x1, y1, z1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }
}

#[inline]
fn nearest_index(p: [f64; 3], dims: [usize; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let r = p[a].round();
        if r < 0.0 || r > (dims[a] - 1) as f64 {
            return None;
        }
        idx[a] = r as usize;
    }
    Some(idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]))
}

/// Visits every target voxel of slices `ks` with its continuous source coordinate.
fn for_each_source_point(m: &Matrix4<f64>, target: &Geometry, ks: Range<usize>, mut f: impl FnMut([f64; 3])) {
    let [nx, ny, _] = target.dims();
    let col = |c: usize| [m[(0, c)], m[(1, c)], m[(2, c)]];
    let ci = col(0);
    for k in ks {
        for j in 0..ny {
            let base = m * Vector4::new(0.0, j as f64, k as f64, 1.0);
            let mut p = [base[0], base[1], base[2]];
            for _ in 0..nx {
                f(p);
                for a in 0..3 {
                    p[a] += ci[a];
                }
            }
        }
    }
}

fn resample_typed<T: Sample>(
    data: &[T],
    src: &Geometry,
    target: &Geometry,
    ks: Range<usize>,
    method: Interpolation,
    m: &Matrix4<f64>,
) -> Vec<T> {
    let sampler = Sampler { data, dims: src.dims() };
    let [nx, ny, _] = target.dims();
    let mut out = Vec::with_capacity(nx * ny * ks.len());
    for_each_source_point(m, target, ks, |p| {
        out.push(match method {
            Interpolation::Trilinear => sampler.trilinear(p),
            Interpolation::Nearest => nearest_index(p, src.dims()).map_or(T::ZERO, |i| data[i]),
        })
    });
    out
}

fn resample_channel(
    data: &VoxelData,
    src: &Geometry,
    target: &Geometry,
    ks: Range<usize>,
    method: Interpolation,
    m: &Matrix4<f64>,
) -> VoxelData {
    match data {
        VoxelData::Float32(v) => VoxelData::Float32(resample_typed(v, src, target, ks, method, m)),
        VoxelData::Complex64(v) => VoxelData::Complex64(resample_typed(v, src, target, ks, method, m)),
        VoxelData::Int16(v) => match method {
            Interpolation::Nearest => {
                let [nx, ny, _] = target.dims();
                let mut out = Vec::with_capacity(nx * ny * ks.len());
                for_each_source_point(m, target, ks, |p| {
                    out.push(nearest_index(p, src.dims()).map_or(0, |i| v[i]));
                });
                VoxelData::Int16(out)
            }
            Interpolation::Trilinear => {
                let f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
                VoxelData::Float32(resample_typed(&f, src, target, ks, method, m))
            }
        },
    }
}

/// Resamples every channel of `src` onto `target`. Each output voxel takes the
/// value at its world position in the source grid; points outside the source
/// grid are filled with zero.
pub fn resample(src: &Volume, target: &Geometry, method: Interpolation) -> Result<Volume> {
    let m = voxel_map(&src.geometry, target)?;
    let ks = 0..target.dims()[2];
    let channels = src
        .channels
        .iter()
        .map(|c| Channel::new(c.name.clone(), resample_channel(&c.data, &src.geometry, target, ks.clone(), method, &m)))
        .collect();
    Ok(Volume { geometry: target.clone(), channels })
}

/// Resamples a float array onto the target slices `ks` only; the result holds
/// `nx * ny * ks.len()` voxels.
pub fn resample_slices(
    data: &[f32],
    src: &Geometry,
    target: &Geometry,
    ks: Range<usize>,
    method: Interpolation,
) -> Result<Vec<f32>> {
    let m = voxel_map(src, target)?;
    Ok(resample_typed(data, src, target, ks, method, &m))
}
