//! Merging of the six overlapping Dixon series into one neck-to-knee volume.
//!
//! Each series is bias-corrected on its in-phase channel (the field is applied
//! to all four channels), resampled onto the fixed target grid and blended
//! with a raised-cosine ramp across each overlap. A final bias pass runs on
//! the blended in-phase volume.
//!
//! Series are processed one at a time through a loader so only a single
//! series needs to be resident next to the output volume.

use serde::{Deserialize, Serialize};

use crate::bias::{apply_in_place, default_mask, estimate_bias_field, BiasConfig};
use crate::error::{Error, Result};
use crate::volume::{geometry_extent, resample_slices, Channel, Extent, Geometry, Interpolation, Volume, VoxelData};

/// Dixon channel names in output order.
pub const DIXON_CHANNELS: [&str; 4] = ["in", "opp", "fat", "water"];
pub const SERIES_COUNT: usize = 6;

/// One Dixon series: a volume holding the four named channels.
#[derive(Debug, Clone, PartialEq)]
pub struct DixonSeries {
    pub name: String,
    pub volume: Volume,
}

impl DixonSeries {
    pub fn new(name: impl Into<String>, volume: Volume) -> Self {
        Self { name: name.into(), volume }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.volume.geometry
    }

    /// Float copy of a channel.
    pub fn channel_f32(&self, channel: &str) -> Result<Vec<f32>> {
        self.volume.channel(channel).map(|c| c.data.to_f32()).ok_or_else(|| Error::MissingChannel {
            series: self.name.clone(),
            channel: channel.to_string(),
        })
    }

    pub fn check_channels(&self) -> Result<()> {
        for ch in DIXON_CHANNELS {
            if self.volume.channel(ch).is_none() {
                return Err(Error::MissingChannel { series: self.name.clone(), channel: ch.to_string() });
            }
        }
        Ok(())
    }

    pub fn header(&self) -> SeriesHeader {
        SeriesHeader {
            name: self.name.clone(),
            geometry: self.volume.geometry.clone(),
            channels: self.volume.channels.iter().map(|c| c.name.clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DixonSubject {
    pub series: Vec<DixonSeries>,
}

impl DixonSubject {
    /// Indices of the series ordered superior to inferior by world z.
    pub fn order(&self) -> Vec<usize> {
        order_by_z(&self.series.iter().map(|s| s.header()).collect::<Vec<_>>())
    }
}

/// What assembly needs to know about a series before loading its voxels.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesHeader {
    pub name: String,
    pub geometry: Geometry,
    pub channels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub bias: BiasConfig,
    /// Run the second bias pass on the blended in-phase volume.
    pub rebias: bool,
}

impl Default for AssemblyConfig {
    fn default() -> Self {
        Self { dims: [224, 174, 370], spacing: [2.232, 2.232, 3.0], bias: BiasConfig::default(), rebias: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSource {
    pub series: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceProvenance {
    pub k: usize,
    pub sources: Vec<SliceSource>,
}

/// Target slices `k_start..=k_end` covered by one series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSpan {
    pub series: String,
    pub k_start: usize,
    pub k_end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledVolume {
    /// Channels `in`, `opp`, `fat`, `water` on the target grid.
    pub volume: Volume,
    pub provenance: Vec<SliceProvenance>,
    /// Coverage per series, superior first.
    pub spans: Vec<SeriesSpan>,
}

impl AssembledVolume {
    pub fn channel(&self, name: &str) -> &[f32] {
        match self.volume.channel(name).map(|c| &c.data) {
            Some(VoxelData::Float32(v)) => v,
            _ => panic!("assembled volume lacks float channel `{name}`"),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.volume.geometry.dims()
    }
}

/// Raised-cosine weights of the superior series across `n` overlap slices,
/// from 1 at the superior end to 0 at the inferior end.
pub fn blend_weights(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5],
        _ => (0..n)
            .map(|k| 0.5 * (1.0 + (std::f64::consts::PI * k as f64 / (n - 1) as f64).cos()))
            .collect(),
    }
}

fn z_center(g: &Geometry) -> f64 {
    geometry_extent(g).center()[2]
}

/// Permutation of `headers` from superior to inferior; ties broken by name.
pub fn order_by_z(headers: &[SeriesHeader]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..headers.len()).collect();
    idx.sort_by(|&a, &b| {
        z_center(&headers[b].geometry)
            .total_cmp(&z_center(&headers[a].geometry))
            .then_with(|| headers[a].name.cmp(&headers[b].name))
    });
    idx
}

/// Validates the series inventory and returns the superior-to-inferior order.
pub fn check_inventory(headers: &[SeriesHeader]) -> Result<Vec<usize>> {
    if headers.len() < SERIES_COUNT {
        return Err(Error::MissingSeries(headers.len()));
    }
    if headers.len() > SERIES_COUNT {
        return Err(Error::NonStandardAcquisition(headers.len()));
    }
    for h in headers {
        for ch in DIXON_CHANNELS {
            if !h.channels.iter().any(|c| c == ch) {
                return Err(Error::MissingChannel { series: h.name.clone(), channel: ch.to_string() });
            }
        }
    }
    let order = order_by_z(headers);
    for w in order.windows(2) {
        let (u, l) = (&headers[w[0]], &headers[w[1]]);
        let eu = geometry_extent(&u.geometry);
        let el = geometry_extent(&l.geometry);
        if el.max[2] - eu.min[2] <= 0.0 {
            return Err(Error::NoOverlap { upper: u.name.clone(), lower: l.name.clone() });
        }
    }
    Ok(order)
}

/// Target grid: x/y from the second series, top slice at the superior-most
/// voxel centre, slice index increasing inferiorly.
pub fn target_geometry(headers: &[SeriesHeader], order: &[usize], cfg: &AssemblyConfig) -> Result<Geometry> {
    let top = geometry_extent(&headers[order[0]].geometry).max[2];
    let xy_ref = &headers[order[1.min(order.len() - 1)]].geometry;
    let origin = xy_ref.voxel_to_world([0.0; 3]);
    let mut affine = nalgebra::Matrix4::identity();
    affine[(0, 0)] = cfg.spacing[0];
    affine[(1, 1)] = cfg.spacing[1];
    affine[(2, 2)] = -cfg.spacing[2];
    affine[(0, 3)] = origin[0];
    affine[(1, 3)] = origin[1];
    affine[(2, 3)] = top;
    Geometry::new(cfg.dims, affine)
}

fn series_span(target: &Geometry, ext: &Extent) -> Option<(usize, usize)> {
    let nz = target.dims()[2] as f64;
    let top = target.affine()[(2, 3)];
    let dz = -target.affine()[(2, 2)];
    let k_hi_z = (top - ext.max[2]) / dz;
    let k_lo_z = (top - ext.min[2]) / dz;
    let lo = (k_hi_z - 1e-6).ceil().max(0.0);
    let hi = (k_lo_z + 1e-6).floor().min(nz - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Per-slice (sorted series index, weight) lists for the target grid.
fn slice_weights(spans: &[Option<(usize, usize)>], nz: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let mut out = Vec::with_capacity(nz);
    for k in 0..nz {
        let covering: Vec<usize> =
            (0..spans.len()).filter(|&s| spans[s].is_some_and(|(lo, hi)| lo <= k && k <= hi)).collect();
        let entry = match covering.as_slice() {
            [] => {
                let nearest = (0..spans.len())
                    .filter_map(|s| spans[s].map(|(lo, hi)| (s, if k < lo { lo - k } else { k - hi })))
                    .min_by_key(|&(s, d)| (d, s))
                    .map(|(s, _)| s)
                    .unwrap_or(0);
                vec![(nearest, 1.0)]
            }
            [s] => vec![(*s, 1.0)],
            [u, l] => {
                let start = spans[*l].unwrap().0;
                let end = spans[*u].unwrap().1;
                let w = blend_weights(end - start + 1)[k - start];
                vec![(*u, w), (*l, 1.0 - w)]
            }
            _ => return Err(Error::InvalidGeometry(format!("slice {k} covered by more than two series"))),
        };
        out.push(entry);
    }
    Ok(out)
}

/// Assembles an in-memory subject.
pub fn assemble(subject: &DixonSubject, cfg: &AssemblyConfig) -> Result<AssembledVolume> {
    let headers: Vec<SeriesHeader> = subject.series.iter().map(|s| s.header()).collect();
    assemble_with(&headers, |i| Ok(subject.series[i].clone()), cfg)
}

/// Assembles series produced on demand by `load(index into headers)`.
pub fn assemble_with(
    headers: &[SeriesHeader],
    mut load: impl FnMut(usize) -> Result<DixonSeries>,
    cfg: &AssemblyConfig,
) -> Result<AssembledVolume> {
    let order = check_inventory(headers)?;
    let target = target_geometry(headers, &order, cfg)?;
    let [nx, ny, nz] = target.dims();
    let plane = nx * ny;
    let spans: Vec<Option<(usize, usize)>> =
        order.iter().map(|&i| series_span(&target, &geometry_extent(&headers[i].geometry))).collect();
    let weights = slice_weights(&spans, nz)?;

    let mut out: Vec<Vec<f32>> = (0..4).map(|_| vec![0.0f32; target.voxel_count()]).collect();
    for (rank, &idx) in order.iter().enumerate() {
        let ks: Vec<(usize, f64)> =
            weights.iter().enumerate().filter_map(|(k, e)| e.iter().find(|(s, _)| *s == rank).map(|&(_, w)| (k, w))).collect();
        let Some(&(k0, _)) = ks.first() else { continue };
        let k1 = ks.last().unwrap().0 + 1;
        let series = load(idx)?;
        series.check_channels()?;
        if !series.geometry().same_grid(&headers[idx].geometry, 1e-6) {
            return Err(Error::GeometryMismatch(format!("series {} changed geometry on load", series.name)));
        }
        let inphase = series.channel_f32("in")?;
        let mask = default_mask(&inphase, series.geometry(), cfg.bias.mask_fraction);
        let field = estimate_bias_field(&inphase, &mask, &cfg.bias)?;
        drop(inphase);
        for (c, name) in DIXON_CHANNELS.iter().enumerate() {
            let mut data = series.channel_f32(name)?;
            apply_in_place(&mut data, &field);
            let resampled = resample_slices(&data, series.geometry(), &target, k0..k1, Interpolation::Trilinear)?;
            for &(k, w) in &ks {
                let src = &resampled[(k - k0) * plane..(k - k0 + 1) * plane];
                let dst = &mut out[c][k * plane..(k + 1) * plane];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += (w as f32) * s;
                }
            }
        }
    }

    if cfg.rebias {
        let mask = default_mask(&out[0], &target, cfg.bias.mask_fraction);
        if !mask.is_empty() {
            let field = estimate_bias_field(&out[0], &mask, &cfg.bias)?;
            for ch in out.iter_mut() {
                apply_in_place(ch, &field);
            }
        }
    }

    let names: Vec<&str> = order.iter().map(|&i| headers[i].name.as_str()).collect();
    let provenance = weights
        .iter()
        .enumerate()
        .map(|(k, e)| SliceProvenance {
            k,
            sources: e.iter().map(|&(s, w)| SliceSource { series: names[s].to_string(), weight: w }).collect(),
        })
        .collect();
    let spans = spans
        .iter()
        .enumerate()
        .filter_map(|(s, sp)| sp.map(|(a, b)| SeriesSpan { series: names[s].to_string(), k_start: a, k_end: b }))
        .collect();
    let channels = DIXON_CHANNELS.iter().zip(out).map(|(n, d)| Channel::new(*n, VoxelData::Float32(d))).collect();
    Ok(AssembledVolume { volume: Volume { geometry: target, channels }, provenance, spans })
}
