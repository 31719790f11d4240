//! Coverage checks for single-slice acquisitions: where the liver slice sits
//! within the liver, and how much pancreas the pancreas slice intersects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Geometry, Mask};

/// Liver slices outside this percent range are unreliable.
pub const LIVER_RELIABLE: [f64; 2] = [5.0, 95.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Organ {
    Liver,
    Pancreas,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementFlag {
    Ok,
    Unreliable,
    NoIntersection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementScore {
    pub organ: Organ,
    /// Liver only; 0 at the top liver slice, 100 at the bottom one. May fall outside [0, 100].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percent_location: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slice_k: Option<f64>,
    /// Pancreas only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub area_ml: Option<f64>,
    pub flag: PlacementFlag,
}

/// Continuous slice index of the single-slice centre in the target grid.
pub fn locate_slice(slice: &Geometry, target: &Geometry) -> Result<f64> {
    let d = slice.dims();
    let centre = slice.voxel_to_world([(d[0] as f64 - 1.0) / 2.0, (d[1] as f64 - 1.0) / 2.0, (d[2] as f64 - 1.0) / 2.0]);
    Ok(target.world_to_voxel(centre)?[2])
}

/// Percent position of slice index `k` between the superior (0%) and
/// inferior (100%) liver slices of `liver`. A liver one slice thick counts as
/// one slice of extent.
pub fn liver_percent_location(k: f64, liver: &Mask) -> Result<PlacementScore> {
    let g = &liver.geometry;
    let dims = g.dims();
    let plane = dims[0] * dims[1];
    let slices: Vec<usize> = (0..dims[2]).filter(|&s| liver.data[s * plane..(s + 1) * plane].iter().any(|&b| b)).collect();
    let (Some(&first), Some(&last)) = (slices.first(), slices.last()) else {
        return Err(Error::EmptyMask);
    };
    // Superior is the end with the larger world z.
    let z = |s: usize| g.voxel_to_world([0.0, 0.0, s as f64])[2];
    let (top, bottom) = if z(first) >= z(last) { (first as f64, last as f64) } else { (last as f64, first as f64) };
    let span = if top == bottom { if g.affine()[(2, 2)] < 0.0 { 1.0 } else { -1.0 } } else { bottom - top };
    let percent = 100.0 * (k - top) / span;
    Ok(PlacementScore {
        organ: Organ::Liver,
        percent_location: Some(percent),
        slice_k: Some(k),
        voxel_count: None,
        area_ml: None,
        flag: liver_flag(percent),
    })
}

pub fn liver_flag(percent: f64) -> PlacementFlag {
    if percent < LIVER_RELIABLE[0] || percent > LIVER_RELIABLE[1] {
        PlacementFlag::Unreliable
    } else {
        PlacementFlag::Ok
    }
}

/// Voxel census of a 2D pancreas mask. Only an empty mask is flagged.
pub fn pancreas_census(mask: &[bool], voxel_volume_ml: f64) -> PlacementScore {
    let count = mask.iter().filter(|&&b| b).count();
    PlacementScore {
        organ: Organ::Pancreas,
        percent_location: None,
        slice_k: None,
        voxel_count: Some(count),
        area_ml: Some(count as f64 * voxel_volume_ml),
        flag: if count == 0 { PlacementFlag::NoIntersection } else { PlacementFlag::Ok },
    }
}

/// Voxel volume of a grid in millilitres.
pub fn voxel_volume_ml(g: &Geometry) -> f64 {
    g.voxel_volume() / 1000.0
}
