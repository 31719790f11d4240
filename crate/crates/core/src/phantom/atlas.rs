//! Synthetic atlas bank: whole-body masks of the analytic body at varied
//! height and build, with joint annotations.

use serde::{Deserialize, Serialize};

use super::body::{BodyModel, Shape};
use crate::error::{Error, Result};
use crate::landmarks::{Atlas, Joint, Sex};
use crate::rng::SplitMix64;
use crate::volume::Geometry;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AtlasBankConfig {
    pub seed: u64,
    /// Bank size; females take the odd one out.
    pub count: usize,
    pub height_range_mm: [f64; 2],
    /// Standard deviation of the annotation error per coordinate.
    pub jitter_mm: f64,
    pub voxel_mm: f64,
}

impl Default for AtlasBankConfig {
    fn default() -> Self {
        Self { seed: 7, count: 70, height_range_mm: [1550.0, 1950.0], jitter_mm: 3.0, voxel_mm: 8.0 }
    }
}

/// One atlas of the analytic body. The vertex sits at world z = 0.
pub fn make_atlas(id: &str, sex: Sex, height_mm: f64, lateral_scale: f64, jitter_mm: f64, voxel_mm: f64, rng: &mut SplitMix64) -> Result<Atlas> {
    let scale = height_mm / super::body::REFERENCE_HEIGHT_MM;
    let model = BodyModel { shape: Shape::Anatomical, scale, lateral_scale, ..BodyModel::reference() };
    let half = [264.0, 160.0];
    let z_bottom = -(1700.0 * scale + 16.0);
    let dims = [
        (2.0 * half[0] / voxel_mm).ceil() as usize + 1,
        (2.0 * half[1] / voxel_mm).ceil() as usize + 1,
        ((16.0 - z_bottom) / voxel_mm).ceil() as usize + 1,
    ];
    let g = Geometry::axis_aligned(dims, [voxel_mm; 3], [-half[0], -half[1], z_bottom])?;
    let data = (0..g.voxel_count())
        .map(|idx| {
            let c = g.coords(idx);
            let p = g.voxel_to_world([c[0] as f64, c[1] as f64, c[2] as f64]);
            model.may_contain(p) && model.in_body(p)
        })
        .collect();
    let landmarks = Joint::ALL
        .iter()
        .map(|&j| {
            let p = model.joint_world(j);
            (j, p.map(|v| v + jitter_mm * rng.normal()))
        })
        .collect();
    let atlas = Atlas { id: id.to_string(), sex, height_mm, landmarks, body_mask: crate::volume::Mask::new(g, data) };
    atlas.validate()?;
    Ok(atlas)
}

/// Balanced bank of `n` atlases with the default build and annotation jitter.
pub fn make_atlas_bank(n: usize, seed: u64) -> Result<Vec<Atlas>> {
    make_atlas_bank_with(&AtlasBankConfig { seed, count: n, ..Default::default() })
}

/// Female atlases first, then male; ids `atlas_f00`, `atlas_m00`, ...
pub fn make_atlas_bank_with(cfg: &AtlasBankConfig) -> Result<Vec<Atlas>> {
    if cfg.count < 2 {
        return Err(Error::InvalidConfig("an atlas bank needs at least two atlases".into()));
    }
    let mut bank = Vec::with_capacity(cfg.count);
    let females = cfg.count - cfg.count / 2;
    for (s, sex) in [Sex::F, Sex::M].into_iter().enumerate() {
        let n = if sex == Sex::F { females } else { cfg.count / 2 };
        for i in 0..n {
            let mut rng = SplitMix64::derive(cfg.seed, (s * 10_000 + i) as u64);
            let height = rng.range(cfg.height_range_mm[0], cfg.height_range_mm[1]);
            let lateral = match sex {
                Sex::F => rng.range(0.94, 1.0),
                Sex::M => rng.range(1.04, 1.10),
            };
            let id = format!("atlas_{}{i:02}", if sex == Sex::F { 'f' } else { 'm' });
            bank.push(make_atlas(&id, sex, height, lateral, cfg.jitter_mm, cfg.voxel_mm, &mut rng)?);
        }
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bank_is_valid_and_deterministic() {
        let a = make_atlas_bank(4, 7).unwrap();
        let b = make_atlas_bank(4, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        for atlas in &a {
            assert!((1550.0..1950.0).contains(&atlas.height_mm));
            // Roughly body volume over voxel volume.
            assert!(atlas.body_mask.count() > 50_000 / 8, "{}", atlas.body_mask.count());
        }
        assert_ne!(a, make_atlas_bank(4, 8).unwrap());
        assert!(make_atlas_bank(1, 7).is_err());
    }

    #[test]
    fn bank_is_balanced_by_sex() {
        let cfg = AtlasBankConfig { count: 7, voxel_mm: 32.0, ..Default::default() };
        let bank = make_atlas_bank_with(&cfg).unwrap();
        assert_eq!(bank.iter().filter(|a| a.sex == Sex::F).count(), 4);
        assert_eq!(bank.iter().filter(|a| a.sex == Sex::M).count(), 3);
    }
}
