//! Multiplicative bias-field estimation in the log domain.
//!
//! The image is block-averaged onto a coarse grid, where the low-frequency part
//! of the current corrected log image is extracted by masked Gaussian smoothing
//! and projected onto a third-order polynomial. The accumulated polynomial is
//! then evaluated analytically at full resolution.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgproc::{histogram_quantile, masked_gaussian_3d, FWHM_TO_SIGMA};
use crate::volume::{Channel, Geometry, Mask, Volume, VoxelData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasConfig {
    pub fwhm_mm: f64,
    pub max_iterations: usize,
    /// Stop once the RMS of the log-field update drops below this.
    pub tolerance: f64,
    /// Edge length of the averaging blocks of the coarse grid.
    pub coarse_mm: f64,
    /// Default mask threshold as a fraction of the 98th intensity percentile.
    pub mask_fraction: f64,
}

impl Default for BiasConfig {
    fn default() -> Self {
        Self { fwhm_mm: 60.0, max_iterations: 20, tolerance: 1e-3, coarse_mm: 9.0, mask_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    /// Strictly positive gain, one float channel.
    pub field: Volume,
    pub mask: Mask,
    pub iterations: usize,
}

impl BiasField {
    pub fn gain(&self) -> &[f32] {
        self.field.data().expect("bias field is float")
    }
}

/// Voxels brighter than `fraction` of the 98th percentile of the positive voxels.
pub fn default_mask(data: &[f32], geometry: &Geometry, fraction: f64) -> Mask {
    let p98 = histogram_quantile(data, 0.98);
    let thr = (fraction * p98 as f64) as f32;
    Mask::new(geometry.clone(), data.iter().map(|&v| v > thr && v > 0.0).collect())
}

/// Monomial exponents of a trivariate polynomial of total degree <= 3, with
/// the degree along each axis capped by `max_axis`.
fn monomials(max_axis: [u32; 3]) -> Vec<[u32; 3]> {
    let mut out = Vec::new();
    for d in 0..=3u32 {
        for p in (0..=d).rev() {
            for q in (0..=d - p).rev() {
                let e = [p, q, d - p - q];
                if (0..3).all(|a| e[a] <= max_axis[a]) {
                    out.push(e);
                }
            }
        }
    }
    out
}

/// Affine normalization of voxel coordinates onto [-1, 1] over the mask bounds.
#[derive(Clone, Copy)]
struct Normalizer {
    center: [f64; 3],
    half: [f64; 3],
}

impl Normalizer {
    fn from_mask(mask: &Mask) -> Self {
        let dims = mask.geometry.dims();
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for (idx, _) in mask.data.iter().enumerate().filter(|(_, &b)| b) {
            let c = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let center = [0, 1, 2].map(|a| 0.5 * (lo[a] + hi[a]) as f64);
        let half = [0, 1, 2].map(|a| (0.5 * (hi[a] - lo[a]) as f64).max(0.5));
        Self { center, half }
    }

    #[inline]
    fn apply(&self, a: usize, x: f64) -> f64 {
        ((x - self.center[a]) / self.half[a]).clamp(-1.25, 1.25)
    }
}

fn powers(x: f64) -> [f64; 4] {
    [1.0, x, x * x, x * x * x]
}

struct Coarse {
    dims: [usize; 3],
    /// Mean log intensity per block (0 where the block has no mask voxels).
    log: Vec<f64>,
    /// Fraction of masked voxels per block.
    weight: Vec<f64>,
    /// Block centres in full-resolution voxel coordinates.
    centers: [Vec<f64>; 3],
}

fn block_sizes(geometry: &Geometry, coarse_mm: f64) -> [usize; 3] {
    let sp = geometry.spacing();
    [0, 1, 2].map(|a| ((coarse_mm / sp[a]).round() as usize).max(1))
}

fn downsample(data: &[f32], mask: &Mask, block: [usize; 3]) -> Coarse {
    let dims = mask.geometry.dims();
    let cd = [0, 1, 2].map(|a| dims[a].div_ceil(block[a]));
    let n = cd[0] * cd[1] * cd[2];
    let mut sum = vec![0.0f64; n];
    let mut count = vec![0usize; n];
    let mut total = vec![0usize; n];
    for k in 0..dims[2] {
        let bk = k / block[2];
        for j in 0..dims[1] {
            let bj = j / block[1];
            let row = dims[0] * (j + dims[1] * k);
            for i in 0..dims[0] {
                let b = i / block[0] + cd[0] * (bj + cd[1] * bk);
                total[b] += 1;
                let v = data[row + i];
                if mask.data[row + i] && v > 0.0 {
                    sum[b] += (v as f64).ln();
                    count[b] += 1;
                }
            }
        }
    }
    let log = sum.iter().zip(&count).map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let weight = count.iter().zip(&total).map(|(&c, &t)| c as f64 / t as f64).collect();
    let centers = [0, 1, 2].map(|a| {
        (0..cd[a])
            .map(|b| {
                let lo = b * block[a];
                let hi = ((b + 1) * block[a]).min(dims[a]);
                0.5 * (lo + hi - 1) as f64
            })
            .collect()
    });
    Coarse { dims: cd, log, weight, centers }
}

/// Weighted least-squares polynomial fit of `values` on the coarse grid.
fn fit_polynomial(coarse: &Coarse, values: &[f64], norm: Normalizer, terms: &[[u32; 3]]) -> Result<Vec<f64>> {
    let m = terms.len();
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DVector::<f64>::zeros(m);
    let mut row = vec![0.0; m];
    let cd = coarse.dims;
    for k in 0..cd[2] {
        let pz = powers(norm.apply(2, coarse.centers[2][k]));
        for j in 0..cd[1] {
            let py = powers(norm.apply(1, coarse.centers[1][j]));
            for i in 0..cd[0] {
                let b = i + cd[0] * (j + cd[1] * k);
                let w = coarse.weight[b];
                if w <= 0.0 {
                    continue;
                }
                let px = powers(norm.apply(0, coarse.centers[0][i]));
                for (t, e) in terms.iter().enumerate() {
                    row[t] = px[e[0] as usize] * py[e[1] as usize] * pz[e[2] as usize];
                }
                for r in 0..m {
                    atb[r] += w * row[r] * values[b];
                    for c in r..m {
                        ata[(r, c)] += w * row[r] * row[c];
                    }
                }
            }
        }
    }
    for r in 0..m {
        for c in 0..r {
            ata[(r, c)] = ata[(c, r)];
        }
    }
    // Degenerate axes (a single slice, say) make the system rank deficient;
    // the pseudo-inverse picks the minimum-norm solution.
    let svd = ata.svd(true, true);
    let coef = svd.solve(&atb, 1e-10).map_err(|e| Error::InvalidConfig(format!("bias fit: {e}")))?;
    Ok(coef.iter().copied().collect())
}

fn eval_poly(coef: &[f64], terms: &[[u32; 3]], px: &[f64; 4], py: &[f64; 4], pz: &[f64; 4]) -> f64 {
    coef.iter().zip(terms).map(|(c, e)| c * px[e[0] as usize] * py[e[1] as usize] * pz[e[2] as usize]).sum()
}

/// Estimates a smooth multiplicative gain with unit geometric mean inside `mask`.
pub fn estimate_bias_field(data: &[f32], mask: &Mask, cfg: &BiasConfig) -> Result<BiasField> {
    let geometry = &mask.geometry;
    if data.len() != geometry.voxel_count() {
        return Err(Error::GeometryMismatch("bias input and mask differ in size".into()));
    }
    if !mask.data.iter().zip(data).any(|(&m, &v)| m && v > 0.0) {
        return Err(Error::EmptyMask);
    }
    let block = block_sizes(geometry, cfg.coarse_mm);
    let coarse = downsample(data, mask, block);
    let norm = Normalizer::from_mask(mask);
    // A short axis cannot support a cubic: with two samples x^2 is constant
    // and would alias the intercept.
    let terms = monomials(coarse.dims.map(|n| (n.saturating_sub(1)).min(3) as u32));
    let sp = geometry.spacing();
    let sigma = [0, 1, 2].map(|a| cfg.fwhm_mm * FWHM_TO_SIGMA / (sp[a] * block[a] as f64));

    let mut coef = vec![0.0; terms.len()];
    let n = coarse.log.len();
    let mut field_log = vec![0.0; n];
    let mut iterations = 0;
    for _ in 0..cfg.max_iterations {
        iterations += 1;
        let corrected: Vec<f64> = (0..n).map(|b| coarse.log[b] - field_log[b]).collect();
        let smooth = masked_gaussian_3d(&corrected, &coarse.weight, coarse.dims, sigma);
        let update = fit_polynomial(&coarse, &smooth, norm, &terms)?;
        let mut sq = 0.0;
        let mut wsum = 0.0;
        let mut delta = vec![0.0; n];
        let cd = coarse.dims;
        for k in 0..cd[2] {
            let pz = powers(norm.apply(2, coarse.centers[2][k]));
            for j in 0..cd[1] {
                let py = powers(norm.apply(1, coarse.centers[1][j]));
                for i in 0..cd[0] {
                    let b = i + cd[0] * (j + cd[1] * k);
                    let px = powers(norm.apply(0, coarse.centers[0][i]));
                    delta[b] = eval_poly(&update, &terms, &px, &py, &pz);
                }
            }
        }
        // The constant term only carries the tissue level; the field is
        // renormalized at the end, so measure the update without it.
        let wmean: f64 = (0..n).map(|b| coarse.weight[b] * delta[b]).sum::<f64>()
            / coarse.weight.iter().sum::<f64>();
        for b in 0..n {
            field_log[b] += delta[b] - wmean;
            sq += coarse.weight[b] * (delta[b] - wmean).powi(2);
            wsum += coarse.weight[b];
        }
        for (c, u) in coef.iter_mut().zip(&update) {
            *c += u;
        }
        coef[0] -= wmean;
        if (sq / wsum).sqrt() < cfg.tolerance {
            break;
        }
    }

    let dims = geometry.dims();
    let mut log_full = vec![0.0f64; data.len()];
    let mut mask_sum = 0.0;
    let mut mask_n = 0usize;
    let pxs: Vec<[f64; 4]> = (0..dims[0]).map(|i| powers(norm.apply(0, i as f64))).collect();
    for k in 0..dims[2] {
        let pz = powers(norm.apply(2, k as f64));
        for j in 0..dims[1] {
            let py = powers(norm.apply(1, j as f64));
            let row = dims[0] * (j + dims[1] * k);
            for (i, px) in pxs.iter().enumerate() {
                let v = eval_poly(&coef, &terms, px, &py, &pz);
                log_full[row + i] = v;
                if mask.data[row + i] {
                    mask_sum += v;
                    mask_n += 1;
                }
            }
        }
    }
    let offset = mask_sum / mask_n as f64;
    let field: Vec<f32> = log_full.iter().map(|v| (v - offset).exp() as f32).collect();
    Ok(BiasField { field: Volume::from_f32(geometry.clone(), field), mask: mask.clone(), iterations })
}

/// Divides `data` by the gain inside the field's mask.
pub fn apply_in_place(data: &mut [f32], field: &BiasField) {
    for ((v, &g), &m) in data.iter_mut().zip(field.gain()).zip(&field.mask.data) {
        if m {
            *v /= g;
        }
    }
}

/// Voxelwise division by the field inside its mask, identity outside. Every
/// channel is corrected; integer channels are promoted to float.
pub fn apply_bias_field(vol: &Volume, field: &BiasField) -> Result<Volume> {
    if !vol.geometry.same_grid(&field.field.geometry, 1e-6) {
        return Err(Error::GeometryMismatch("volume and bias field grids differ".into()));
    }
    let gain = field.gain();
    let channels = vol
        .channels
        .iter()
        .map(|c| {
            let data = match &c.data {
                VoxelData::Complex64(v) => VoxelData::Complex64(
                    v.iter()
                        .zip(gain)
                        .zip(&field.mask.data)
                        .map(|((&z, &g), &m)| if m { z / g } else { z })
                        .collect(),
                ),
                other => {
                    let mut f = other.to_f32();
                    apply_in_place(&mut f, field);
                    VoxelData::Float32(f)
                }
            };
            Channel::new(c.name.clone(), data)
        })
        .collect();
    Ok(Volume { geometry: vol.geometry.clone(), channels })
}
