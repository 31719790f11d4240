//! Fat fraction and R2* from complex multiecho data, iron conversion and
//! protocol harmonization.
//!
//! The signal model is a multi-peak fat spectrum with a common R2* decay and a
//! field offset. Each voxel is fitted by Levenberg-Marquardt started in both the
//! water- and fat-dominant basins; a second pass re-fits every voxel with the
//! spatially smoothed field map held fixed.

use nalgebra::{DMatrix, DVector, Matrix5, Vector5};
use num_complex::{Complex32, Complex64};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};
use crate::imgproc::{masked_gaussian_3d, quantile};
use crate::volume::{Channel, EchoSeries, Geometry, Mask, Volume, VoxelData};

/// Proton resonance frequency at 1.5 T.
pub const LARMOR_MHZ: f64 = 63.87;
pub const MIN_ECHOES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FatPeak {
    pub relative_frequency_ppm: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FatSpectrum {
    pub peaks: Vec<FatPeak>,
}

impl Default for FatSpectrum {
    /// Six-peak liver spectrum. The tabulated amplitudes add up to 0.999 and
    /// are rescaled to unit sum.
    fn default() -> Self {
        let ppm = [-3.80, -3.40, -2.60, -1.94, -0.39, 0.60];
        let amp = [0.087, 0.693, 0.128, 0.004, 0.039, 0.048];
        let total: f64 = amp.iter().sum();
        Self {
            peaks: ppm.iter().zip(amp).map(|(&p, a)| FatPeak { relative_frequency_ppm: p, amplitude: a / total }).collect(),
        }
    }
}

impl FatSpectrum {
    pub fn single(ppm: f64) -> Self {
        Self { peaks: vec![FatPeak { relative_frequency_ppm: ppm, amplitude: 1.0 }] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.peaks.is_empty() || self.peaks.iter().any(|p| !(p.amplitude > 0.0) || !p.relative_frequency_ppm.is_finite()) {
            return Err(Error::InvalidConfig("fat spectrum needs positive peak amplitudes".into()));
        }
        let sum: f64 = self.peaks.iter().map(|p| p.amplitude).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("fat peak amplitudes sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Net fat phasor at time `t_ms`.
    pub fn phasor(&self, t_ms: f64, larmor_mhz: f64) -> Complex64 {
        let t = t_ms * 1e-3;
        self.peaks
            .iter()
            .map(|p| p.amplitude * Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * p.relative_frequency_ppm * larmor_mhz * t))
            .sum()
    }
}

/// Parameters of the signal model. Amplitudes in signal units, R2* in s⁻¹,
/// field offset in Hz, phase in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    pub water: f64,
    pub fat: f64,
    pub r2star: f64,
    pub field_offset: f64,
    pub phase0: f64,
}

impl SignalParams {
    fn to_vec(self) -> Vector5<f64> {
        Vector5::new(self.water, self.fat, self.r2star, self.field_offset, self.phase0)
    }

    fn from_vec(v: &Vector5<f64>) -> Self {
        Self { water: v[0], fat: v[1], r2star: v[2], field_offset: v[3], phase0: v[4] }
    }
}

/// Echo times with the precomputed fat phasor at each echo.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalModel {
    t_s: Vec<f64>,
    fat: Vec<Complex64>,
}

impl SignalModel {
    pub fn new(spectrum: &FatSpectrum, echo_times_ms: &[f64], larmor_mhz: f64) -> Self {
        Self {
            t_s: echo_times_ms.iter().map(|t| t * 1e-3).collect(),
            fat: echo_times_ms.iter().map(|&t| spectrum.phasor(t, larmor_mhz)).collect(),
        }
    }

    pub fn echoes(&self) -> usize {
        self.t_s.len()
    }

    /// Smallest echo spacing in seconds.
    fn min_spacing(&self) -> f64 {
        self.t_s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }

    pub fn evaluate(&self, p: &SignalParams) -> Vec<Complex64> {
        let rot = Complex64::from_polar(1.0, p.phase0);
        self.t_s
            .iter()
            .zip(&self.fat)
            .map(|(&t, &c)| rot * (p.water + p.fat * c) * decay(p.r2star, p.field_offset, t))
            .collect()
    }

    /// Residuals (model - observed) stacked as real then imaginary parts,
    /// and the Jacobian with respect to (W, F, R2*, field offset, phase).
    fn residual_jacobian(&self, p: &SignalParams, obs: &[Complex64], r: &mut [f64], jac: &mut [[f64; 5]]) {
        let n = self.t_s.len();
        let rot = Complex64::from_polar(1.0, p.phase0);
        let two_pi = 2.0 * std::f64::consts::PI;
        for e in 0..n {
            let t = self.t_s[e];
            let d = rot * decay(p.r2star, p.field_offset, t);
            let m = (p.water + p.fat * self.fat[e]) * d;
            let diff = m - obs[e];
            r[e] = diff.re;
            r[n + e] = diff.im;
            let cols = [d, self.fat[e] * d, -t * m, Complex64::new(0.0, two_pi * t) * m, Complex64::new(0.0, 1.0) * m];
            for (c, v) in cols.iter().enumerate() {
                jac[e][c] = v.re;
                jac[n + e][c] = v.im;
            }
        }
    }

    fn cost(&self, p: &SignalParams, obs: &[Complex64]) -> f64 {
        self.evaluate(p).iter().zip(obs).map(|(m, o)| (m - o).norm_sqr()).sum()
    }
}

fn decay(r2star: f64, field_offset: f64, t: f64) -> Complex64 {
    Complex64::from_polar((-r2star * t).exp(), 2.0 * std::f64::consts::PI * field_offset * t)
}

/// Noiseless model signal.
pub fn forward_signal(p: &SignalParams, spectrum: &FatSpectrum, echo_times_ms: &[f64]) -> Vec<Complex64> {
    SignalModel::new(spectrum, echo_times_ms, LARMOR_MHZ).evaluate(p)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub spectrum: FatSpectrum,
    pub larmor_mhz: f64,
    pub r2star_max: f64,
    /// Smoothing of the field map before the fixed-field pass.
    pub field_fwhm_mm: f64,
    /// Raw phase units per pi when combining magnitude and phase images.
    pub phase_scale: f64,
    /// Fits whose residual norm exceeds this fraction of the signal norm are flagged.
    pub max_relative_residual: f64,
    pub max_iterations: usize,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            spectrum: FatSpectrum::default(),
            larmor_mhz: LARMOR_MHZ,
            r2star_max: 500.0,
            field_fwhm_mm: 15.0,
            phase_scale: 4096.0,
            max_relative_residual: 0.25,
            max_iterations: 200,
        }
    }
}

impl QuantConfig {
    pub fn model(&self, echo_times_ms: &[f64]) -> SignalModel {
        SignalModel::new(&self.spectrum, echo_times_ms, self.larmor_mhz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FatFitResult {
    pub pdff: f64,
    pub r2star: f64,
    pub water_amp: f64,
    pub fat_amp: f64,
    pub field_offset: f64,
    pub phase0: f64,
    pub residual_norm: f64,
    /// Residual too large for the model to explain the signal.
    pub diverged: bool,
}

impl FatFitResult {
    fn from_params(p: &SignalParams, cost: f64, signal_norm: f64, cfg: &QuantConfig) -> Self {
        let total = p.water + p.fat;
        let residual_norm = cost.sqrt();
        Self {
            pdff: if total > 0.0 { (100.0 * p.fat / total).clamp(0.0, 100.0) } else { 0.0 },
            r2star: p.r2star,
            water_amp: p.water,
            fat_amp: p.fat,
            field_offset: p.field_offset,
            phase0: p.phase0,
            residual_norm,
            diverged: !(signal_norm > 0.0) || residual_norm > cfg.max_relative_residual * signal_norm,
        }
    }

    pub fn params(&self) -> SignalParams {
        SignalParams { water: self.water_amp, fat: self.fat_amp, r2star: self.r2star, field_offset: self.field_offset, phase0: self.phase0 }
    }
}

struct Bounds {
    lo: Vector5<f64>,
    hi: Vector5<f64>,
}

impl Bounds {
    fn new(model: &SignalModel, cfg: &QuantConfig) -> Self {
        let psi = 0.5 / model.min_spacing();
        Self {
            lo: Vector5::new(0.0, 0.0, 0.0, -psi, f64::NEG_INFINITY),
            hi: Vector5::new(f64::INFINITY, f64::INFINITY, cfg.r2star_max, psi, f64::INFINITY),
        }
    }

    fn clamp(&self, v: &mut Vector5<f64>) {
        for i in 0..5 {
            v[i] = v[i].clamp(self.lo[i], self.hi[i]);
        }
    }
}

/// Bounded Levenberg-Marquardt over the parameters marked `free`.
fn levenberg_marquardt(
    model: &SignalModel,
    obs: &[Complex64],
    start: SignalParams,
    free: [bool; 5],
    bounds: &Bounds,
    max_iterations: usize,
) -> (SignalParams, f64) {
    let n = 2 * model.echoes();
    let mut r = vec![0.0; n];
    let mut jac = vec![[0.0; 5]; n];
    let mut x = start.to_vec();
    bounds.clamp(&mut x);
    let mut cost = model.cost(&SignalParams::from_vec(&x), obs);
    let scale: f64 = obs.iter().map(|o| o.norm_sqr()).sum::<f64>().max(1e-300);
    let mut lambda = 1e-3;
    for _ in 0..max_iterations {
        if cost <= 1e-24 * scale {
            break;
        }
        model.residual_jacobian(&SignalParams::from_vec(&x), obs, &mut r, &mut jac);
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for row in 0..n {
            for a in 0..5 {
                jtr[a] += jac[row][a] * r[row];
                for b in 0..5 {
                    jtj[(a, b)] += jac[row][a] * jac[row][b];
                }
            }
        }
        // Parameters pinned at a bound with the gradient pushing outward stay fixed.
        let mut active = free;
        for a in 0..5 {
            if (x[a] <= bounds.lo[a] && jtr[a] > 0.0) || (x[a] >= bounds.hi[a] && jtr[a] < 0.0) {
                active[a] = false;
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut m = jtj;
            let mut g = -jtr;
            for a in 0..5 {
                if active[a] {
                    m[(a, a)] += lambda * jtj[(a, a)].max(1e-12);
                } else {
                    for b in 0..5 {
                        m[(a, b)] = 0.0;
                        m[(b, a)] = 0.0;
                    }
                    m[(a, a)] = 1.0;
                    g[a] = 0.0;
                }
            }
            let Some(step) = m.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let mut cand = x + step;
            bounds.clamp(&mut cand);
            let c = model.cost(&SignalParams::from_vec(&cand), obs);
            if c < cost {
                let rel = (cost - c) / cost.max(1e-300);
                let moved = (cand - x).norm();
                x = cand;
                cost = c;
                lambda = (lambda * 0.3).max(1e-12);
                improved = rel > 1e-15 && moved > 1e-13;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (SignalParams::from_vec(&x), cost)
}

/// Linear amplitudes for fixed decay and field, without the common-phase
/// constraint: returns (water, fat) complex amplitudes and the residual.
fn linear_amplitudes(model: &SignalModel, obs: &[Complex64], r2star: f64, field: f64) -> (Complex64, Complex64, f64) {
    let (mut aa, mut ab, mut bb) = (0.0, Complex64::new(0.0, 0.0), 0.0);
    let (mut as_, mut bs) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    let mut ss = 0.0;
    for e in 0..model.echoes() {
        let a = decay(r2star, field, model.t_s[e]);
        let b = model.fat[e] * a;
        aa += a.norm_sqr();
        bb += b.norm_sqr();
        ab += a.conj() * b;
        as_ += a.conj() * obs[e];
        bs += b.conj() * obs[e];
        ss += obs[e].norm_sqr();
    }
    let det = aa * bb - ab.norm_sqr();
    if det.abs() < 1e-12 * aa * bb {
        return (as_ / aa, Complex64::new(0.0, 0.0), ss - as_.norm_sqr() / aa);
    }
    let w = (bb * as_ - ab * bs) / det;
    let f = (aa * bs - ab.conj() * as_) / det;
    let resid = ss - (w.conj() * as_ + f.conj() * bs).re;
    (w, f, resid)
}

fn start_from_amplitudes(w: Complex64, f: Complex64, r2star: f64, field: f64) -> SignalParams {
    let phase0 = if w.norm() >= f.norm() { w.arg() } else { f.arg() };
    let rot = Complex64::from_polar(1.0, -phase0);
    SignalParams { water: (w * rot).re.max(0.0), fat: (f * rot).re.max(0.0), r2star, field_offset: field, phase0 }
}

const R2STAR_GRID: [f64; 7] = [0.0, 20.0, 50.0, 100.0, 170.0, 260.0, 400.0];
const FIELD_STEPS: usize = 48;

/// Best grid start in the water-dominant and in the fat-dominant basin.
fn basin_starts(model: &SignalModel, obs: &[Complex64], fixed_field: Option<f64>, cfg: &QuantConfig) -> Vec<SignalParams> {
    let psi = 0.5 / model.min_spacing();
    let fields: Vec<f64> = match fixed_field {
        Some(f) => vec![f],
        None => (0..FIELD_STEPS).map(|i| -psi + 2.0 * psi * (i as f64 + 0.5) / FIELD_STEPS as f64).collect(),
    };
    let mut best: [Option<(f64, SignalParams)>; 2] = [None, None];
    for &field in &fields {
        for &r2 in R2STAR_GRID.iter().filter(|&&r| r <= cfg.r2star_max) {
            let (w, f, resid) = linear_amplitudes(model, obs, r2, field);
            let basin = usize::from(f.norm() > w.norm());
            if best[basin].as_ref().is_none_or(|b| resid < b.0) {
                best[basin] = Some((resid, start_from_amplitudes(w, f, r2, field)));
            }
        }
    }
    best.into_iter().flatten().map(|b| b.1).collect()
}

fn check_signal(signal: &[Complex64], model: &SignalModel) -> Result<()> {
    if model.echoes() < MIN_ECHOES || signal.len() != model.echoes() {
        return Err(Error::InsufficientEchoes { required: MIN_ECHOES.max(model.echoes()), found: signal.len() });
    }
    if let Some(e) = signal.iter().position(|s| !s.re.is_finite() || !s.im.is_finite()) {
        return Err(Error::CorruptEcho(e));
    }
    Ok(())
}

fn fit_from_starts(
    signal: &[Complex64],
    model: &SignalModel,
    starts: &[SignalParams],
    free: [bool; 5],
    cfg: &QuantConfig,
) -> FatFitResult {
    let bounds = Bounds::new(model, cfg);
    let norm = signal.iter().map(|s| s.norm_sqr()).sum::<f64>().sqrt();
    let mut best: Option<(SignalParams, f64)> = None;
    for &s in starts {
        let (p, c) = levenberg_marquardt(model, signal, s, free, &bounds, cfg.max_iterations);
        if best.as_ref().is_none_or(|b| c < b.1) {
            best = Some((p, c));
        }
    }
    let (mut p, cost) = best.expect("at least one start");
    p.phase0 = wrap_phase(p.phase0);
    FatFitResult::from_params(&p, cost, norm, cfg)
}

fn wrap_phase(p: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    p - two_pi * (p / two_pi).round()
}

/// Fits one voxel. `init` adds a warm start to the two basin starts.
pub fn fit_voxel(signal: &[Complex64], model: &SignalModel, init: Option<&SignalParams>, cfg: &QuantConfig) -> Result<FatFitResult> {
    check_signal(signal, model)?;
    let mut starts = basin_starts(model, signal, None, cfg);
    starts.extend(init.copied());
    Ok(fit_from_starts(signal, model, &starts, [true; 5], cfg))
}

/// Fits one voxel with the field offset held at `field`.
pub fn fit_voxel_fixed_field(
    signal: &[Complex64],
    model: &SignalModel,
    field: f64,
    init: Option<&SignalParams>,
    cfg: &QuantConfig,
) -> Result<FatFitResult> {
    check_signal(signal, model)?;
    let mut starts = basin_starts(model, signal, Some(field), cfg);
    starts.extend(init.map(|p| SignalParams { field_offset: field, ..*p }));
    Ok(fit_from_starts(signal, model, &starts, [true, true, true, false, true], cfg))
}

/// Parameter maps of a single-slice fit; float channels on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantMaps {
    pub pdff: Volume,
    pub r2star: Volume,
    /// Smoothed field map used by the fixed-field pass.
    pub field_offset: Volume,
    pub residual: Volume,
    pub mask: Mask,
    pub diverged: Mask,
}

/// Rejects acquisitions that are not axial, by sidecar label or by slice normal.
pub fn check_axial(geometry: &Geometry, orientation: Option<&str>) -> Result<()> {
    if let Some(o) = orientation {
        let o = o.trim().to_ascii_lowercase();
        if o != "axial" && o != "transverse" {
            return Err(Error::NonAxialAcquisition(format!("sidecar orientation `{o}`")));
        }
    }
    let lin = geometry.linear();
    let normal = lin.column(0).cross(&lin.column(1)).normalize();
    if normal[2].abs() < std::f64::consts::FRAC_1_SQRT_2 {
        return Err(Error::NonAxialAcquisition(format!("slice normal ({:.2}, {:.2}, {:.2})", normal[0], normal[1], normal[2])));
    }
    Ok(())
}

fn float_volume(geometry: &Geometry, name: &str, data: Vec<f32>) -> Volume {
    Volume { geometry: geometry.clone(), channels: vec![Channel::new(name, VoxelData::Float32(data))] }
}

/// Two-pass map fit. Pass one warm-starts each voxel from its left neighbour
/// in the row; rows are independent, so `parallel` changes only scheduling.
pub fn fit_map(series: &EchoSeries, mask: Option<&Mask>, cfg: &QuantConfig, parallel: bool) -> Result<QuantMaps> {
    cfg.spectrum.validate()?;
    let g = &series.volume.geometry;
    let dims = g.dims();
    if dims[2] != 1 {
        return Err(Error::InvalidGeometry(format!("expected a single slice, found {}", dims[2])));
    }
    check_axial(g, series.orientation.as_deref())?;
    let model = cfg.model(&series.echo_times_ms);
    if model.echoes() < MIN_ECHOES {
        return Err(Error::InsufficientEchoes { required: MIN_ECHOES, found: model.echoes() });
    }
    let echoes: Vec<&[Complex32]> = (0..model.echoes()).map(|e| series.echo(e)).collect();
    for (e, data) in echoes.iter().enumerate() {
        if data.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::CorruptEcho(e));
        }
    }
    let mask = match mask {
        Some(m) if m.geometry.same_grid(g, 1e-6) => m.clone(),
        Some(_) => return Err(Error::GeometryMismatch("quantification mask grid differs from the echo series".into())),
        None => Mask::full(g.clone()),
    };
    let n = g.voxel_count();
    let signal = |idx: usize| -> Vec<Complex64> { echoes.iter().map(|e| Complex64::new(e[idx].re as f64, e[idx].im as f64)).collect() };

    let fit_row = |j: usize| -> Vec<Option<FatFitResult>> {
        let mut prev: Option<SignalParams> = None;
        (0..dims[0])
            .map(|i| {
                let idx = g.index(i, j, 0);
                if !mask.data[idx] {
                    prev = None;
                    return None;
                }
                let r = fit_voxel(&signal(idx), &model, prev.as_ref(), cfg).expect("signal validated");
                prev = (!r.diverged).then(|| r.params());
                Some(r)
            })
            .collect()
    };
    let rows: Vec<Vec<Option<FatFitResult>>> =
        if parallel { (0..dims[1]).into_par_iter().map(fit_row).collect() } else { (0..dims[1]).map(fit_row).collect() };
    let first: Vec<Option<FatFitResult>> = rows.into_iter().flatten().collect();

    let sp = g.spacing();
    let sigma_mm = cfg.field_fwhm_mm / (8.0 * 2f64.ln()).sqrt();
    let field: Vec<f64> = first.iter().map(|r| r.map_or(0.0, |r| r.field_offset)).collect();
    let valid: Vec<bool> = first.iter().map(|r| r.is_some_and(|r| !r.diverged)).collect();
    // Voxels that fell into the other basin sit about one fat shift away from
    // their neighbours; they are left out of the smoothed map.
    let radius = [0, 1].map(|a| (cfg.field_fwhm_mm / sp[a]).ceil().max(1.0) as usize);
    let local = local_median(&field, &valid, [dims[0], dims[1]], radius);
    let tolerance = 0.25 / model.min_spacing();
    let weight: Vec<f64> = (0..n)
        .map(|idx| if valid[idx] && local[idx].is_some_and(|m| (field[idx] - m).abs() <= tolerance) { 1.0 } else { 0.0 })
        .collect();
    let smooth = masked_gaussian_3d(&field, &weight, dims, [sigma_mm / sp[0], sigma_mm / sp[1], 0.0]);

    let refit = |idx: usize| -> Option<FatFitResult> {
        let r = first[idx]?;
        let fixed = fit_voxel_fixed_field(&signal(idx), &model, smooth[idx], Some(&r.params()), cfg).expect("signal validated");
        Some(fixed)
    };
    let second: Vec<Option<FatFitResult>> =
        if parallel { (0..n).into_par_iter().map(refit).collect() } else { (0..n).map(refit).collect() };

    let pick = |f: fn(&FatFitResult) -> f64| -> Vec<f32> { second.iter().map(|r| r.as_ref().map_or(0.0, |r| f(r) as f32)).collect() };
    let r2max = cfg.r2star_max;
    Ok(QuantMaps {
        pdff: float_volume(g, "pdff", pick(|r| r.pdff.clamp(0.0, 100.0))),
        r2star: float_volume(g, "r2star", second.iter().map(|r| r.map_or(0.0, |r| r.r2star.clamp(0.0, r2max) as f32)).collect()),
        field_offset: float_volume(g, "field_offset", smooth.iter().zip(&mask.data).map(|(&f, &m)| if m { f as f32 } else { 0.0 }).collect()),
        residual: float_volume(g, "residual", pick(|r| r.residual_norm)),
        diverged: Mask::new(g.clone(), second.iter().map(|r| r.is_some_and(|r| r.diverged)).collect()),
        mask,
    })
}

/// Median of the valid samples in a (2r+1) window around each pixel.
fn local_median(data: &[f64], valid: &[bool], dims: [usize; 2], radius: [usize; 2]) -> Vec<Option<f64>> {
    let mut buf = Vec::new();
    (0..data.len())
        .map(|idx| {
            if !valid[idx] {
                return None;
            }
            let (i, j) = (idx % dims[0], idx / dims[0]);
            buf.clear();
            for y in j.saturating_sub(radius[1])..(j + radius[1] + 1).min(dims[1]) {
                for x in i.saturating_sub(radius[0])..(i + radius[0] + 1).min(dims[0]) {
                    let o = x + dims[0] * y;
                    if valid[o] {
                        buf.push(data[o]);
                    }
                }
            }
            let mid = buf.len() / 2;
            Some(*buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b)).1)
        })
        .collect()
}

/// Liver iron concentration (mg/g) from R2* (s⁻¹).
pub fn iron_concentration(r2star: f64) -> Result<f64> {
    if !(r2star >= 0.0) {
        return Err(Error::NegativeR2star(r2star));
    }
    Ok(0.202 + 0.0254 * r2star)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub median: f64,
    pub mean: f64,
    pub iqr: f64,
    pub count: usize,
}

/// Order statistics of `map` over `mask`, with linear interpolation between ranks.
pub fn summarize_region(map: &[f32], mask: &[bool]) -> Result<RegionSummary> {
    let mut v: Vec<f64> = map.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x as f64).collect();
    if v.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let median = quantile(&mut v, 0.5);
    let iqr = quantile(&mut v, 0.75) - quantile(&mut v, 0.25);
    Ok(RegionSummary { median, mean, iqr, count: v.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonizationModel {
    pub kind: ModelKind,
    /// Intercept, slope and, for the quadratic model, the squared-term coefficient.
    pub coefficients: Vec<f64>,
    pub r2: f64,
    pub adjusted_r2: f64,
    pub residual_ss: f64,
    pub n: usize,
}

impl HarmonizationModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * x + c)
    }

    /// Point where the linear model crosses the identity line.
    pub fn identity_crossing(&self) -> Option<f64> {
        match self.kind {
            ModelKind::Linear if (1.0 - self.coefficients[1]).abs() > 1e-12 => Some(self.coefficients[0] / (1.0 - self.coefficients[1])),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Harmonization {
    pub linear: HarmonizationModel,
    pub quadratic: HarmonizationModel,
    /// Nested-model F statistic for the quadratic term, (1, n - 3) degrees of freedom.
    pub f_stat: f64,
    pub p_value: f64,
}

impl Harmonization {
    pub fn quadratic_significant(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

fn ols(x: &[f64], y: &[f64], degree: usize) -> Result<HarmonizationModel> {
    let n = x.len();
    let p = degree + 1;
    if n < p + 1 {
        return Err(Error::DegenerateDesign(format!("{n} pairs for {p} coefficients")));
    }
    // Centre and scale the predictor so the squared column stays well conditioned.
    let mx = x.iter().sum::<f64>() / n as f64;
    let sx = (x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n as f64).sqrt();
    if !(sx > 0.0) {
        return Err(Error::DegenerateDesign("constant predictor".into()));
    }
    let design = DMatrix::from_fn(n, p, |r, c| ((x[r] - mx) / sx).powi(c as i32));
    let yv = DVector::from_column_slice(y);
    let beta = design
        .clone()
        .svd(true, true)
        .solve(&yv, 1e-12)
        .map_err(|e| Error::DegenerateDesign(e.to_string()))?;
    let resid = &yv - &design * &beta;
    let rss = resid.norm_squared();
    let my = y.iter().sum::<f64>() / n as f64;
    let tss: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let r2 = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let adjusted = (1.0 - (1.0 - r2) * (n as f64 - 1.0) / (n - p) as f64).clamp(0.0, 1.0);
    // Back to raw-predictor coefficients.
    let mut coefficients = vec![0.0; p];
    for (k, b) in beta.iter().enumerate() {
        // b * ((x - mx) / sx)^k expanded by the binomial theorem.
        for j in 0..=k {
            let binom = (0..j).fold(1.0, |acc, i| acc * (k - i) as f64 / (i + 1) as f64);
            coefficients[j] += b * binom * (-mx).powi((k - j) as i32) / sx.powi(k as i32);
        }
    }
    let kind = if degree == 1 { ModelKind::Linear } else { ModelKind::Quadratic };
    Ok(HarmonizationModel { kind, coefficients, r2: r2.clamp(0.0, 1.0), adjusted_r2: adjusted, residual_ss: rss, n })
}

/// Ordinary least squares of `y` (second protocol) on `x` (first protocol)
/// for the linear and quadratic models, with the nested-model F test.
pub fn harmonize_fit(pairs: &[(f64, f64)]) -> Result<Harmonization> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    if x.iter().chain(&y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateDesign("non-finite pair".into()));
    }
    let linear = ols(&x, &y, 1)?;
    let quadratic = ols(&x, &y, 2)?;
    let dof = (pairs.len() - 3) as f64;
    let (f_stat, p_value) = if quadratic.residual_ss > 0.0 {
        let f = ((linear.residual_ss - quadratic.residual_ss).max(0.0)) / (quadratic.residual_ss / dof);
        let dist = FisherSnedecor::new(1.0, dof).map_err(|e| Error::DegenerateDesign(e.to_string()))?;
        (f, dist.sf(f))
    } else if linear.residual_ss > 0.0 {
        (f64::INFINITY, 0.0)
    } else {
        (0.0, 1.0)
    };
    Ok(Harmonization { linear, quadratic, f_stat, p_value })
}

/// Reads paired medians from a two-column CSV; a non-numeric first row is a header.
pub fn read_pairs_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let parsed = match cols.as_slice() {
            [a, b] => a.parse::<f64>().ok().zip(b.parse::<f64>().ok()),
            _ => None,
        };
        match parsed {
            Some(p) => pairs.push(p),
            None if i == 0 => continue,
            None => return Err(Error::InvalidConfig(format!("line {}: expected two numeric columns", i + 1))),
        }
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantFlag {
    /// More than a tenth of the region failed to fit.
    ManyDivergedFits,
    EmptyRegion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub median_pdff_pct: Option<f64>,
    #[serde(rename = "median_r2star_s-1")]
    pub median_r2star: Option<f64>,
    pub iron_mg_per_g: Option<f64>,
    pub region_voxels: usize,
    pub diverged_voxels: usize,
    pub flags: Vec<QuantFlag>,
}

/// Region medians of the maps, excluding diverged voxels.
pub fn summarize_maps(maps: &QuantMaps, region: Option<&Mask>) -> QuantSummary {
    let region: Vec<bool> = match region {
        Some(r) => r.data.iter().zip(&maps.mask.data).map(|(&a, &b)| a && b).collect(),
        None => maps.mask.data.clone(),
    };
    let diverged = region.iter().zip(&maps.diverged.data).filter(|(&r, &d)| r && d).count();
    let total = region.iter().filter(|&&r| r).count();
    let good: Vec<bool> = region.iter().zip(&maps.diverged.data).map(|(&r, &d)| r && !d).collect();
    let pdff = summarize_region(&maps.pdff.to_f32(), &good).ok();
    let r2 = summarize_region(&maps.r2star.to_f32(), &good).ok();
    let mut flags = Vec::new();
    if pdff.is_none() {
        flags.push(QuantFlag::EmptyRegion);
    }
    if total > 0 && diverged * 10 > total {
        flags.push(QuantFlag::ManyDivergedFits);
    }
    QuantSummary {
        median_pdff_pct: pdff.map(|s| s.median),
        median_r2star: r2.map(|s| s.median),
        iron_mg_per_g: r2.and_then(|s| iron_concentration(s.median).ok()),
        region_voxels: total,
        diverged_voxels: diverged,
        flags,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub const GRE_TE: [f64; 10] = [2.38, 4.76, 7.15, 9.53, 11.91, 14.29, 16.67, 19.06, 21.44, 23.82];

    fn params(w: f64, f: f64, r: f64, psi: f64, phi: f64) -> SignalParams {
        SignalParams { water: w, fat: f, r2star: r, field_offset: psi, phase0: phi }
    }

    #[test]
    fn pure_water_is_constant_real() {
        let s = forward_signal(&params(70.0, 0.0, 0.0, 0.0, 0.0), &FatSpectrum::default(), &GRE_TE);
        for v in s {
            assert!((v.re - 70.0).abs() < 1e-12 && v.im.abs() < 1e-12);
        }
    }

    #[test]
    fn single_peak_fat_magnitude_decays() {
        let sp = FatSpectrum::single(-3.4);
        let s = forward_signal(&params(0.0, 50.0, 40.0, 0.0, 0.0), &sp, &GRE_TE);
        for (v, t) in s.iter().zip(GRE_TE) {
            assert!((v.norm() - 50.0 * (-40.0 * t * 1e-3).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn default_spectrum_is_normalized() {
        FatSpectrum::default().validate().unwrap();
        assert!(FatSpectrum { peaks: vec![FatPeak { relative_frequency_ppm: -3.4, amplitude: 0.5 }] }.validate().is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = SignalModel::new(&FatSpectrum::default(), &GRE_TE, LARMOR_MHZ);
        let p = params(60.0, 35.0, 45.0, 12.0, 0.4);
        let obs = vec![Complex64::new(0.0, 0.0); GRE_TE.len()];
        let n = 2 * GRE_TE.len();
        let mut r = vec![0.0; n];
        let mut jac = vec![[0.0; 5]; n];
        model.residual_jacobian(&p, &obs, &mut r, &mut jac);
        let v = p.to_vec();
        for a in 0..5 {
            let h = 1e-6 * v[a].abs().max(1.0);
            let (mut up, mut dn) = (v, v);
            up[a] += h;
            dn[a] -= h;
            let su = model.evaluate(&SignalParams::from_vec(&up));
            let sd = model.evaluate(&SignalParams::from_vec(&dn));
            for e in 0..GRE_TE.len() {
                let d = (su[e] - sd[e]) / (2.0 * h);
                let scale = jac[e][a].abs().max(jac[GRE_TE.len() + e][a].abs()).max(1e-3);
                assert!((d.re - jac[e][a]).abs() / scale < 1e-4, "param {a} echo {e}");
                assert!((d.im - jac[GRE_TE.len() + e][a]).abs() / scale < 1e-4, "param {a} echo {e}");
            }
        }
    }

    #[test]
    fn recovers_noiseless_voxel() {
        let cfg = QuantConfig::default();
        let model = cfg.model(&GRE_TE);
        let s = model.evaluate(&params(70.0, 30.0, 50.0, 10.0, 0.0));
        let r = fit_voxel(&s, &model, None, &cfg).unwrap();
        assert!((r.pdff - 30.0).abs() < 0.1, "{r:?}");
        assert!((r.r2star - 50.0).abs() < 0.5, "{r:?}");
        assert!(!r.diverged);
    }

    #[test]
    fn pure_water_fits_zero_pdff() {
        let cfg = QuantConfig::default();
        let model = cfg.model(&GRE_TE);
        let r = fit_voxel(&model.evaluate(&params(100.0, 0.0, 30.0, -20.0, 1.0)), &model, None, &cfg).unwrap();
        assert!(r.pdff < 0.1, "{r:?}");
    }

    #[test]
    fn noise_only_signal_diverges() {
        let cfg = QuantConfig::default();
        let model = cfg.model(&GRE_TE);
        let mut rng = crate::rng::SplitMix64::new(11);
        let s: Vec<Complex64> = GRE_TE.iter().map(|_| Complex64::new(rng.normal(), rng.normal())).collect();
        assert!(fit_voxel(&s, &model, None, &cfg).unwrap().diverged);
    }

    #[test]
    fn too_few_echoes_or_corrupt_echo() {
        let cfg = QuantConfig::default();
        let model = cfg.model(&GRE_TE[..4]);
        let s = model.evaluate(&params(1.0, 1.0, 0.0, 0.0, 0.0));
        assert!(matches!(fit_voxel(&s, &model, None, &cfg), Err(Error::InsufficientEchoes { .. })));
        let model = cfg.model(&GRE_TE);
        let mut s = model.evaluate(&params(1.0, 1.0, 0.0, 0.0, 0.0));
        s[3] = Complex64::new(f64::NAN, 0.0);
        assert!(matches!(fit_voxel(&s, &model, None, &cfg), Err(Error::CorruptEcho(3))));
    }

    #[test]
    fn iron_conversion() {
        assert!((iron_concentration(0.0).unwrap() - 0.202).abs() < 1e-12);
        assert!((iron_concentration(100.0).unwrap() - 2.742).abs() < 1e-12);
        assert!((iron_concentration(39.29).unwrap() - 1.199966).abs() < 1e-9);
        assert!(matches!(iron_concentration(-1.0), Err(Error::NegativeR2star(_))));
    }

    #[test]
    fn region_order_statistics() {
        let s = summarize_region(&[1.0, 2.0, 3.0, 4.0, 5.0], &[true; 5]).unwrap();
        assert_eq!(s.median, 3.0);
        assert_eq!(s.iqr, 2.0);
        assert_eq!(summarize_region(&[7.0, 1.0], &[true, false]).unwrap().median, 7.0);
        assert!(matches!(summarize_region(&[1.0], &[false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn exact_line_fit() {
        let pairs: Vec<(f64, f64)> = (0..10).map(|i| (i as f64, 2.0 * i as f64)).collect();
        let h = harmonize_fit(&pairs).unwrap();
        assert!((h.linear.coefficients[1] - 2.0).abs() < 1e-10);
        assert!(h.linear.coefficients[0].abs() < 1e-10);
        assert!((h.linear.adjusted_r2 - 1.0).abs() < 1e-12);
        assert!(matches!(harmonize_fit(&[(1.0, 2.0), (1.0, 3.0), (1.0, 4.0), (1.0, 5.0)]), Err(Error::DegenerateDesign(_))));
        assert!(matches!(harmonize_fit(&[(1.0, 2.0), (2.0, 3.0)]), Err(Error::DegenerateDesign(_))));
    }

    #[test]
    fn quadratic_coefficients_are_raw_scale() {
        let pairs: Vec<(f64, f64)> = (0..20).map(|i| i as f64).map(|x| (x, 1.1 + 0.7326 * x + 0.0012 * x * x)).collect();
        let h = harmonize_fit(&pairs).unwrap();
        let c = &h.quadratic.coefficients;
        assert!((c[0] - 1.1).abs() < 1e-9 && (c[1] - 0.7326).abs() < 1e-9 && (c[2] - 0.0012).abs() < 1e-11, "{c:?}");
        assert!((h.quadratic.predict(10.0) - (1.1 + 7.326 + 0.12)).abs() < 1e-9);
    }

    #[test]
    fn csv_pairs_with_header() {
        let p = read_pairs_csv("gre,ideal\n1.0, 2.0\n\n3,4\n").unwrap();
        assert_eq!(p, vec![(1.0, 2.0), (3.0, 4.0)]);
        assert!(read_pairs_csv("1,2\nx,y\n").is_err());
    }
}
