//! Fat-water swap detection and correction.
//!
//! Each series contributes one central coronal slice. Series 1-4 are checked
//! whole; series 5 and 6 (the legs) are checked per lateral half, for eight
//! checks per subject. The reference classifier compares the subcutaneous
//! rim of the body in the two channels: that rim is fat, so it must be bright
//! in the channel presented as fat.

use serde::{Deserialize, Serialize};

use crate::assembly::{DixonSeries, DixonSubject, SERIES_COUNT};
use crate::error::{Error, Result};
use crate::imgproc::{coronal_plane, erode, histogram_quantile, Plane};
use crate::volume::VoxelData;

/// Columns dropped at each lateral edge of the coronal slice.
pub const CROP: usize = 32;
/// Series (1-based) from which left and right halves are checked separately.
pub const SPLIT_FROM_SERIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Whole,
    /// Subject's left: columns at or beyond the grid midline (+x).
    LeftHalf,
    RightHalf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapLabel {
    WaterCorrect,
    Swapped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapCheck {
    /// 1-based series index, superior first.
    pub series: usize,
    pub region: Region,
    pub label: SwapLabel,
    /// Probability-like confidence that the channels are labelled correctly.
    pub score: f64,
    pub corrected: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SwapReport {
    pub checks: Vec<SwapCheck>,
}

impl SwapReport {
    pub fn swapped(&self) -> impl Iterator<Item = &SwapCheck> {
        self.checks.iter().filter(|c| c.label == SwapLabel::Swapped)
    }

    pub fn swap_count(&self) -> usize {
        self.swapped().count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SwapConfig {
    /// Body threshold on normalized fat + water.
    pub body_threshold: f32,
    /// Rim width in pixels.
    pub shell_width: usize,
    /// Logistic temperature of the score.
    pub temperature: f64,
    pub correct: bool,
}

impl Default for SwapConfig {
    fn default() -> Self {
        Self { body_threshold: 0.25, shell_width: 3, temperature: 0.05, correct: true }
    }
}

/// Regions checked for a 1-based series index.
pub fn regions_for(series: usize) -> &'static [Region] {
    if series >= SPLIT_FROM_SERIES {
        &[Region::LeftHalf, Region::RightHalf]
    } else {
        &[Region::Whole]
    }
}

/// Normalized, cropped central coronal slice of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapSlice {
    pub fat: Plane<f32>,
    pub water: Plane<f32>,
    /// Coronal row that was selected.
    pub row: usize,
}

fn float_channel<'a>(series: &'a DixonSeries, name: &str) -> Result<std::borrow::Cow<'a, [f32]>> {
    match series.volume.channel(name).map(|c| &c.data) {
        Some(VoxelData::Float32(v)) => Ok(std::borrow::Cow::Borrowed(v)),
        Some(other) => Ok(std::borrow::Cow::Owned(other.to_f32())),
        None => Err(Error::MissingChannel { series: series.name.clone(), channel: name.to_string() }),
    }
}

/// Picks the coronal row with the largest body profile, normalizes fat and
/// water jointly to [0, 1] and crops [`CROP`] columns from both lateral ends.
pub fn prepare_slice(series: &DixonSeries) -> Result<SwapSlice> {
    let fat = float_channel(series, "fat")?;
    let water = float_channel(series, "water")?;
    let dims = series.geometry().dims();
    let sum: Vec<f32> = fat.iter().zip(water.iter()).map(|(f, w)| f + w).collect();
    let robust = histogram_quantile(&sum, 0.99);
    if robust <= 0.0 {
        return Err(Error::DegenerateProfile);
    }
    let thr = 0.2 * robust;
    let mut profile = vec![0usize; dims[1]];
    for (idx, &v) in sum.iter().enumerate() {
        if v > thr {
            profile[(idx / dims[0]) % dims[1]] += 1;
        }
    }
    let max = *profile.iter().max().unwrap_or(&0);
    if max == 0 {
        return Err(Error::DegenerateProfile);
    }
    // Centre of the plateau of near-maximal rows around the first maximum.
    let peak = profile.iter().position(|&p| p == max).unwrap();
    let near = |p: usize| p as f64 >= 0.98 * max as f64;
    let mut lo = peak;
    while lo > 0 && near(profile[lo - 1]) {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < dims[1] && near(profile[hi + 1]) {
        hi += 1;
    }
    let row = (lo + hi) / 2;

    let fat_p = coronal_plane(&fat, dims, row);
    let water_p = coronal_plane(&water, dims, row);
    let mut both: Vec<f32> = fat_p.data.iter().chain(&water_p.data).copied().collect();
    let scale = histogram_quantile(&both, 0.99).max(f32::MIN_POSITIVE);
    both.clear();
    let norm = |v: f32| (v / scale).clamp(0.0, 1.0);
    let crop = CROP.min(dims[0].saturating_sub(1) / 2);
    Ok(SwapSlice {
        fat: fat_p.map(norm).crop_columns(crop, dims[0] - crop),
        water: water_p.map(norm).crop_columns(crop, dims[0] - crop),
        row,
    })
}

fn region_columns(width: usize, region: Region) -> (usize, usize) {
    match region {
        Region::Whole => (0, width),
        Region::LeftHalf => (width / 2, width),
        Region::RightHalf => (0, width / 2),
    }
}

/// Rim statistic: mean fat minus mean water over the outer rim of the body.
pub fn shell_statistic(fat: &Plane<f32>, water: &Plane<f32>, cfg: &SwapConfig) -> f64 {
    let mask: Vec<bool> = fat.data.iter().zip(&water.data).map(|(f, w)| f + w > cfg.body_threshold).collect();
    let core = erode(&mask, [fat.width, fat.height, 1], cfg.shell_width);
    let (mut sf, mut sw, mut n) = (0.0, 0.0, 0usize);
    for i in 0..mask.len() {
        if mask[i] && !core[i] {
            sf += fat.data[i] as f64;
            sw += water.data[i] as f64;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        (sf - sw) / n as f64
    }
}

/// Reference classifier for one region of a prepared slice.
pub fn classify_swap(fat: &Plane<f32>, water: &Plane<f32>, series: usize, region: Region, cfg: &SwapConfig) -> SwapCheck {
    let (x0, x1) = region_columns(fat.width, region);
    let f = fat.crop_columns(x0, x1);
    let w = water.crop_columns(x0, x1);
    let s = shell_statistic(&f, &w, cfg);
    let label = if s > 0.0 { SwapLabel::WaterCorrect } else { SwapLabel::Swapped };
    SwapCheck { series, region, label, score: 1.0 / (1.0 + (-s / cfg.temperature).exp()), corrected: false }
}

/// Runs the checks of one series (1-based index).
pub fn check_series(series: &DixonSeries, index: usize, cfg: &SwapConfig) -> Result<Vec<SwapCheck>> {
    let slice = prepare_slice(series)?;
    Ok(regions_for(index).iter().map(|&r| classify_swap(&slice.fat, &slice.water, index, r, cfg)).collect())
}

/// All eight checks of a subject; series are ranked by world z.
pub fn detect_swaps(subject: &DixonSubject, cfg: &SwapConfig) -> Result<SwapReport> {
    if subject.series.len() != SERIES_COUNT {
        return Err(if subject.series.len() < SERIES_COUNT {
            Error::MissingSeries(subject.series.len())
        } else {
            Error::NonStandardAcquisition(subject.series.len())
        });
    }
    let mut checks = Vec::with_capacity(8);
    for (rank, &idx) in subject.order().iter().enumerate() {
        checks.extend(check_series(&subject.series[idx], rank + 1, cfg)?);
    }
    Ok(SwapReport { checks })
}

/// Exchanges fat and water within `region` of the series grid.
pub fn swap_region(series: &mut DixonSeries, region: Region) -> Result<()> {
    let dims = series.geometry().dims();
    let fi = series.volume.channels.iter().position(|c| c.name == "fat");
    let wi = series.volume.channels.iter().position(|c| c.name == "water");
    let (Some(fi), Some(wi)) = (fi, wi) else {
        return Err(Error::MissingChannel { series: series.name.clone(), channel: "fat/water".into() });
    };
    if region == Region::Whole {
        series.volume.channels.swap(fi, wi);
        series.volume.channels[fi].name = "fat".into();
        series.volume.channels[wi].name = "water".into();
        return Ok(());
    }
    let (x0, x1) = region_columns(dims[0], region);
    let (a, b) = if fi < wi {
        let (l, r) = series.volume.channels.split_at_mut(wi);
        (&mut l[fi].data, &mut r[0].data)
    } else {
        let (l, r) = series.volume.channels.split_at_mut(fi);
        (&mut r[0].data, &mut l[wi].data)
    };
    fn swap_rows<T>(a: &mut [T], b: &mut [T], nx: usize, x0: usize, x1: usize) {
        for (ra, rb) in a.chunks_mut(nx).zip(b.chunks_mut(nx)) {
            ra[x0..x1].swap_with_slice(&mut rb[x0..x1]);
        }
    }
    match (a, b) {
        (VoxelData::Float32(a), VoxelData::Float32(b)) => swap_rows(a, b, dims[0], x0, x1),
        (VoxelData::Int16(a), VoxelData::Int16(b)) => swap_rows(a, b, dims[0], x0, x1),
        (VoxelData::Complex64(a), VoxelData::Complex64(b)) => swap_rows(a, b, dims[0], x0, x1),
        _ => return Err(Error::ChannelKind("fat/water kinds differ".into())),
    }
    Ok(())
}

/// Applies the swapped checks to one series (1-based index) and marks them corrected.
pub fn correct_series(series: &mut DixonSeries, index: usize, checks: &mut [SwapCheck]) -> Result<()> {
    for c in checks.iter_mut().filter(|c| c.series == index && c.label == SwapLabel::Swapped) {
        swap_region(series, c.region)?;
        c.corrected = true;
    }
    Ok(())
}

/// Returns the subject with every flagged region exchanged.
pub fn correct_swaps(subject: &DixonSubject, report: &SwapReport) -> Result<DixonSubject> {
    let mut out = subject.clone();
    let order = subject.order();
    for c in report.swapped() {
        let idx = order[c.series - 1];
        swap_region(&mut out.series[idx], c.region)?;
    }
    Ok(out)
}
