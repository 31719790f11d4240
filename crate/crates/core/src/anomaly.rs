//! Anomaly detection on the assembled in-phase volume.
//!
//! A body mask is built by multi-scale adaptive thresholding, then Canny edges
//! of its central coronal and sagittal slices are inspected. Long horizontal
//! runs on the outer contour indicate discontinuities; edges enclosed by the
//! silhouette indicate signal dropout. Head/neck coverage and lateral shifts
//! between series are measured directly on the mask.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::assembly::AssembledVolume;
use crate::error::{Error, Result};
use crate::imgproc::{
    box_mean_3d, canny, close, coronal_plane, fill_holes, histogram_quantile, label_2d, largest_component_3d,
    longest_row_runs, sagittal_plane, Plane,
};
use crate::volume::{Geometry, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyFlag {
    HeadNeckInFov,
    DropoutChest,
    DropoutKnee,
    DropoutOther,
    SeriesShifted,
    FovDimsMismatch,
    Other,
}

impl AnomalyFlag {
    pub const ALL: [AnomalyFlag; 7] = [
        AnomalyFlag::HeadNeckInFov,
        AnomalyFlag::DropoutChest,
        AnomalyFlag::DropoutKnee,
        AnomalyFlag::DropoutOther,
        AnomalyFlag::SeriesShifted,
        AnomalyFlag::FovDimsMismatch,
        AnomalyFlag::Other,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnomalyConfig {
    /// Local-mean window sides, in voxels.
    pub windows: Vec<usize>,
    /// A voxel votes foreground at a scale when it exceeds this fraction of the local mean.
    pub local_fraction: f64,
    /// Absolute floor as a fraction of the 99th percentile.
    pub floor_fraction: f64,
    pub closing_radius: usize,
    pub canny_sigma: f64,
    pub canny_low: f64,
    pub canny_high: f64,
    /// Runs longer than this in both central slices are flagged.
    pub run_both: usize,
    /// Runs longer than this in either central slice are flagged.
    pub run_either: usize,
    /// Smallest interior edge cluster treated as dropout, in pixels.
    pub min_interior_edge: usize,
    pub head_slices: usize,
    pub head_width_fraction: f64,
    /// A neck is narrower than this fraction of the head width.
    pub neck_fraction: f64,
    pub neck_search_slices: usize,
    pub shift_voxels: f64,
    pub standard_dims: [usize; 3],
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self {
            windows: vec![31, 61, 121],
            local_fraction: 0.5,
            floor_fraction: 0.1,
            closing_radius: 2,
            canny_sigma: 2.0,
            canny_low: 0.1,
            canny_high: 0.2,
            run_both: 10,
            run_either: 25,
            min_interior_edge: 6,
            head_slices: 8,
            head_width_fraction: 0.4,
            neck_fraction: 0.75,
            neck_search_slices: 40,
            shift_voxels: 15.0,
            standard_dims: [224, 174, 370],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyMask {
    pub mask: Mask,
    /// Connected components before the largest was kept.
    pub component_count: usize,
}

/// Multi-scale adaptive threshold, largest 26-connected component, closing.
pub fn body_mask(inphase: &Volume, cfg: &AnomalyConfig) -> Result<BodyMask> {
    let data = inphase.channels.first().map(|c| c.data.to_f32()).unwrap_or_default();
    body_mask_from(&data, &inphase.geometry, cfg)
}

pub fn body_mask_from(data: &[f32], geometry: &Geometry, cfg: &AnomalyConfig) -> Result<BodyMask> {
    let dims = geometry.dims();
    if data.len() != geometry.voxel_count() {
        return Err(Error::GeometryMismatch("in-phase data does not match its grid".into()));
    }
    let floor = cfg.floor_fraction as f32 * histogram_quantile(data, 0.99);
    let mut votes = vec![0u8; data.len()];
    for &w in &cfg.windows {
        let mean = box_mean_3d(data, dims, w.max(1));
        for ((v, &x), &m) in votes.iter_mut().zip(data).zip(&mean) {
            if x > cfg.local_fraction as f32 * m {
                *v += 1;
            }
        }
    }
    let need = cfg.windows.len() / 2 + 1;
    let fg: Vec<bool> = data.iter().zip(&votes).map(|(&x, &v)| x > floor && x > 0.0 && v as usize >= need).collect();
    let (largest, component_count) = largest_component_3d(&fg, dims);
    if component_count == 0 {
        return Err(Error::EmptyBody);
    }
    let closed = close(&largest, dims, cfg.closing_radius);
    Ok(BodyMask { mask: Mask::new(geometry.clone(), closed), component_count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    Coronal,
    Sagittal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropoutEvidence {
    pub view: View,
    /// Slice index (k) of the cluster centroid.
    pub slice: usize,
    /// In-plane column of the cluster centroid.
    pub position: usize,
    pub pixels: usize,
    pub flag: AnomalyFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidJump {
    pub upper: String,
    pub lower: String,
    pub jump_voxels: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvidence {
    pub dims: [usize; 3],
    pub component_count: usize,
    pub coronal_row: usize,
    pub sagittal_column: usize,
    pub coronal_max_run: usize,
    pub coronal_run_slice: usize,
    pub sagittal_max_run: usize,
    pub sagittal_run_slice: usize,
    pub dropouts: Vec<DropoutEvidence>,
    pub head_width: usize,
    pub median_width: f64,
    pub neck_slice: Option<usize>,
    pub centroid_jumps: Vec<CentroidJump>,
    pub empty_body: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnomalyReport {
    pub flags: BTreeSet<AnomalyFlag>,
    pub evidence: AnomalyEvidence,
}

impl AnomalyReport {
    pub fn is_clean(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Edge analysis of one central slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceAnalysis {
    pub mask: Plane<bool>,
    /// Canny edges of the slice as segmented.
    pub edges: Plane<bool>,
    /// Canny edges of the hole-filled silhouette.
    pub outer_edges: Plane<bool>,
    /// Longest horizontal outer-contour run per slice row.
    pub runs: Vec<usize>,
    /// Interior edge clusters: (row, column, pixels).
    pub interior: Vec<(usize, usize, usize)>,
}

impl SliceAnalysis {
    pub fn max_run(&self) -> (usize, usize) {
        self.runs.iter().enumerate().map(|(k, &r)| (r, k)).max_by_key(|&(r, k)| (r, std::cmp::Reverse(k))).unwrap_or((0, 0))
    }
}

fn as_image(mask: &Plane<bool>) -> Plane<f32> {
    mask.map(|b| if b { 1.0 } else { 0.0 })
}

/// Background pixels directly above or below the silhouette that lie within
/// one pixel of a Canny edge. Snapping edges to the pixel grid this way makes a
/// row run equal to the horizontal extent of a contour segment; raw
/// non-maximum suppression drops the pixels at both corners.
pub fn horizontal_contour(filled: &Plane<bool>, edges: &Plane<bool>) -> Plane<bool> {
    let (w, h) = (filled.width, filled.height);
    let mut out = Plane::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            if filled.get(x, y) {
                continue;
            }
            let vertical = (y > 0 && filled.get(x, y - 1)) || (y + 1 < h && filled.get(x, y + 1));
            if !vertical {
                continue;
            }
            let near_edge = (y.saturating_sub(1)..(y + 2).min(h))
                .any(|yy| (x.saturating_sub(1)..(x + 2).min(w)).any(|xx| edges.get(xx, yy)));
            out.set(x, y, near_edge);
        }
    }
    out
}

pub fn analyze_slice(mask: Plane<bool>, cfg: &AnomalyConfig) -> SliceAnalysis {
    let filled = fill_holes(&mask);
    let edges = canny(&as_image(&mask), cfg.canny_sigma, cfg.canny_low, cfg.canny_high);
    let outer_edges = canny(&as_image(&filled), cfg.canny_sigma, cfg.canny_low, cfg.canny_high);
    let runs = longest_row_runs(&horizontal_contour(&filled, &outer_edges));
    let interior_px = Plane::from_vec(
        mask.width,
        mask.height,
        edges.data.iter().zip(&outer_edges.data).map(|(&e, &o)| e && !o).collect(),
    );
    let (labels, sizes) = label_2d(&interior_px);
    let mut sums = vec![(0usize, 0usize); sizes.len()];
    for (idx, &l) in labels.iter().enumerate() {
        if l > 0 {
            let s = &mut sums[l as usize - 1];
            s.0 += idx % mask.width;
            s.1 += idx / mask.width;
        }
    }
    let interior = sizes
        .iter()
        .zip(&sums)
        .filter(|(&n, _)| n >= cfg.min_interior_edge)
        .map(|(&n, &(sx, sy))| (sy / n, sx / n, n))
        .collect();
    SliceAnalysis { mask, edges, outer_edges, runs, interior }
}

/// Maximum lateral mask width (voxels in one row) per axial slice.
pub fn slice_widths(mask: &Mask) -> Vec<usize> {
    let [nx, ny, nz] = mask.geometry.dims();
    (0..nz)
        .map(|k| {
            (0..ny)
                .map(|j| mask.data[nx * (j + ny * k)..nx * (j + 1 + ny * k)].iter().filter(|&&b| b).count())
                .max()
                .unwrap_or(0)
        })
        .collect()
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    crate::imgproc::quantile(values, 0.5)
}

/// Lateral (x) voxel centroid of the mask per slice; `None` where empty.
fn slice_centroids(mask: &Mask) -> Vec<Option<f64>> {
    let [nx, ny, nz] = mask.geometry.dims();
    (0..nz)
        .map(|k| {
            let (mut s, mut n) = (0.0, 0usize);
            for idx in nx * ny * k..nx * ny * (k + 1) {
                if mask.data[idx] {
                    s += (idx % nx) as f64;
                    n += 1;
                }
            }
            (n > 0).then(|| s / n as f64)
        })
        .collect()
}

fn dominant_regions(assembled: &AssembledVolume) -> Vec<(String, Vec<usize>)> {
    let mut regions: Vec<(String, Vec<usize>)> = Vec::new();
    for p in &assembled.provenance {
        let Some(src) = p.sources.iter().max_by(|a, b| a.weight.total_cmp(&b.weight)) else { continue };
        match regions.last_mut() {
            Some((name, ks)) if *name == src.series => ks.push(p.k),
            _ => regions.push((src.series.clone(), vec![p.k])),
        }
    }
    regions
}

fn classify_dropout(k: usize, assembled: &AssembledVolume) -> AnomalyFlag {
    let spans = &assembled.spans;
    if spans.len() == 6 {
        let (top, bottom) = (spans[1].k_start, spans[3].k_end);
        if k >= top && k < top + (bottom - top + 1) / 3 {
            return AnomalyFlag::DropoutChest;
        }
        let last = &spans[5];
        if k >= last.k_start && k <= last.k_end {
            return AnomalyFlag::DropoutKnee;
        }
    }
    AnomalyFlag::DropoutOther
}

/// Full analysis: the report plus the intermediate mask and slice analyses.
#[derive(Debug, Clone)]
pub struct AnomalyAnalysis {
    pub report: AnomalyReport,
    pub body: Option<BodyMask>,
    pub coronal: Option<SliceAnalysis>,
    pub sagittal: Option<SliceAnalysis>,
}

pub fn analyze_anomalies(assembled: &AssembledVolume, cfg: &AnomalyConfig) -> AnomalyAnalysis {
    let geometry = &assembled.volume.geometry;
    let dims = geometry.dims();
    let mut report = AnomalyReport::default();
    report.evidence.dims = dims;
    if dims != cfg.standard_dims {
        report.flags.insert(AnomalyFlag::FovDimsMismatch);
    }
    let body = match body_mask_from(assembled.channel("in"), geometry, cfg) {
        Ok(b) => b,
        Err(_) => {
            report.evidence.empty_body = true;
            report.flags.insert(AnomalyFlag::Other);
            return AnomalyAnalysis { report, body: None, coronal: None, sagittal: None };
        }
    };
    let ev = &mut report.evidence;
    ev.component_count = body.component_count;
    let centroid = body.mask.centroid_voxel().unwrap_or([0.0; 3]);
    ev.coronal_row = (centroid[1].round() as usize).min(dims[1] - 1);
    ev.sagittal_column = (centroid[0].round() as usize).min(dims[0] - 1);
    let coronal = analyze_slice(coronal_plane(&body.mask.data, dims, ev.coronal_row), cfg);
    let sagittal = analyze_slice(sagittal_plane(&body.mask.data, dims, ev.sagittal_column), cfg);
    (ev.coronal_max_run, ev.coronal_run_slice) = coronal.max_run();
    (ev.sagittal_max_run, ev.sagittal_run_slice) = sagittal.max_run();

    for (view, analysis) in [(View::Coronal, &coronal), (View::Sagittal, &sagittal)] {
        for &(slice, position, pixels) in &analysis.interior {
            let flag = classify_dropout(slice, assembled);
            ev.dropouts.push(DropoutEvidence { view, slice, position, pixels, flag });
            report.flags.insert(flag);
        }
    }

    let widths = slice_widths(&body.mask);
    let mut nonzero: Vec<f64> = widths.iter().filter(|&&w| w > 0).map(|&w| w as f64).collect();
    ev.median_width = median(&mut nonzero);
    let top = cfg.head_slices.min(widths.len());
    ev.head_width = widths[..top].iter().copied().max().unwrap_or(0);
    if ev.head_width as f64 > cfg.head_width_fraction * ev.median_width {
        let end = (top + cfg.neck_search_slices).min(widths.len());
        ev.neck_slice = (top..end).find(|&k| {
            let w = widths[k] as f64;
            w > 0.0 && w < cfg.neck_fraction * ev.head_width as f64 && w < cfg.head_width_fraction * ev.median_width
        });
        if ev.neck_slice.is_some() {
            report.flags.insert(AnomalyFlag::HeadNeckInFov);
        }
    }

    let centroids = slice_centroids(&body.mask);
    let means: Vec<(String, Option<f64>)> = dominant_regions(assembled)
        .into_iter()
        .map(|(name, ks)| {
            let vals: Vec<f64> = ks.iter().filter_map(|&k| centroids[k]).collect();
            (name, (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    for w in means.windows(2) {
        if let (Some(a), Some(b)) = (w[0].1, w[1].1) {
            let jump = (b - a).abs();
            ev.centroid_jumps.push(CentroidJump { upper: w[0].0.clone(), lower: w[1].0.clone(), jump_voxels: jump });
            if jump > cfg.shift_voxels {
                report.flags.insert(AnomalyFlag::SeriesShifted);
            }
        }
    }

    let (c, s) = (ev.coronal_max_run, ev.sagittal_max_run);
    let runs_flagged = (c > cfg.run_both && s > cfg.run_both) || c > cfg.run_either || s > cfg.run_either;
    if runs_flagged && !report.flags.contains(&AnomalyFlag::SeriesShifted) {
        report.flags.insert(AnomalyFlag::Other);
    }
    AnomalyAnalysis { report, body: Some(body), coronal: Some(coronal), sagittal: Some(sagittal) }
}

/// Flags FOV, dropout, shift and discontinuity anomalies. Always produces a report.
pub fn detect_anomalies(assembled: &AssembledVolume, cfg: &AnomalyConfig) -> AnomalyReport {
    analyze_anomalies(assembled, cfg).report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(dims: [usize; 3]) -> Geometry {
        Geometry::axis_aligned(dims, [1.0; 3], [0.0; 3]).unwrap()
    }

    #[test]
    fn zero_volume_is_empty_body() {
        let g = grid([20, 20, 20]);
        let r = body_mask_from(&vec![0.0; 8000], &g, &AnomalyConfig::default());
        assert!(matches!(r, Err(Error::EmptyBody)));
    }

    #[test]
    fn only_largest_blob_kept() {
        let dims = [40, 40, 40];
        let g = grid(dims);
        let mut data = vec![0.0f32; 64000];
        for k in 0..40 {
            for j in 0..40 {
                for i in 0..40 {
                    let big = (5..25).contains(&i) && (5..25).contains(&j) && (5..25).contains(&k);
                    let small = (30..39).contains(&i) && (30..35).contains(&j) && (30..35).contains(&k);
                    if big || small {
                        data[i + 40 * (j + 40 * k)] = 100.0;
                    }
                }
            }
        }
        let b = body_mask_from(&data, &g, &AnomalyConfig::default()).unwrap();
        assert_eq!(b.component_count, 2);
        assert_eq!(b.mask.count(), 8000);
        assert!(!b.mask.data[35 + 40 * (32 + 40 * 32)]);
    }

    #[test]
    fn notch_run_measured_on_outer_contour() {
        let (w, h) = (80, 60);
        let mut m = Plane::filled(w, h, false);
        for y in 0..h {
            for x in 10..60 {
                let notch = (25..30).contains(&y) && x >= 60 - 14;
                m.set(x, y, !notch);
            }
        }
        let a = analyze_slice(m, &AnomalyConfig::default());
        let (run, row) = a.max_run();
        assert_eq!(run, 14);
        assert!(row == 25 || row == 29, "row {row}");
        assert!(a.interior.is_empty());
    }

    #[test]
    fn hole_is_interior() {
        let mut m = Plane::filled(80, 60, false);
        for y in 0..60 {
            for x in 10..60 {
                let hole = (20..30).contains(&y) && (30..40).contains(&x);
                m.set(x, y, !hole);
            }
        }
        let a = analyze_slice(m, &AnomalyConfig::default());
        assert_eq!(a.interior.len(), 1);
        let (row, col, _) = a.interior[0];
        assert!((23..27).contains(&row) && (33..37).contains(&col));
        assert!(a.max_run().0 <= 2);
    }
}
