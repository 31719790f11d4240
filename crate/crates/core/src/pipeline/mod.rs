//! Batch orchestration: one subject directory in, the fixed output tree out.
//!
//! A subject directory holds the raw acquisitions under `raw/` (see
//! [`crate::phantom::subject`] for the layout). Running it creates
//! `analysis/`, `landmarks/`, `nifti/`, `plots/`, `summary/` and `tmp/` next
//! to `raw/`. `tmp/` holds the stage log of a run in progress and is deleted
//! once every stage has finished without failure.

pub mod cohort;
pub mod config;
pub mod inputs;
pub mod plot;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::anomaly::{analyze_anomalies, AnomalyFlag};
use crate::assembly::{assemble, check_inventory, AssembledVolume, DixonSubject};
use crate::bias::{apply_in_place, default_mask, estimate_bias_field};
use crate::error::{Error, FailureReason, Result};
use crate::imgproc::{coronal_plane, histogram_quantile, Plane};
use crate::landmarks::{detect_joints, Atlas, Joint, JointReport, LandmarkStatus};
use crate::placement::{liver_percent_location, locate_slice, pancreas_census, voxel_volume_ml, PlacementScore};
use crate::quantify::{fit_map, iron_concentration, summarize_maps, QuantFlag, QuantMaps, QuantSummary};
use crate::swap::{detect_swaps, swap_region, Region, SwapConfig, SwapLabel, SwapReport};
use crate::volume::{read_nifti, write_nifti, EchoSeries, Mask, Volume};

pub use cohort::{run_cohort, CohortSummary};
pub use config::PipelineConfig;
use inputs::{first_echo_magnitude, load_dixon_dir, load_echo_dir, write_assembled_channels, write_json, AssemblySummary, SubjectMetaFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    Dixon,
    PancreasT1w,
    LiverGre,
    LiverIdeal,
    PancreasGre,
}

impl Acquisition {
    pub const ALL: [Acquisition; 5] =
        [Acquisition::Dixon, Acquisition::PancreasT1w, Acquisition::LiverGre, Acquisition::LiverIdeal, Acquisition::PancreasGre];
    pub const MULTIECHO: [Acquisition; 3] = [Acquisition::LiverGre, Acquisition::LiverIdeal, Acquisition::PancreasGre];

    /// Directory name under `raw/`, also the prefix of derived files.
    pub fn name(self) -> &'static str {
        match self {
            Acquisition::Dixon => "dixon",
            Acquisition::PancreasT1w => "pancreas_t1w",
            Acquisition::LiverGre => "liver_gre",
            Acquisition::LiverIdeal => "liver_ideal",
            Acquisition::PancreasGre => "pancreas_gre",
        }
    }

    pub fn stages(self) -> &'static [Stage] {
        match self {
            Acquisition::Dixon => &[Stage::Swaps, Stage::Assemble, Stage::Anomaly, Stage::Landmarks],
            Acquisition::PancreasT1w => &[Stage::BiasCorrect],
            _ => &[Stage::Quantify, Stage::Placement],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Swaps,
    Assemble,
    Anomaly,
    Landmarks,
    BiasCorrect,
    Quantify,
    Placement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum StageStatus {
    Ok,
    Failed { reason: FailureReason, message: String },
    Skipped { note: String },
}

impl StageStatus {
    pub fn failed(e: &Error) -> Self {
        StageStatus::Failed { reason: e.census_reason(), message: e.to_string() }
    }

    pub fn skipped(note: impl Into<String>) -> Self {
        StageStatus::Skipped { note: note.into() }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self, StageStatus::Ok)
    }

    pub fn is_failed(&self) -> bool {
        matches!(self, StageStatus::Failed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub acquisition: Acquisition,
    pub stage: Stage,
    #[serde(flatten)]
    pub status: StageStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionRecord {
    pub present: bool,
    /// Terminal status: the first failed stage, else ok. Absent acquisitions are skipped.
    #[serde(flatten)]
    pub status: StageStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapHit {
    pub series: usize,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementEntry {
    pub acquisition: Acquisition,
    #[serde(flatten)]
    pub score: PlacementScore,
}

/// QC findings gathered across stages.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct QcRollup {
    pub swaps: Vec<SwapHit>,
    pub anomaly_flags: Vec<AnomalyFlag>,
    pub missing_joints: Vec<Joint>,
    pub placement: Vec<PlacementEntry>,
    pub quant_flags: BTreeMap<Acquisition, Vec<QuantFlag>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub manifest_version: u32,
    pub acquisitions: BTreeMap<Acquisition, AcquisitionRecord>,
    pub stages: Vec<StageRecord>,
    pub qc: QcRollup,
    /// Set when the subject could not be run at all.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SubjectRecord {
    fn new(subject_id: String, inventory: &BTreeMap<Acquisition, bool>) -> Self {
        let acquisitions = Acquisition::ALL
            .iter()
            .map(|&a| {
                let present = inventory.get(&a).copied().unwrap_or(false);
                let status = if present { StageStatus::Ok } else { StageStatus::skipped("not acquired") };
                (a, AcquisitionRecord { present, status })
            })
            .collect();
        Self { subject_id, manifest_version: MANIFEST.version, acquisitions, stages: Vec::new(), qc: QcRollup::default(), error: None }
    }

    /// Record of a subject that could not be started.
    pub fn unrunnable(subject_id: String, e: &Error) -> Self {
        let mut r = Self::new(subject_id, &BTreeMap::new());
        r.error = Some(e.to_string());
        r
    }

    pub fn stage(&self, acquisition: Acquisition, stage: Stage) -> Option<&StageStatus> {
        self.stages.iter().find(|s| s.acquisition == acquisition && s.stage == stage).map(|s| &s.status)
    }

    pub fn any_failed(&self) -> bool {
        self.error.is_some() || self.stages.iter().any(|s| s.status.is_failed())
    }

    /// At least one present acquisition finished without failure.
    pub fn any_success(&self) -> bool {
        self.acquisitions.values().any(|a| a.present && a.status.is_ok())
    }

    fn push(&mut self, acquisition: Acquisition, stage: Stage, status: StageStatus) {
        log::info!("{} {}/{stage:?}: {status:?}", self.subject_id, acquisition.name());
        let acq = self.acquisitions.get_mut(&acquisition).expect("every acquisition has a record");
        if acq.present && acq.status.is_ok() && status.is_failed() {
            acq.status = status.clone();
        }
        self.stages.push(StageRecord { acquisition, stage, status });
    }
}

/// A file the output tree is expected to contain, and the stage that writes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: &'static str,
    pub acquisition: Option<Acquisition>,
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Manifest {
    pub version: u32,
    pub folders: [&'static str; 6],
    pub files: &'static [ManifestEntry],
}

const fn entry(path: &'static str, acquisition: Acquisition, stage: Stage) -> ManifestEntry {
    ManifestEntry { path, acquisition: Some(acquisition), stage: Some(stage) }
}

use Acquisition::{Dixon, LiverGre, LiverIdeal, PancreasGre, PancreasT1w};

/// Fixed names of the output tree. Bump `version` whenever a name changes.
pub const MANIFEST: Manifest = Manifest {
    version: 1,
    folders: ["analysis", "landmarks", "nifti", "plots", "summary", "tmp"],
    files: &[
        ManifestEntry { path: "summary/subject.json", acquisition: None, stage: None },
        entry("summary/swaps.json", Dixon, Stage::Swaps),
        entry("nifti/dixon_in.nii", Dixon, Stage::Assemble),
        entry("nifti/dixon_opp.nii", Dixon, Stage::Assemble),
        entry("nifti/dixon_fat.nii", Dixon, Stage::Assemble),
        entry("nifti/dixon_water.nii", Dixon, Stage::Assemble),
        entry("summary/assembly.json", Dixon, Stage::Assemble),
        entry("plots/dixon_coronal.png", Dixon, Stage::Assemble),
        entry("analysis/body_mask.nii", Dixon, Stage::Anomaly),
        entry("summary/anomaly.json", Dixon, Stage::Anomaly),
        entry("landmarks/joints.json", Dixon, Stage::Landmarks),
        entry("nifti/pancreas_t1w.nii", PancreasT1w, Stage::BiasCorrect),
        entry("analysis/liver_gre_pdff.nii", LiverGre, Stage::Quantify),
        entry("analysis/liver_gre_r2star.nii", LiverGre, Stage::Quantify),
        entry("analysis/liver_gre_iron.nii", LiverGre, Stage::Quantify),
        entry("summary/liver_gre_quant.json", LiverGre, Stage::Quantify),
        entry("plots/liver_gre_pdff.png", LiverGre, Stage::Quantify),
        entry("analysis/liver_ideal_pdff.nii", LiverIdeal, Stage::Quantify),
        entry("analysis/liver_ideal_r2star.nii", LiverIdeal, Stage::Quantify),
        entry("analysis/liver_ideal_iron.nii", LiverIdeal, Stage::Quantify),
        entry("summary/liver_ideal_quant.json", LiverIdeal, Stage::Quantify),
        entry("plots/liver_ideal_pdff.png", LiverIdeal, Stage::Quantify),
        entry("analysis/pancreas_gre_pdff.nii", PancreasGre, Stage::Quantify),
        entry("analysis/pancreas_gre_r2star.nii", PancreasGre, Stage::Quantify),
        entry("analysis/pancreas_gre_iron.nii", PancreasGre, Stage::Quantify),
        entry("summary/pancreas_gre_quant.json", PancreasGre, Stage::Quantify),
        entry("plots/pancreas_gre_pdff.png", PancreasGre, Stage::Quantify),
        ManifestEntry { path: "summary/placement.json", acquisition: None, stage: Some(Stage::Placement) },
    ],
};

impl Manifest {
    /// Files a run with `record` must have produced. Plots are included only when enabled.
    pub fn expected(&self, record: &SubjectRecord, plots: bool) -> Vec<&'static str> {
        self.files
            .iter()
            .filter(|f| plots || !f.path.starts_with("plots/"))
            .filter(|f| match (f.acquisition, f.stage) {
                (None, None) => true,
                (None, Some(stage)) => record.stages.iter().any(|s| s.stage == stage && s.status.is_ok()),
                (Some(a), Some(stage)) => record.stage(a, stage).is_some_and(StageStatus::is_ok),
                (Some(_), None) => false,
            })
            .map(|f| f.path)
            .collect()
    }
}

/// Summary written per multiecho acquisition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantReport {
    pub acquisition: Acquisition,
    /// `mask` when a region mask from `raw/masks` was used, `signal` otherwise.
    pub region: String,
    pub fitted_voxels: usize,
    #[serde(flatten)]
    pub summary: QuantSummary,
}

/// Runs subjects with one configuration and a lazily loaded atlas bank.
pub struct Pipeline {
    pub config: PipelineConfig,
    bank: OnceLock<std::result::Result<Vec<Atlas>, String>>,
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config, bank: OnceLock::new() }
    }

    pub fn with_bank(config: PipelineConfig, bank: Vec<Atlas>) -> Self {
        let lock = OnceLock::new();
        let _ = lock.set(Ok(bank));
        Self { config, bank: lock }
    }

    fn bank(&self) -> Result<&[Atlas]> {
        match self.bank.get_or_init(|| self.config.atlas_bank.load().map_err(|e| e.to_string())) {
            Ok(b) => Ok(b),
            Err(e) => Err(Error::InvalidConfig(format!("atlas bank unavailable: {e}"))),
        }
    }

    /// Runs every applicable stage of the subject in `dir` and writes the output tree.
    pub fn run_subject(&self, dir: &Path) -> Result<SubjectRecord> {
        let raw = dir.join("raw");
        let inventory: BTreeMap<Acquisition, bool> = Acquisition::ALL.iter().map(|&a| (a, inputs::has_nifti(&raw.join(a.name())))).collect();
        if !inventory.values().any(|&p| p) {
            return Err(Error::NoRecognizedInput(dir.to_path_buf()));
        }
        let meta = match raw.join("meta.json") {
            p if p.exists() => Some(SubjectMetaFile::read(&p)),
            _ => None,
        };
        let fallback = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "subject".into());
        let subject_id = meta.as_ref().and_then(|m| m.as_ref().ok()).and_then(|m| m.subject_id.clone()).unwrap_or(fallback);

        for f in MANIFEST.folders {
            let p = dir.join(f);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
            }
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }

        let mut run = SubjectRun { dir, record: SubjectRecord::new(subject_id, &inventory) };
        let cfg = &self.config;
        for acq in Acquisition::ALL {
            if !inventory[&acq] {
                for &stage in acq.stages() {
                    run.push(acq, stage, StageStatus::skipped("not acquired"))?;
                }
                continue;
            }
            match acq {
                Acquisition::Dixon => self.dixon_chain(&mut run, meta.as_ref())?,
                Acquisition::PancreasT1w => {
                    let status = to_status(self.bias_correct_t1w(dir));
                    run.push(acq, Stage::BiasCorrect, status)?;
                }
                _ => {
                    let status = to_status(self.quantify(&mut run, acq));
                    run.push(acq, Stage::Quantify, status)?;
                    let status = self.placement(&mut run, acq);
                    run.push(acq, Stage::Placement, status)?;
                }
            }
        }
        if !run.record.qc.placement.is_empty() {
            write_json(&dir.join("summary/placement.json"), &run.record.qc.placement)?;
        }
        write_json(&dir.join("summary/subject.json"), &run.record)?;
        if !run.record.any_failed() && !cfg.run.keep_tmp {
            let tmp = dir.join("tmp");
            std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        }
        Ok(run.record)
    }

    fn dixon_chain(&self, run: &mut SubjectRun, meta: Option<&Result<SubjectMetaFile>>) -> Result<()> {
        let cfg = &self.config;
        let dir = run.dir;
        let swapped = load_dixon_dir(&dir.join("raw/dixon")).and_then(|mut subject| {
            let report = check_and_correct_swaps(&mut subject, &cfg.swap)?;
            Ok((subject, report))
        });
        let subject = match swapped {
            Ok((subject, report)) => {
                write_json(&dir.join("summary/swaps.json"), &report)?;
                run.record.qc.swaps = report.swapped().map(|c| SwapHit { series: c.series, region: c.region }).collect();
                run.push(Dixon, Stage::Swaps, StageStatus::Ok)?;
                subject
            }
            Err(e) => {
                run.push(Dixon, Stage::Swaps, StageStatus::failed(&e))?;
                for stage in [Stage::Assemble, Stage::Anomaly, Stage::Landmarks] {
                    run.push(Dixon, stage, StageStatus::skipped("depends on swaps"))?;
                }
                return Ok(());
            }
        };

        let assembled = match assemble(&subject, &cfg.assembly) {
            Ok(a) => a,
            Err(e) => {
                run.push(Dixon, Stage::Assemble, StageStatus::failed(&e))?;
                run.push(Dixon, Stage::Anomaly, StageStatus::skipped("depends on assemble"))?;
                run.push(Dixon, Stage::Landmarks, StageStatus::skipped("depends on assemble"))?;
                return Ok(());
            }
        };
        drop(subject);
        write_assembled_channels(&assembled, &dir.join("nifti"), "dixon_")?;
        write_json(&dir.join("summary/assembly.json"), &AssemblySummary::of(&assembled))?;
        run.push(Dixon, Stage::Assemble, StageStatus::Ok)?;

        let analysis = analyze_anomalies(&assembled, &cfg.anomaly);
        if let Some(body) = &analysis.body {
            write_nifti(&body.mask.to_volume(), &dir.join("analysis/body_mask.nii"))?;
        }
        write_json(&dir.join("summary/anomaly.json"), &analysis.report)?;
        run.record.qc.anomaly_flags = analysis.report.flags.iter().copied().collect();
        run.push(Dixon, Stage::Anomaly, StageStatus::Ok)?;

        let joints = match (meta, &analysis.body) {
            (None, _) => {
                run.push(Dixon, Stage::Landmarks, StageStatus::skipped("no subject metadata"))?;
                None
            }
            (Some(Err(e)), _) => {
                run.push(Dixon, Stage::Landmarks, StageStatus::failed(e))?;
                None
            }
            (Some(Ok(_)), None) => {
                run.push(Dixon, Stage::Landmarks, StageStatus::failed(&Error::EmptyBody))?;
                None
            }
            (Some(Ok(m)), Some(body)) => {
                let water = Volume {
                    geometry: assembled.volume.geometry.clone(),
                    channels: vec![assembled.volume.channel("water").expect("assembled water").clone()],
                };
                match self.bank().and_then(|bank| detect_joints(&water, &body.mask, &m.meta(), bank, &cfg.landmarks)) {
                    Ok(report) => {
                        write_json(&dir.join("landmarks/joints.json"), &report)?;
                        run.record.qc.missing_joints = report.missing();
                        run.push(Dixon, Stage::Landmarks, StageStatus::Ok)?;
                        Some(report)
                    }
                    Err(e) => {
                        run.push(Dixon, Stage::Landmarks, StageStatus::failed(&e))?;
                        None
                    }
                }
            }
        };
        if cfg.run.plots {
            plot::save_png(&coronal_overview(&assembled, joints.as_ref()), &dir.join("plots/dixon_coronal.png"))?;
        }
        Ok(())
    }

    fn bias_correct_t1w(&self, dir: &Path) -> Result<()> {
        let vol = read_nifti(&dir.join("raw/pancreas_t1w/t1w.nii"))?;
        let mut data = vol.to_f32();
        let mask = default_mask(&data, &vol.geometry, self.config.assembly.bias.mask_fraction);
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        let field = estimate_bias_field(&data, &mask, &self.config.assembly.bias)?;
        apply_in_place(&mut data, &field);
        write_nifti(&Volume::from_f32(vol.geometry, data), &dir.join("nifti/pancreas_t1w.nii"))
    }

    fn quantify(&self, run: &mut SubjectRun, acq: Acquisition) -> Result<()> {
        let cfg = &self.config;
        let dir = run.dir;
        let series = load_echo_dir(&dir.join("raw").join(acq.name()), cfg.quant.phase_scale)?;
        let g = series.volume.geometry.clone();
        let signal = signal_mask(&series, cfg.run.signal_fraction)?;
        let maps = fit_map(&series, Some(&signal), &cfg.quant, cfg.run.parallel_fit)?;
        let roi_path = dir.join("raw/masks").join(format!("{}.nii", acq.name()));
        let roi = if roi_path.exists() {
            let m = Mask::from_volume(&read_nifti(&roi_path)?);
            if !m.geometry.same_grid(&g, 1e-4) {
                return Err(Error::GeometryMismatch(format!("{} does not match the acquisition grid", roi_path.display())));
            }
            Some(m)
        } else {
            None
        };
        let summary = summarize_maps(&maps, roi.as_ref());
        run.record.qc.quant_flags.insert(acq, summary.flags.clone());
        let name = acq.name();
        write_nifti(&maps.pdff, &dir.join(format!("analysis/{name}_pdff.nii")))?;
        write_nifti(&maps.r2star, &dir.join(format!("analysis/{name}_r2star.nii")))?;
        write_nifti(&iron_map(&maps), &dir.join(format!("analysis/{name}_iron.nii")))?;
        let report = QuantReport {
            acquisition: acq,
            region: if roi.is_some() { "mask".into() } else { "signal".into() },
            fitted_voxels: maps.mask.count(),
            summary,
        };
        write_json(&dir.join(format!("summary/{name}_quant.json")), &report)?;
        if cfg.run.plots {
            let d = g.dims();
            let plane = Plane::from_vec(d[0], d[1], maps.pdff.to_f32());
            let sp = g.spacing();
            plot::save_png(&plot::render_plane(&plane, 0.0, 40.0, sp[1] / sp[0]), &dir.join(format!("plots/{name}_pdff.png")))?;
        }
        Ok(())
    }

    fn placement(&self, run: &mut SubjectRun, acq: Acquisition) -> StageStatus {
        let dir = run.dir;
        let result = match acq {
            Acquisition::PancreasGre => {
                let path = dir.join("raw/masks/pancreas_gre.nii");
                if !path.exists() {
                    return StageStatus::skipped("no pancreas mask");
                }
                read_nifti(&path).map(|v| {
                    let m = Mask::from_volume(&v);
                    pancreas_census(&m.data, voxel_volume_ml(&m.geometry))
                })
            }
            _ => {
                let path = dir.join("raw/masks/liver_3d.nii");
                if !path.exists() {
                    return StageStatus::skipped("no liver mask");
                }
                read_nifti(&path).and_then(|v| {
                    let liver = Mask::from_volume(&v);
                    let slice = read_nifti(&dir.join("raw").join(acq.name()).join("mag.nii"))?;
                    let k = locate_slice(&slice.geometry, &liver.geometry)?;
                    liver_percent_location(k, &liver)
                })
            }
        };
        match result {
            Ok(score) => {
                run.record.qc.placement.push(PlacementEntry { acquisition: acq, score });
                StageStatus::Ok
            }
            Err(e) => StageStatus::failed(&e),
        }
    }
}

/// Checks the inventory, detects swaps on the ranked series and, when
/// `cfg.correct` is set, corrects them in place.
pub fn check_and_correct_swaps(subject: &mut DixonSubject, cfg: &SwapConfig) -> Result<SwapReport> {
    let headers: Vec<_> = subject.series.iter().map(|s| s.header()).collect();
    let order = check_inventory(&headers)?;
    let mut report = detect_swaps(subject, cfg)?;
    if cfg.correct {
        for c in report.checks.iter_mut().filter(|c| c.label == SwapLabel::Swapped) {
            swap_region(&mut subject.series[order[c.series - 1]], c.region)?;
            c.corrected = true;
        }
    }
    Ok(report)
}

/// Voxels whose first-echo magnitude exceeds `fraction` of its 99th percentile.
pub fn signal_mask(series: &EchoSeries, fraction: f64) -> Result<Mask> {
    let magnitude = first_echo_magnitude(series);
    let floor = fraction as f32 * histogram_quantile(&magnitude, 0.99);
    let signal = Mask::new(series.volume.geometry.clone(), magnitude.iter().map(|&m| m > floor && m > 0.0).collect());
    if signal.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(signal)
}

/// Runs one subject with a fresh pipeline.
pub fn run_subject(dir: &Path, config: &PipelineConfig) -> Result<SubjectRecord> {
    Pipeline::new(config.clone()).run_subject(dir)
}

struct SubjectRun<'a> {
    dir: &'a Path,
    record: SubjectRecord,
}

impl SubjectRun<'_> {
    /// Records a stage and refreshes the progress log in `tmp/`.
    fn push(&mut self, acquisition: Acquisition, stage: Stage, status: StageStatus) -> Result<()> {
        self.record.push(acquisition, stage, status);
        write_json(&self.dir.join("tmp/progress.json"), &self.record.stages)
    }
}

fn to_status(r: Result<()>) -> StageStatus {
    match r {
        Ok(()) => StageStatus::Ok,
        Err(e) => StageStatus::failed(&e),
    }
}

/// Iron concentration inside the fitted mask, zero elsewhere.
pub fn iron_map(maps: &QuantMaps) -> Volume {
    let r2 = maps.r2star.to_f32();
    let data = r2
        .iter()
        .zip(&maps.mask.data)
        .map(|(&r, &m)| if m { iron_concentration(r as f64).map_or(0.0, |v| v as f32) } else { 0.0 })
        .collect();
    let mut v = Volume::from_f32(maps.r2star.geometry.clone(), data);
    v.channels[0].name = "iron".into();
    v
}

/// Central coronal water slice with present landmarks marked.
fn coronal_overview(a: &AssembledVolume, joints: Option<&JointReport>) -> image::RgbImage {
    let g = &a.volume.geometry;
    let dims = g.dims();
    let water = a.channel("water");
    let plane = coronal_plane(water, dims, dims[1] / 2);
    let sp = g.spacing();
    let aspect = sp[2] / sp[0];
    let mut img = plot::render_plane(&plane, 0.0, histogram_quantile(water, 0.99), aspect);
    for l in joints.map(|j| j.landmarks.as_slice()).unwrap_or_default() {
        if l.status != LandmarkStatus::Present {
            continue;
        }
        if let Ok(v) = g.world_to_voxel(l.position_mm) {
            plot::draw_cross(&mut img, v[0], v[2] * aspect, 4, plot::RED);
        }
    }
    img
}
