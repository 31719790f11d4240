//! Cohort runs: every subject directory under a root, on a bounded pool,
//! rolled up into census tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::inputs::write_json;
use super::plot;
use super::{Acquisition, Pipeline, PipelineConfig, StageStatus, SubjectRecord, MANIFEST};
use crate::anomaly::AnomalyFlag;
use crate::error::{Error, FailureReason, Result};
use crate::landmarks::Joint;
use crate::placement::{Organ, PlacementFlag, LIVER_RELIABLE};
use crate::swap::{regions_for, Region};

pub const SUMMARY_JSON: &str = "cohort_summary.json";
pub const CENSUS_CSV: &str = "cohort_census.csv";
pub const SUBJECTS_CSV: &str = "cohort_subjects.csv";
pub const PLACEMENT_PNG: &str = "cohort_liver_placement.png";

/// Processed and failed counts of one acquisition type; `processed + failed = total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesCensus {
    pub acquisition: Acquisition,
    pub total: usize,
    pub processed: usize,
    pub failed: usize,
    pub failures: BTreeMap<FailureReason, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapCensusRow {
    pub series: usize,
    pub region: Region,
    pub swapped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapCensus {
    pub subjects_with_swaps: usize,
    pub total_swaps: usize,
    pub checks: Vec<SwapCensusRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyCensus {
    pub subjects_with_flags: usize,
    pub flags: BTreeMap<AnomalyFlag, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointCoverage {
    pub joint: Joint,
    pub present: usize,
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkCensus {
    /// Subjects whose landmark stage ran.
    pub subjects: usize,
    pub subjects_missing_knee: usize,
    pub subjects_missing_shoulder: usize,
    pub joints: Vec<JointCoverage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementPoint {
    pub subject_id: String,
    pub acquisition: Acquisition,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub percent_location: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voxel_count: Option<usize>,
    pub flag: PlacementFlag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub manifest_version: u32,
    /// The only time-dependent field.
    pub generated_at: String,
    pub subjects: usize,
    /// Subjects with at least one successful acquisition.
    pub subjects_with_success: usize,
    pub census: Vec<SeriesCensus>,
    pub swaps: SwapCensus,
    pub anomalies: AnomalyCensus,
    pub landmarks: LandmarkCensus,
    pub placement: Vec<PlacementPoint>,
    pub records: Vec<SubjectRecord>,
}

impl CohortSummary {
    /// Builds the tables from records sorted by subject id.
    pub fn from_records(mut records: Vec<SubjectRecord>) -> Self {
        records.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));
        let census = Acquisition::ALL
            .iter()
            .map(|&acq| {
                let mut c = SeriesCensus { acquisition: acq, total: 0, processed: 0, failed: 0, failures: BTreeMap::new() };
                for r in &records {
                    let a = &r.acquisitions[&acq];
                    if !a.present {
                        continue;
                    }
                    c.total += 1;
                    match &a.status {
                        StageStatus::Failed { reason, .. } => {
                            c.failed += 1;
                            *c.failures.entry(*reason).or_default() += 1;
                        }
                        _ => c.processed += 1,
                    }
                }
                c
            })
            .collect();

        let mut checks: Vec<SwapCensusRow> = (1..=6)
            .flat_map(|s| regions_for(s).iter().map(move |&region| SwapCensusRow { series: s, region, swapped: 0 }))
            .collect();
        for hit in records.iter().flat_map(|r| &r.qc.swaps) {
            if let Some(row) = checks.iter_mut().find(|c| c.series == hit.series && c.region == hit.region) {
                row.swapped += 1;
            }
        }
        let swaps = SwapCensus {
            subjects_with_swaps: records.iter().filter(|r| !r.qc.swaps.is_empty()).count(),
            total_swaps: checks.iter().map(|c| c.swapped).sum(),
            checks,
        };

        let mut flags: BTreeMap<AnomalyFlag, usize> = AnomalyFlag::ALL.iter().map(|&f| (f, 0)).collect();
        for f in records.iter().flat_map(|r| &r.qc.anomaly_flags) {
            *flags.entry(*f).or_default() += 1;
        }
        let anomalies =
            AnomalyCensus { subjects_with_flags: records.iter().filter(|r| !r.qc.anomaly_flags.is_empty()).count(), flags };

        let ran: Vec<&SubjectRecord> =
            records.iter().filter(|r| r.stage(Acquisition::Dixon, super::Stage::Landmarks).is_some_and(StageStatus::is_ok)).collect();
        let missing_any = |r: &&&SubjectRecord, js: [Joint; 2]| r.qc.missing_joints.iter().any(|j| js.contains(j));
        let landmarks = LandmarkCensus {
            subjects: ran.len(),
            subjects_missing_knee: ran.iter().filter(|r| missing_any(r, [Joint::KneeLeft, Joint::KneeRight])).count(),
            subjects_missing_shoulder: ran.iter().filter(|r| missing_any(r, [Joint::ShoulderLeft, Joint::ShoulderRight])).count(),
            joints: Joint::ALL
                .iter()
                .map(|&joint| {
                    let missing = ran.iter().filter(|r| r.qc.missing_joints.contains(&joint)).count();
                    JointCoverage { joint, present: ran.len() - missing, missing }
                })
                .collect(),
        };

        let placement = records
            .iter()
            .flat_map(|r| {
                r.qc.placement.iter().map(|p| PlacementPoint {
                    subject_id: r.subject_id.clone(),
                    acquisition: p.acquisition,
                    percent_location: p.score.percent_location,
                    voxel_count: p.score.voxel_count,
                    flag: p.score.flag,
                })
            })
            .collect();

        Self {
            manifest_version: MANIFEST.version,
            generated_at: now_rfc3339(),
            subjects: records.len(),
            subjects_with_success: records.iter().filter(|r| r.any_success()).count(),
            census,
            swaps,
            anomalies,
            landmarks,
            placement,
            records,
        }
    }

    /// Writes the JSON summary, the two CSV tables and the placement plot into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(SUMMARY_JSON), self)?;
        write_csv(&dir.join(CENSUS_CSV), self.census_rows())?;
        write_csv(&dir.join(SUBJECTS_CSV), self.subject_rows())?;
        let liver: Vec<&PlacementPoint> =
            self.placement.iter().filter(|p| p.acquisition != Acquisition::PancreasGre && p.percent_location.is_some()).collect();
        let points: Vec<(f64, f64, bool)> = liver
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64, p.percent_location.unwrap_or_default(), p.flag != PlacementFlag::Ok))
            .collect();
        let img = plot::scatter(&points, [-0.5, liver.len().max(1) as f64 - 0.5], [-25.0, 125.0], &LIVER_RELIABLE);
        plot::save_png(&img, &dir.join(PLACEMENT_PNG))
    }

    fn census_rows(&self) -> Vec<CensusRow> {
        self.census
            .iter()
            .map(|c| {
                let n = |r: FailureReason| c.failures.get(&r).copied().unwrap_or(0);
                CensusRow {
                    acquisition: c.acquisition.name(),
                    total: c.total,
                    processed: c.processed,
                    failed: c.failed,
                    missing_series: n(FailureReason::MissingSeries),
                    missing_channel: n(FailureReason::MissingChannel),
                    non_standard: n(FailureReason::NonStandard),
                    corrupt: n(FailureReason::Corrupt),
                    other: n(FailureReason::Other),
                }
            })
            .collect()
    }

    fn subject_rows(&self) -> Vec<SubjectRow> {
        self.records
            .iter()
            .map(|r| {
                let status = |a: Acquisition| {
                    let rec = &r.acquisitions[&a];
                    match (&rec.status, rec.present) {
                        (_, false) => "absent".to_string(),
                        (StageStatus::Failed { reason, .. }, _) => format!("failed:{}", reason_name(*reason)),
                        _ => "ok".to_string(),
                    }
                };
                let liver = r.qc.placement.iter().find(|p| p.score.organ == Organ::Liver);
                let pancreas = r.qc.placement.iter().find(|p| p.score.organ == Organ::Pancreas);
                SubjectRow {
                    subject_id: r.subject_id.clone(),
                    dixon: status(Acquisition::Dixon),
                    pancreas_t1w: status(Acquisition::PancreasT1w),
                    liver_gre: status(Acquisition::LiverGre),
                    liver_ideal: status(Acquisition::LiverIdeal),
                    pancreas_gre: status(Acquisition::PancreasGre),
                    swaps: r.qc.swaps.len(),
                    anomaly_flags: join(r.qc.anomaly_flags.iter().map(|f| serde_name(f))),
                    missing_joints: join(r.qc.missing_joints.iter().map(|j| j.name().to_string())),
                    liver_percent_location: liver.and_then(|p| p.score.percent_location),
                    pancreas_voxels: pancreas.and_then(|p| p.score.voxel_count),
                }
            })
            .collect()
    }
}

#[derive(Serialize)]
struct CensusRow {
    acquisition: &'static str,
    total: usize,
    processed: usize,
    failed: usize,
    missing_series: usize,
    missing_channel: usize,
    non_standard: usize,
    corrupt: usize,
    other: usize,
}

#[derive(Serialize)]
struct SubjectRow {
    subject_id: String,
    dixon: String,
    pancreas_t1w: String,
    liver_gre: String,
    liver_ideal: String,
    pancreas_gre: String,
    swaps: usize,
    anomaly_flags: String,
    missing_joints: String,
    liver_percent_location: Option<f64>,
    pancreas_voxels: Option<usize>,
}

fn serde_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn reason_name(r: FailureReason) -> String {
    serde_name(&r)
}

fn join(items: impl Iterator<Item = String>) -> String {
    items.collect::<Vec<_>>().join(";")
}

fn write_csv<T: Serialize>(path: &Path, rows: Vec<T>) -> Result<()> {
    let io = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc().format(&time::format_description::well_known::Rfc3339).unwrap_or_default()
}

/// Subject directories (those holding `raw/`) under `root`, sorted by name.
pub fn subject_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("raw").is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

impl Pipeline {
    /// Runs every subject under `root` on `parallelism` worker threads and
    /// writes the cohort tables into `root`. Subject failures are recorded,
    /// never raised.
    pub fn run_cohort(&self, root: &Path, parallelism: usize) -> Result<CohortSummary> {
        let dirs = subject_dirs(root)?;
        if dirs.is_empty() {
            log::warn!("no subject directories under {}", root.display());
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallelism.max(1))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        let records: Vec<SubjectRecord> = pool.install(|| {
            dirs.par_iter()
                .map(|d| {
                    self.run_subject(d).unwrap_or_else(|e| {
                        log::error!("{}: {e}", d.display());
                        let id = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                        SubjectRecord::unrunnable(id, &e)
                    })
                })
                .collect()
        });
        let summary = CohortSummary::from_records(records);
        summary.write(root)?;
        Ok(summary)
    }
}

pub fn run_cohort(root: &Path, parallelism: usize, config: &PipelineConfig) -> Result<CohortSummary> {
    Pipeline::new(config.clone()).run_cohort(root, parallelism)
}
