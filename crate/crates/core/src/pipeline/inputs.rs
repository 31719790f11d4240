//! Readers for the raw subject layout and for stage outputs that later
//! commands pick up again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::assembly::{AssembledVolume, DixonSeries, DixonSubject, SeriesSpan, SliceProvenance, DIXON_CHANNELS};
use crate::error::{Error, Result};
use crate::landmarks::{Sex, SubjectMeta};
use crate::volume::{read_nifti, write_nifti, Channel, EchoSeries, Geometry, Sidecar, Volume, VoxelData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetaFile {
    #[serde(default)]
    pub subject_id: Option<String>,
    pub sex: Sex,
    pub height_mm: f64,
}

impl SubjectMetaFile {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn meta(&self) -> SubjectMeta {
        SubjectMeta { sex: self.sex, height_mm: self.height_mm }
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("summary serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn nifti_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "nii"))
        .collect();
    out.sort();
    Ok(out)
}

/// Whether `dir` holds at least one NIfTI file.
pub fn has_nifti(dir: &Path) -> bool {
    nifti_files(dir).is_ok_and(|f| !f.is_empty())
}

/// Loads `<series>_<channel>.nii` files into series ordered by name. Channels
/// absent on disk are absent from the series; unrelated files are ignored.
pub fn load_dixon_dir(dir: &Path) -> Result<DixonSubject> {
    let mut groups: BTreeMap<String, Vec<(usize, PathBuf)>> = BTreeMap::new();
    for path in nifti_files(dir)? {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let parsed = stem.rsplit_once('_').and_then(|(series, ch)| DIXON_CHANNELS.iter().position(|&c| c == ch).map(|c| (series.to_string(), c)));
        match parsed {
            Some((series, c)) => groups.entry(series).or_default().push((c, path)),
            None => log::warn!("ignoring {}: not named <series>_<channel>.nii", path.display()),
        }
    }
    let mut series = Vec::with_capacity(groups.len());
    for (name, mut files) in groups {
        files.sort();
        let mut geometry: Option<Geometry> = None;
        let mut channels = Vec::with_capacity(files.len());
        for (c, path) in files {
            let vol = read_nifti(&path)?;
            match &geometry {
                Some(g) if !g.same_grid(&vol.geometry, 1e-4) => {
                    return Err(Error::GeometryMismatch(format!("{} differs from the other channels of {name}", path.display())));
                }
                Some(_) => {}
                None => geometry = Some(vol.geometry.clone()),
            }
            let data = vol.channels.into_iter().next().map(|ch| ch.data).ok_or_else(|| Error::MalformedHeader("no channels".into()))?;
            channels.push(Channel::new(DIXON_CHANNELS[c], data));
        }
        let volume = Volume::new(geometry.expect("group holds at least one file"), channels)?;
        series.push(DixonSeries::new(name, volume));
    }
    Ok(DixonSubject { series })
}

/// Writes every channel of every series as `<series>_<channel>.nii`.
pub fn write_dixon_dir(subject: &DixonSubject, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for s in &subject.series {
        for ch in &s.volume.channels {
            let vol = Volume { geometry: s.volume.geometry.clone(), channels: vec![ch.clone()] };
            write_nifti(&vol, &dir.join(format!("{}_{}.nii", s.name, ch.name)))?;
        }
    }
    Ok(())
}

/// Magnitude and raw phase volumes plus their sidecar.
pub fn load_echo_dir(dir: &Path, phase_scale: f64) -> Result<EchoSeries> {
    let mag = read_nifti(&dir.join("mag.nii"))?;
    let phase = read_nifti(&dir.join("phase.nii"))?;
    let sidecar = Sidecar::read(&dir.join("sidecar.json"))?;
    EchoSeries::from_magnitude_phase(&mag, &phase, phase_scale, &sidecar)
}

/// Writes `mag.nii`, `phase.nii` (raw units, `phase_scale` per pi) and `sidecar.json`.
pub fn write_echo_dir(series: &EchoSeries, dir: &Path, name: &str, phase_scale: f64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &series.volume.geometry;
    let n = series.volume.channels.len();
    let mut mag = Vec::with_capacity(n);
    let mut phase = Vec::with_capacity(n);
    for e in 0..n {
        let echo = series.echo(e);
        mag.push(Channel::new(format!("echo{e}"), VoxelData::Float32(echo.iter().map(|c| c.norm()).collect())));
        let raw = echo.iter().map(|c| (c.arg() as f64 * phase_scale / std::f64::consts::PI) as f32).collect();
        phase.push(Channel::new(format!("echo{e}"), VoxelData::Float32(raw)));
    }
    write_nifti(&Volume::new(g.clone(), mag)?, &dir.join("mag.nii"))?;
    write_nifti(&Volume::new(g.clone(), phase)?, &dir.join("phase.nii"))?;
    series.sidecar(name).write(&dir.join("sidecar.json"))
}

/// First-echo magnitude of an echo series.
pub fn first_echo_magnitude(series: &EchoSeries) -> Vec<f32> {
    series.echo(0).iter().map(|c| c.norm()).collect()
}

/// What `summary/assembly.json` records: enough to rebuild the assembled
/// volume from the four channel files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssemblySummary {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub spans: Vec<SeriesSpan>,
    pub provenance: Vec<SliceProvenance>,
}

impl AssemblySummary {
    pub fn of(a: &AssembledVolume) -> Self {
        Self { dims: a.dims(), spacing_mm: a.volume.geometry.spacing(), spans: a.spans.clone(), provenance: a.provenance.clone() }
    }
}

/// Writes one float NIfTI per channel as `<prefix><channel>.nii`.
pub fn write_assembled_channels(a: &AssembledVolume, dir: &Path, prefix: &str) -> Result<()> {
    for ch in &a.volume.channels {
        let vol = Volume { geometry: a.volume.geometry.clone(), channels: vec![ch.clone()] };
        write_nifti(&vol, &dir.join(format!("{prefix}{}.nii", ch.name)))?;
    }
    Ok(())
}

/// Rebuilds an assembled volume from `<prefix><channel>.nii` files and an assembly summary.
pub fn read_assembled(dir: &Path, prefix: &str, summary: &AssemblySummary) -> Result<AssembledVolume> {
    let mut geometry: Option<Geometry> = None;
    let mut channels = Vec::new();
    for ch in DIXON_CHANNELS {
        let vol = read_nifti(&dir.join(format!("{prefix}{ch}.nii")))?;
        if vol.geometry.dims() != summary.dims {
            return Err(Error::GeometryMismatch(format!("{prefix}{ch}.nii does not match the assembly summary")));
        }
        geometry.get_or_insert_with(|| vol.geometry.clone());
        channels.push(Channel::new(ch, VoxelData::Float32(vol.into_f32())));
    }
    Ok(AssembledVolume {
        volume: Volume::new(geometry.expect("four channels read"), channels)?,
        provenance: summary.provenance.clone(),
        spans: summary.spans.clone(),
    })
}
