//! `abdopipe`: command-line front end for the abdominal MRI pipeline.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 when the
//! data could not be processed.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde_json::json;

use abdopipe_core::anomaly::analyze_anomalies;
use abdopipe_core::assembly::assemble;
use abdopipe_core::landmarks::{detect_joints, save_bank, Sex, SubjectMeta};
use abdopipe_core::phantom::atlas::make_atlas_bank_with;
use abdopipe_core::phantom::multiecho::{make_multiecho_phantom, MultiEchoConfig, IDEAL_ECHO_TIMES_MS};
use abdopipe_core::phantom::subject::{write_phantom_subject, SubjectPhantomConfig};
use abdopipe_core::phantom::Defect;
use abdopipe_core::pipeline::inputs::{
    load_dixon_dir, load_echo_dir, read_assembled, read_json, write_assembled_channels, write_dixon_dir, write_echo_dir, write_json,
    AssemblySummary, SubjectMetaFile,
};
use abdopipe_core::pipeline::{check_and_correct_swaps, iron_map, signal_mask, Pipeline, PipelineConfig};
use abdopipe_core::placement::{liver_percent_location, locate_slice, pancreas_census, voxel_volume_ml};
use abdopipe_core::quantify::{fit_map, harmonize_fit, read_pairs_csv, summarize_maps};
use abdopipe_core::swap::Region;
use abdopipe_core::volume::{read_nifti, write_nifti, Mask, Volume};
use abdopipe_core::Error;

#[derive(Debug, Parser)]
#[command(name = "abdopipe", version, about = "Abdominal MRI preprocessing, quality control and fat quantification")]
struct Cli {
    /// More log output; repeat for debug.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Pipeline configuration file (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set landmarks.atlas_count=25`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Assemble six Dixon series into one whole-body volume.
    Assemble {
        /// Directory of `<series>_<channel>.nii` files.
        dixon_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Detect and correct fat-water swaps before assembly.
        #[arg(long)]
        correct_swaps: bool,
    },
    /// Check the Dixon series for fat-water swaps.
    Swaps {
        dixon_dir: PathBuf,
        /// Write corrected series here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Screen an assembled volume for dropouts, cuts and misalignment.
    Anomaly {
        /// Directory holding `dixon_<channel>.nii`.
        dir: PathBuf,
        /// Assembly summary; defaults to `assembly.json` next to the volumes or in `../summary`.
        #[arg(long)]
        summary: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Locate the six bone joints in an assembled volume.
    Landmarks(LandmarkArgs),
    /// Fit PDFF and R2* maps to a multiecho acquisition.
    Quant {
        /// Directory with `mag.nii`, `phase.nii` and `sidecar.json`.
        acq_dir: PathBuf,
        /// Region mask for the summary; fitted voxels are used otherwise.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the placement of a single-slice acquisition.
    #[command(subcommand)]
    Placement(PlacementCommand),
    /// Fit linear and quadratic harmonization models to paired medians.
    Harmonize {
        /// Two-column CSV of paired measurements.
        csv: PathBuf,
        /// Significance level of the quadratic term.
        #[arg(long, default_value_t = 0.001)]
        alpha: f64,
    },
    /// Write synthetic test data.
    #[command(subcommand)]
    Phantom(PhantomCommand),
    /// Run every applicable stage on one subject directory.
    Run { subject_dir: PathBuf },
    /// Run every subject under a root directory and write the cohort summary.
    Cohort {
        root: PathBuf,
        /// Subjects processed concurrently; defaults to the number of cores.
        #[arg(short = 'j', long)]
        jobs: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct LandmarkArgs {
    /// Directory holding `dixon_<channel>.nii`.
    dir: PathBuf,
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Subject metadata JSON with `sex` and `height_mm`.
    #[arg(long, conflicts_with_all = ["sex", "height"], required_unless_present_all = ["sex", "height"])]
    meta: Option<PathBuf>,
    #[arg(long, value_parser = parse_sex, requires = "height")]
    sex: Option<Sex>,
    /// Standing height in mm.
    #[arg(long, requires = "sex")]
    height: Option<f64>,
    /// Body mask; derived from the in-phase channel otherwise.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Atlas bank directory; the synthetic bank is used otherwise.
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum PlacementCommand {
    /// Percent location of a liver slice within a 3-D liver mask.
    Liver {
        /// Liver mask on the assembled grid.
        #[arg(long)]
        mask: PathBuf,
        /// The single-slice acquisition (any volume on its grid).
        #[arg(long)]
        slice: PathBuf,
    },
    /// Voxel count and area of a pancreas mask on the slice.
    Pancreas {
        #[arg(long)]
        mask: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum PhantomCommand {
    /// A full subject directory with truth.json.
    Subject {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Subject description (TOML); command-line options win.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Inject a swap, e.g. `3:left_half`. Repeatable.
        #[arg(long = "swap", value_name = "SERIES:REGION", value_parser = parse_swap)]
        swaps: Vec<(usize, Region)>,
    },
    /// A tiled multiecho slice with known PDFF and R2*.
    Multiecho {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Use the 6-echo IDEAL echo times.
        #[arg(long)]
        ideal: bool,
        #[arg(long)]
        snr: Option<f64>,
    },
    /// A synthetic landmark atlas bank.
    AtlasBank {
        dir: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        count: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult<T = ExitCode> = Result<T, Failure>;

fn parse_sex(s: &str) -> Result<Sex, String> {
    match s.to_ascii_uppercase().as_str() {
        "F" | "FEMALE" => Ok(Sex::F),
        "M" | "MALE" => Ok(Sex::M),
        _ => Err(format!("`{s}` is not F or M")),
    }
}

fn parse_swap(s: &str) -> Result<(usize, Region), String> {
    let (series, region) = s.split_once(':').ok_or("expected SERIES:REGION")?;
    let series: usize = series.parse().map_err(|_| format!("`{series}` is not a series number"))?;
    if !(1..=6).contains(&series) {
        return Err("series must be between 1 and 6".into());
    }
    let region: Region = serde_json::from_value(json!(region)).map_err(|_| format!("`{region}` is not whole, left_half or right_half"))?;
    Ok((series, region))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(cli: &Cli) -> CliResult<PipelineConfig> {
    PipelineConfig::load(cli.config.as_deref(), &cli.overrides).map_err(|e| Failure::Usage(e.to_string()))
}

/// Pretty JSON on stdout. A closed pipe is not an error worth reporting.
fn print_json<T: serde::Serialize + ?Sized>(value: &T) {
    let text = serde_json::to_string_pretty(value).expect("output serializes");
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn run(cli: Cli) -> CliResult {
    let mut cfg = load_config(&cli)?;
    match cli.command {
        Command::Assemble { dixon_dir, out, correct_swaps } => {
            let mut subject = load_dixon_dir(&dixon_dir)?;
            if correct_swaps {
                cfg.swap.correct = true;
                let report = check_and_correct_swaps(&mut subject, &cfg.swap)?;
                log::info!("{} swapped region(s) corrected", report.swap_count());
            }
            let assembled = assemble(&subject, &cfg.assembly)?;
            create_dir(&out)?;
            write_assembled_channels(&assembled, &out, "dixon_")?;
            let summary = AssemblySummary::of(&assembled);
            write_json(&out.join("assembly.json"), &summary)?;
            print_json(&json!({ "dims": summary.dims, "spacing_mm": summary.spacing_mm, "spans": summary.spans }));
        }
        Command::Swaps { dixon_dir, out } => {
            let mut subject = load_dixon_dir(&dixon_dir)?;
            cfg.swap.correct = out.is_some();
            let report = check_and_correct_swaps(&mut subject, &cfg.swap)?;
            if let Some(out) = out {
                write_dixon_dir(&subject, &out)?;
            }
            print_json(&report);
        }
        Command::Anomaly { dir, summary, out } => {
            let assembled = read_assembled(&dir, "dixon_", &find_summary(&dir, summary.as_deref())?)?;
            let analysis = analyze_anomalies(&assembled, &cfg.anomaly);
            if let Some(out) = out {
                create_dir(&out)?;
                write_json(&out.join("anomaly.json"), &analysis.report)?;
                if let Some(body) = &analysis.body {
                    write_nifti(&body.mask.to_volume(), &out.join("body_mask.nii"))?;
                }
            }
            print_json(&analysis.report);
        }
        Command::Landmarks(args) => {
            let meta = match (&args.meta, args.sex, args.height) {
                (Some(p), _, _) => SubjectMetaFile::read(p)?.meta(),
                (None, Some(sex), Some(height_mm)) => SubjectMeta { sex, height_mm },
                _ => return Err(Failure::Usage("give --meta or both --sex and --height".into())),
            };
            if let Some(bank) = args.bank {
                cfg.atlas_bank.dir = Some(bank);
            }
            let assembled = read_assembled(&args.dir, "dixon_", &find_summary(&args.dir, args.summary.as_deref())?)?;
            let body = match &args.mask {
                Some(p) => Mask::from_volume(&read_nifti(p)?),
                None => analyze_anomalies(&assembled, &cfg.anomaly).body.ok_or(Error::EmptyBody)?.mask,
            };
            let water = Volume {
                geometry: assembled.volume.geometry.clone(),
                channels: vec![assembled.volume.channel("water").ok_or_else(|| Error::ChannelKind("water".into()))?.clone()],
            };
            let bank = cfg.atlas_bank.load()?;
            let report = detect_joints(&water, &body, &meta, &bank, &cfg.landmarks)?;
            if let Some(out) = args.out {
                write_json(&out, &report)?;
            }
            print_json(&report);
        }
        Command::Quant { acq_dir, mask, out } => {
            let series = load_echo_dir(&acq_dir, cfg.quant.phase_scale)?;
            let signal = signal_mask(&series, cfg.run.signal_fraction)?;
            let maps = fit_map(&series, Some(&signal), &cfg.quant, cfg.run.parallel_fit)?;
            let roi = mask.as_deref().map(read_nifti).transpose()?.map(|v| Mask::from_volume(&v));
            if roi.as_ref().is_some_and(|m| !m.geometry.same_grid(&series.volume.geometry, 1e-4)) {
                return Err(Error::GeometryMismatch("mask does not match the acquisition grid".into()).into());
            }
            let summary = summarize_maps(&maps, roi.as_ref());
            let report = json!({
                "region": if roi.is_some() { "mask" } else { "signal" },
                "fitted_voxels": maps.mask.count(),
                "summary": summary,
            });
            if let Some(out) = out {
                create_dir(&out)?;
                write_nifti(&maps.pdff, &out.join("pdff.nii"))?;
                write_nifti(&maps.r2star, &out.join("r2star.nii"))?;
                write_nifti(&iron_map(&maps), &out.join("iron.nii"))?;
                write_json(&out.join("quant.json"), &report)?;
            }
            print_json(&report);
        }
        Command::Placement(PlacementCommand::Liver { mask, slice }) => {
            let liver = Mask::from_volume(&read_nifti(&mask)?);
            let slice = read_nifti(&slice)?;
            let k = locate_slice(&slice.geometry, &liver.geometry)?;
            print_json(&liver_percent_location(k, &liver)?);
        }
        Command::Placement(PlacementCommand::Pancreas { mask }) => {
            let m = Mask::from_volume(&read_nifti(&mask)?);
            print_json(&pancreas_census(&m.data, voxel_volume_ml(&m.geometry)));
        }
        Command::Harmonize { csv, alpha } => {
            let pairs = read_pairs_csv(&read_text(&csv)?)?;
            let h = harmonize_fit(&pairs)?;
            print_json(&json!({
                "pairs": pairs.len(),
                "linear": h.linear,
                "quadratic": h.quadratic,
                "f_stat": h.f_stat,
                "p_value": h.p_value,
                "quadratic_significant": h.quadratic_significant(alpha),
                "identity_crossing": h.linear.identity_crossing(),
            }));
        }
        Command::Phantom(cmd) => phantom(cmd)?,
        Command::Run { subject_dir } => {
            let record = Pipeline::new(cfg).run_subject(&subject_dir)?;
            print_json(&record);
            if record.any_failed() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Cohort { root, jobs } => {
            if !root.is_dir() {
                return Err(Failure::Usage(format!("{} is not a directory", root.display())));
            }
            let jobs = jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())).max(1);
            let summary = Pipeline::new(cfg).run_cohort(&root, jobs)?;
            print_json(&json!({
                "subjects": summary.subjects,
                "subjects_with_success": summary.subjects_with_success,
                "census": summary.census,
            }));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn phantom(cmd: PhantomCommand) -> CliResult<()> {
    match cmd {
        PhantomCommand::Subject { dir, seed, spec, swaps } => {
            let mut cfg = match spec {
                Some(p) => SubjectPhantomConfig::from_toml(&read_text(&p)?).map_err(|e| Failure::Usage(e.to_string()))?,
                None => SubjectPhantomConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.body.seed = seed;
            }
            if let Some(name) = dir.file_name() {
                cfg.subject_id = name.to_string_lossy().into_owned();
            }
            cfg.body.defects.extend(swaps.into_iter().map(|(series, region)| Defect::Swap { series, region }));
            cfg.body.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let truth = write_phantom_subject(&dir, &cfg)?;
            print_json(&json!({ "subject_id": truth.subject_id, "dir": dir }));
        }
        PhantomCommand::Multiecho { dir, seed, spec, ideal, snr } => {
            let mut cfg = match spec {
                Some(p) => MultiEchoConfig::from_toml(&read_text(&p)?).map_err(|e| Failure::Usage(e.to_string()))?,
                None => MultiEchoConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if ideal {
                cfg.echo_times_ms = IDEAL_ECHO_TIMES_MS.to_vec();
            }
            if snr.is_some() {
                cfg.snr = snr;
            }
            let (series, truth) = make_multiecho_phantom(&cfg)?;
            let name = if ideal { "ideal" } else { "gre" };
            write_echo_dir(&series, &dir, name, PipelineConfig::default().quant.phase_scale)?;
            write_json(&dir.join("truth.json"), &truth)?;
            print_json(&json!({ "dir": dir, "tiles": truth.tiles.len() }));
        }
        PhantomCommand::AtlasBank { dir, seed, count } => {
            let mut cfg = PipelineConfig::default().atlas_bank.synthetic;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(count) = count {
                cfg.count = count;
            }
            let bank = make_atlas_bank_with(&cfg)?;
            save_bank(&bank, &dir)?;
            print_json(&json!({ "dir": dir, "atlases": bank.len() }));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(Error::Io { path: dir.to_path_buf(), source: e }))
}

/// The assembly summary given on the command line, or the one a run or the
/// `assemble` command left behind.
fn find_summary(dir: &Path, explicit: Option<&Path>) -> CliResult<AssemblySummary> {
    let candidates = match explicit {
        Some(p) => vec![p.to_path_buf()],
        None => vec![dir.join("assembly.json"), dir.join("../summary/assembly.json")],
    };
    match candidates.iter().find(|p| p.exists()) {
        Some(p) => Ok(read_json(p)?),
        None => Err(Failure::Usage(format!("no assembly summary found for {}; pass --summary", dir.display()))),
    }
}
