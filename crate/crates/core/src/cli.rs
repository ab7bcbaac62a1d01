//! The `angioreg` command-line tool.
//!
//! ```text
//! angioreg synth    --out DIR [--phantom tube|tree | --mesh M.obj] [--seed N]
//! angioreg register --mesh M.obj --ap AP.png --lat LAT.png --out DIR [--init POSE.json] [--dump-frames]
//! angioreg eval     --mesh M.obj --est POSE.json --gt POSE.json
//! angioreg sweep    --out DIR [--seeds N] [--configurations AP_ONLY,AP_PLUS_LAT,...]
//! ```
//!
//! Exit status is 0 on success, 1 for I/O, parse and dimension errors and 2
//! when the optimization diverges or the mesh is not visible.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

use crate::geometry::{CameraModel, Pose};
use crate::ingest::{self, IngestError, Polarity};
use crate::mesh::{load_mesh, MeshError, TriangleMesh};
use crate::metrics::{make_synthetic_case, run_sweep, BenchError, Perturbation, PoseError, Scenario};
use crate::phantom;
use crate::registration::{
    run_registration_with, Configuration, IterationFrame, RegistrationConfig, RegistrationError, RegistrationReport,
};
use crate::render::SilhouetteImage;

/// Environment variable capping the number of sweep worker threads.
pub const THREADS_ENV: &str = "TWOVIEW_THREADS";

#[derive(Debug, Parser)]
#[command(name = "angioreg", version, about = "Two-view 3D/2D angiogram registration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic AP/lateral pair and a perturbed starting pose.
    Synth(SynthArgs),
    /// Register a mesh to an AP/lateral image pair.
    Register(RegisterArgs),
    /// Compare an estimated pose with a ground-truth pose.
    Eval(EvalArgs),
    /// Run every configuration over a range of seeds on synthetic cases.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PhantomKind {
    /// Single bent tube, 96 triangles.
    Tube,
    /// Trunk with two branches, 512 triangles.
    Tree,
}

/// Options shared by the commands that build synthetic cases.
#[derive(Debug, Args)]
pub struct SceneArgs {
    /// Mesh to use instead of the built-in phantom.
    #[arg(long)]
    pub mesh: Option<PathBuf>,
    /// Built-in phantom used when `--mesh` is not given.
    #[arg(long, value_enum, default_value = "tube")]
    pub phantom: PhantomKind,
    /// Camera JSON; defaults to the 256×256 desk camera.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    /// Ground-truth lateral pose JSON; defaults to the desk pose at 400 mm.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// Rotation perturbation cone (degrees).
    #[arg(long, default_value_t = 10.0)]
    pub cone_deg: f64,
    /// Translation perturbation box half-width per axis (mm).
    #[arg(long, default_value_t = 10.0)]
    pub box_mm: f64,
    /// Registration config JSON; render settings and coupling axis are taken
    /// from it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    /// Anteroposterior image (PNG or PGM).
    #[arg(long)]
    pub ap: PathBuf,
    /// Lateral image (PNG or PGM).
    #[arg(long)]
    pub lat: PathBuf,
    /// Registration config JSON; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Initial lateral pose JSON; defaults to the identity rotation at 400 mm.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Camera JSON; defaults to the 256×256 desk camera.
    #[arg(long)]
    pub camera: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write frames/NNNN.png with rendered and residual panels per view.
    #[arg(long)]
    pub dump_frames: bool,
    #[arg(long, value_enum, default_value = "vessels-dark")]
    pub polarity: PolarityArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolarityArg {
    VesselsDark,
    VesselsBright,
}

impl From<PolarityArg> for Polarity {
    fn from(p: PolarityArg) -> Self {
        match p {
            PolarityArg::VesselsDark => Polarity::VesselsDark,
            PolarityArg::VesselsBright => Polarity::VesselsBright,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub mesh: PathBuf,
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub scene: SceneArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of seeds per configuration.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// First seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Comma-separated configurations; all five by default.
    #[arg(long, value_delimiter = ',')]
    pub configurations: Vec<Configuration>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: {source}", path.display())]
    Mesh { path: PathBuf, source: MeshError },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: IngestError },
    #[error(transparent)]
    Registration(#[from] RegistrationError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Registration(RegistrationError::NonFiniteLoss { .. })
            | CliError::Bench(BenchError::InvisibleMesh { .. }) => 2,
            _ => 1,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Register(args) => register(&args),
        Command::Eval(args) => eval(&args),
        Command::Sweep(args) => sweep(&args),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    write_file(path, text + "\n")
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|source| CliError::Io {
        path: path.into(),
        source,
    })
}

fn image_error(path: &Path) -> impl FnOnce(IngestError) -> CliError + '_ {
    move |source| CliError::Image {
        path: path.into(),
        source,
    }
}

fn mesh_at(path: &Path) -> Result<TriangleMesh, CliError> {
    load_mesh(path).map_err(|source| CliError::Mesh {
        path: path.into(),
        source,
    })
}

fn config_or_default(path: Option<&Path>) -> Result<RegistrationConfig, CliError> {
    let cfg = match path {
        Some(p) => read_json(p)?,
        None => RegistrationConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn camera_or_default(path: Option<&Path>) -> Result<CameraModel, CliError> {
    let Some(path) = path else {
        return Ok(Scenario::desk().camera);
    };
    let camera: CameraModel = read_json(path)?;
    camera.validate().map_err(|e| CliError::Parse {
        path: path.into(),
        message: e.to_string(),
    })?;
    Ok(camera)
}

fn scenario_from(scene: &SceneArgs) -> Result<(TriangleMesh, Scenario), CliError> {
    let mesh = match &scene.mesh {
        Some(path) => mesh_at(path)?,
        None => match scene.phantom {
            PhantomKind::Tube => phantom::small_tube(),
            PhantomKind::Tree => phantom::vessel_tree(),
        },
    };
    let mut scenario = Scenario::desk();
    scenario.camera = camera_or_default(scene.camera.as_deref())?;
    if let Some(gt) = &scene.gt {
        scenario.gt_pose = read_json(gt)?;
    }
    if !(scene.cone_deg >= 0.0 && scene.box_mm >= 0.0) {
        return Err(CliError::Invalid("perturbation ranges must be non-negative".into()));
    }
    scenario.perturbation = Perturbation {
        cone_deg: scene.cone_deg,
        box_mm: scene.box_mm,
    };
    Ok((mesh, scenario))
}

fn synth(args: &SynthArgs) -> Result<(), CliError> {
    let (mesh, scenario) = scenario_from(&args.scene)?;
    let cfg = config_or_default(args.scene.config.as_deref())?;
    let case = make_synthetic_case(
        &mesh,
        &scenario.camera,
        &scenario.gt_pose,
        &cfg.render,
        args.seed,
        &scenario.perturbation,
        cfg.coupling_axis_column,
    )?;

    let out = &args.out;
    create_dir(out)?;
    // Binary masks, like a segmented angiogram. Hardening at one half keeps
    // the mask on the soft render's own contour, so the pair is consistent
    // with the renderer after Otsu thresholding.
    for (name, image) in [("I_ap.png", &case.image_ap), ("I_lat.png", &case.image_lat)] {
        let path = out.join(name);
        ingest::write_silhouette_png(&image.harden(0.5), Polarity::VesselsDark, &path).map_err(image_error(&path))?;
    }
    write_json(&out.join("gt_pose.json"), &scenario.gt_pose)?;
    write_json(&out.join("init_pose.json"), &case.init_pose)?;
    write_json(&out.join("camera.json"), &scenario.camera)?;
    write_file(&out.join("mesh.obj"), mesh.to_obj())?;
    log::info!("wrote synthetic case to {}", out.display());
    Ok(())
}

fn segmented(path: &Path, polarity: Polarity) -> Result<SilhouetteImage, CliError> {
    let gray = ingest::read_gray(path).map_err(image_error(path))?;
    ingest::segment(&gray, polarity).map_err(image_error(path))
}

fn frame_panels(frame: &IterationFrame<'_>) -> Vec<SilhouetteImage> {
    [frame.lat, frame.ap]
        .into_iter()
        .flatten()
        .flat_map(|(rendered, target)| [rendered.clone(), ingest::residual_image(target, rendered)])
        .collect()
}

fn register(args: &RegisterArgs) -> Result<(), CliError> {
    let mesh = mesh_at(&args.mesh)?;
    let cfg = config_or_default(args.config.as_deref())?;
    let camera = camera_or_default(args.camera.as_deref())?;
    let init = match &args.init {
        Some(path) => read_json(path)?,
        None => Pose::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 400.0)),
    };
    let polarity = args.polarity.into();
    let image_ap = segmented(&args.ap, polarity)?;
    let image_lat = segmented(&args.lat, polarity)?;

    create_dir(&args.out)?;
    let frames = args.out.join("frames");
    if args.dump_frames {
        create_dir(&frames)?;
    }
    let mut frame_error = None;
    let result = run_registration_with(&cfg, &mesh, &camera, &image_ap, &image_lat, &init, |frame| {
        if !args.dump_frames || frame_error.is_some() {
            return;
        }
        let path = frames.join(format!("{:04}.png", frame.iteration));
        if let Err(e) = ingest::write_panels_png(&frame_panels(frame), &path) {
            frame_error = Some(image_error(&path)(e));
        }
    });
    if let Some(e) = frame_error {
        return Err(e);
    }

    let report = match result {
        Ok(report) => report,
        Err(RegistrationError::NonFiniteLoss { iteration, report }) => {
            // Keep the trace up to the failure for inspection.
            write_outputs(&args.out, &report)?;
            return Err(RegistrationError::NonFiniteLoss { iteration, report }.into());
        }
        Err(e) => return Err(e.into()),
    };
    write_outputs(&args.out, &report)?;
    log::info!(
        "{} iterations, converged: {}, final loss {:e}",
        report.iterations_run,
        report.converged,
        report.loss_trace.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn write_outputs(out: &Path, report: &RegistrationReport) -> Result<(), CliError> {
    write_json(&out.join("report.json"), report)?;
    write_json(&out.join("pose_lat.json"), &report.final_pose_lat)?;
    write_json(&out.join("pose_ap.json"), &report.final_pose_ap)?;
    let mut csv = Vec::new();
    report
        .write_loss_trace_csv(&mut csv)
        .map_err(|e| CliError::Invalid(format!("cannot format loss trace: {e}")))?;
    write_file(&out.join("loss_trace.csv"), csv)
}

fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let mesh = mesh_at(&args.mesh)?;
    let est: Pose = read_json(&args.est)?;
    let gt: Pose = read_json(&args.gt)?;
    let error = PoseError::between(&mesh, &est, &gt);
    println!("{}", serde_json::to_string_pretty(&error).expect("plain data serializes"));
    Ok(())
}

/// Reads [`THREADS_ENV`]; `None` means use every core.
fn thread_cap() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => Ok(None),
            Ok(n) => Ok(Some(n)),
            Err(_) => Err(CliError::Invalid(format!("{THREADS_ENV} must be a thread count, got {v:?}"))),
        },
    }
}

fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let (mesh, scenario) = scenario_from(&args.scene)?;
    let cfg = config_or_default(args.scene.config.as_deref())?;
    let configurations = if args.configurations.is_empty() {
        Configuration::ALL.to_vec()
    } else {
        args.configurations.clone()
    };
    let seeds: Vec<u64> = (args.seed..args.seed + args.seeds).collect();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::Invalid(format!("cannot start worker threads: {e}")))?;
    let result = pool.install(|| run_sweep(&mesh, &scenario, &cfg, &configurations, &seeds))?;

    create_dir(&args.out)?;
    let mut csv = Vec::new();
    result
        .write_csv(&mut csv)
        .map_err(|e| CliError::Invalid(format!("cannot format sweep table: {e}")))?;
    write_file(&args.out.join("sweep.csv"), csv)?;
    let summary = result.summary_json();
    write_json(&args.out.join("summary.json"), &summary)?;
    for row in &result.rows {
        eprintln!(
            "{:<12} median rot {:.4}°  trans {:.4} mm  ADD {:.4} mm  ({}/{} converged)",
            row.configuration.as_str(),
            row.median.rotation_deg,
            row.median.translation_mm,
            row.median.add_mm,
            row.converged_runs,
            row.runs
        );
    }
    Ok(())
}
