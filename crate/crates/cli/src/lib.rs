//! `uscal` command-line front end.
//!
//! Exit codes: 0 success, 1 user error (flags, files, units), 2 numerical
//! failure. Every failure writes `ERROR <CODE>: <message>` as the first line
//! on stderr.

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use uscal_core::absolute_orientation::{solve_horn, solve_svd_oracle};
use uscal_core::bscan::{detect_circle_with, VoteRays};
use uscal_core::calibrate::{build_correspondences, evaluate};
use uscal_core::io::{self, fmt17, Dataset, Provenance};
use uscal_core::planar_pose::{estimate_pose, CameraIntrinsics, PlanarTarget};
use uscal_core::synthetic::{generate, noise_study, Artifacts, RenderOptions};
use uscal_core::{
    calibrate, filter_and_recalibrate, CalibrationResult, Error, FitMode, HoughParams, NoiseSpec,
    PhantomModel, Result, SyntheticConfig,
};

#[derive(Parser, Debug)]
#[command(name = "uscal", version, about = "Freehand ultrasound probe calibration toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset.
    Generate(GenerateArgs),
    /// Fit the image-to-marker transform of a dataset.
    Calibrate(CalibrateArgs),
    /// Report backprojection errors of a stored calibration, optionally filtering and refitting.
    Evaluate(EvaluateArgs),
    /// Find the hemisphere arc in one B-scan; prints `a b r score`.
    Detect(DetectArgs),
    /// Residual spread of the fit versus marker translation noise.
    NoiseStudy(NoiseStudyArgs),
    /// Planar target pose for each frame of a corner file.
    Pose(PoseArgs),
    /// Compare the quaternion solver with the SVD solver on a dataset.
    CrossCheck(CrossCheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// Marker translation noise, mm.
    #[arg(long, default_value_t = 0.0)]
    sigma_t: f64,
    /// Marker rotation noise, rad.
    #[arg(long, default_value_t = 0.0)]
    sigma_rot: f64,
    /// Feature pixel noise, px.
    #[arg(long, default_value_t = 0.0)]
    sigma_px: f64,
    /// Phantom description file; defaults to the built-in hemisphere.
    #[arg(long)]
    phantom: Option<PathBuf>,
    /// Also render B-scan images.
    #[arg(long)]
    render: bool,
    #[arg(long, value_enum, default_value_t = ArtifactArg::Speckle)]
    artifacts: ArtifactArg,
    /// Visible arc extent, degrees.
    #[arg(long, default_value_t = 180.0)]
    coverage: f64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ArtifactArg {
    None,
    Speckle,
    #[value(name = "speckle+walls")]
    SpeckleWalls,
}

impl From<ArtifactArg> for Artifacts {
    fn from(a: ArtifactArg) -> Self {
        match a {
            ArtifactArg::None => Artifacts::None,
            ArtifactArg::Speckle => Artifacts::Speckle,
            ArtifactArg::SpeckleWalls => Artifacts::SpeckleWalls,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Rigid,
    Similarity,
}

impl From<ModeArg> for FitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Rigid => FitMode::Rigid,
            ModeArg::Similarity => FitMode::Similarity,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum VoteArg {
    Deeper,
    Both,
}

#[derive(Args, Debug, Clone)]
struct DetectorArgs {
    /// Smallest arc radius searched, px.
    #[arg(long, default_value_t = 20.0)]
    r_min: f64,
    /// Largest arc radius searched, px.
    #[arg(long, default_value_t = 120.0)]
    r_max: f64,
    #[arg(long, value_enum, default_value_t = VoteArg::Deeper)]
    vote: VoteArg,
}

impl DetectorArgs {
    fn params(&self) -> HoughParams {
        let mut p = HoughParams::new(self.r_min, self.r_max);
        p.vote_rays = match self.vote {
            VoteArg::Deeper => VoteRays::Deeper,
            VoteArg::Both => VoteRays::Both,
        };
        p
    }
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Rigid)]
    mode: ModeArg,
    /// Result file to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace features.csv with arcs detected in the dataset images.
    #[arg(long)]
    detect: bool,
    #[command(flatten)]
    detector: DetectorArgs,
    /// Drop frames whose largest per-axis BRE exceeds this (mm) and refit once.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Calibration result file to evaluate.
    #[arg(long)]
    result: PathBuf,
    /// Drop frames whose largest per-axis BRE exceeds this (mm) and refit once.
    #[arg(long)]
    threshold: Option<f64>,
    /// Write the (possibly refitted) result here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// 8-bit binary PGM image.
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    detector: DetectorArgs,
}

#[derive(Args, Debug)]
struct NoiseStudyArgs {
    /// Comma-separated translation noise levels, mm.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1,2", allow_negative_numbers = true)]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    /// CSV output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PoseArgs {
    /// Key/value file with fx, fy, cx, cy.
    #[arg(long)]
    intrinsics: PathBuf,
    /// Target point CSV (`point_index,x_mm,y_mm,z_mm`).
    #[arg(long, conflicts_with = "board")]
    target: Option<PathBuf>,
    /// Checkerboard corner grid as COLSxROWSxSQUARE_MM, e.g. 8x8x25.
    #[arg(long)]
    board: Option<String>,
    /// Corner CSV (`frame_id,point_index,u,v`).
    #[arg(long)]
    corners: PathBuf,
    /// CSV output file; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CrossCheckArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Rigid)]
    mode: ModeArg,
}

/// Runs one command. `argv[0]` is the program name.
pub fn run_cli<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{}", e.render());
                return 0;
            }
            let first = e.to_string().lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            let _ = writeln!(err, "ERROR USAGE: {first}");
            let _ = write!(err, "{}", e.render());
            return 1;
        }
    };
    match dispatch(cli.command, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "ERROR {}: {e}", e.code());
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(a, out),
        Command::Calibrate(a) => cmd_calibrate(a, out, err),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Detect(a) => cmd_detect(a, out),
        Command::NoiseStudy(a) => cmd_noise_study(a, out),
        Command::Pose(a) => cmd_pose(a, out, err),
        Command::CrossCheck(a) => cmd_cross_check(a, out),
    }
}

fn emit(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::Io { path: PathBuf::from("<stdout>"), source: e })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn positive_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("--{name} must be a finite value >= 0, got {v}")))
    }
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<()> {
    positive_finite("sigma-t", a.sigma_t)?;
    positive_finite("sigma-rot", a.sigma_rot)?;
    positive_finite("sigma-px", a.sigma_px)?;
    let phantom = match &a.phantom {
        Some(p) => io::load_phantom(p)?,
        None => PhantomModel::default_hemisphere(),
    };
    let cfg = SyntheticConfig {
        n_frames: a.frames,
        seed: a.seed,
        noise: NoiseSpec { sigma_t: a.sigma_t, sigma_rot: a.sigma_rot, sigma_px: a.sigma_px },
        ..SyntheticConfig::default()
    };
    let opts = RenderOptions {
        artifacts: a.artifacts.into(),
        coverage: a.coverage.to_radians(),
        seed: a.seed,
        ..RenderOptions::default()
    };
    let acq = generate(&cfg, &phantom, a.render.then_some(&opts))?;
    let ds = Dataset {
        root: a.out.clone(),
        phantom,
        geometry: cfg.geometry,
        frames: acq.frames,
        provenance: Provenance::Synthetic(cfg),
    };
    io::save_dataset(&ds, &a.out)?;
    emit(out, &format!("wrote {} frames to {}\n", ds.frames.len(), a.out.display()))
}

/// Replaces every frame's feature with the arc found in its image.
fn detect_features(ds: &mut Dataset, det: &DetectorArgs, err: &mut dyn Write) -> Result<()> {
    let params = det.params();
    for f in ds.frames.iter_mut() {
        let img = f
            .bscan
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("--detect needs images; frame {} has none", f.frame_id)))?;
        f.feature_px = match detect_circle_with(img, &params) {
            Ok(d) => Some(d.center_px),
            Err(e) if e.is_numerical() => {
                let _ = writeln!(err, "warning: frame {}: {e}; frame skipped", f.frame_id);
                None
            }
            Err(e) => return Err(e),
        };
    }
    Ok(())
}

fn describe(r: &CalibrationResult) -> String {
    let mut s = String::new();
    let q = r.t_um.rotation.coords();
    let t = r.t_um.translation;
    let _ = writeln!(s, "mode {}", r.mode);
    let _ = writeln!(s, "rotation {} {} {} {}", fmt17(q[0]), fmt17(q[1]), fmt17(q[2]), fmt17(q[3]));
    let _ = writeln!(s, "translation_mm {} {} {}", fmt17(t.x), fmt17(t.y), fmt17(t.z));
    let _ = writeln!(s, "scale {}", fmt17(r.t_um.scale()));
    let _ = writeln!(s, "rms_residual_mm {}", fmt17(r.rms_residual));
    let _ = writeln!(s, "frames_used {}", r.frames_used.len());
    let _ = writeln!(s, "axis std_mm mean_mm min_mm max_mm");
    for (name, a) in ["x", "y", "z"].iter().zip(r.stats.axes()) {
        let _ = writeln!(s, "{name} {:.6} {:.6} {:.6} {:.6}", a.std, a.mean, a.min, a.max);
    }
    s
}

fn cmd_calibrate(a: CalibrateArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut ds = io::load_dataset(&a.dataset)?;
    if a.detect {
        detect_features(&mut ds, &a.detector, err)?;
    }
    let mut result = calibrate(&ds.frames, &ds.phantom, &ds.geometry, a.mode.into())?;
    if let Some(th) = a.threshold {
        result = filter_and_recalibrate(&result, &ds.frames, &ds.phantom, &ds.geometry, th)?;
    }
    if let Some(path) = &a.out {
        io::save_result(&result, path)?;
    }
    emit(out, &describe(&result))
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let ds = io::load_dataset(&a.dataset)?;
    let stored = io::load_result(&a.result)?;
    let mut report = evaluate(&ds.frames, &ds.phantom, &ds.geometry, &stored.t_um, stored.mode)?;
    let mut text = String::from("frame_id,dx_mm,dy_mm,dz_mm\n");
    for b in &report.per_frame_bre {
        let _ = writeln!(text, "{},{:.6},{:.6},{:.6}", b.frame_id, b.error.x, b.error.y, b.error.z);
    }
    text.push_str(&describe(&report));
    if let Some(th) = a.threshold {
        report = filter_and_recalibrate(&report, &ds.frames, &ds.phantom, &ds.geometry, th)?;
        let _ = writeln!(text, "after threshold {th} mm:");
        text.push_str(&describe(&report));
    }
    if let Some(path) = &a.out {
        io::save_result(&report, path)?;
    }
    emit(out, &text)
}

fn cmd_detect(a: DetectArgs, out: &mut dyn Write) -> Result<()> {
    let img = io::read_pgm(&a.image)?;
    let d = detect_circle_with(&img, &a.detector.params())?;
    emit(out, &format!("{:.3} {:.3} {:.3} {:.4}\n", d.center_px[0], d.center_px[1], d.radius_px, d.score))
}

fn cmd_noise_study(a: NoiseStudyArgs, out: &mut dyn Write) -> Result<()> {
    for s in &a.sigmas {
        positive_finite("sigmas", *s)?;
    }
    let cfg = SyntheticConfig { n_frames: a.frames, seed: a.seed, ..SyntheticConfig::default() };
    let rows = noise_study(&cfg, &PhantomModel::default_hemisphere(), &a.sigmas, a.trials)?;
    let csv = io::format_noise_study(&rows);
    match &a.out {
        Some(path) => write_file(path, &csv),
        None => emit(out, &csv),
    }
}

fn parse_board(spec: &str) -> Result<PlanarTarget> {
    let bad = || Error::InvalidArgument(format!("--board expects COLSxROWSxSQUARE_MM, got `{spec}`"));
    let parts: Vec<&str> = spec.split('x').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let cols: usize = parts[0].parse().map_err(|_| bad())?;
    let rows: usize = parts[1].parse().map_err(|_| bad())?;
    let square: f64 = parts[2].parse().map_err(|_| bad())?;
    if !(square.is_finite() && square > 0.0) {
        return Err(bad());
    }
    PlanarTarget::checkerboard(cols, rows, square)
}

fn cmd_pose(a: PoseArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let k: CameraIntrinsics = io::load_intrinsics(&a.intrinsics)?;
    let target = match (&a.target, &a.board) {
        (Some(p), None) => io::load_target(p)?,
        (None, Some(b)) => parse_board(b)?,
        _ => return Err(Error::InvalidArgument("give exactly one of --target or --board".into())),
    };
    let frames = io::load_corners(&a.corners)?;
    let mut csv = String::from("frame_id,qw,qx,qy,qz,tx_mm,ty_mm,tz_mm,rms_px,iterations\n");
    let mut failures = 0;
    for (id, obs) in &frames {
        match estimate_pose(&k, &target, obs) {
            Ok(est) => {
                let q = est.pose.rotation.coords();
                let t = est.pose.translation;
                let _ = writeln!(
                    csv,
                    "{id},{},{},{},{},{},{},{},{},{}",
                    fmt17(q[0]),
                    fmt17(q[1]),
                    fmt17(q[2]),
                    fmt17(q[3]),
                    fmt17(t.x),
                    fmt17(t.y),
                    fmt17(t.z),
                    fmt17(est.rms_reprojection),
                    est.iterations
                );
            }
            Err(e) if e.is_numerical() => {
                failures += 1;
                let _ = writeln!(err, "warning: frame {id}: {e}");
            }
            Err(e) => return Err(e),
        }
    }
    match &a.out {
        Some(path) => write_file(path, &csv)?,
        None => emit(out, &csv)?,
    }
    if failures > 0 && failures == frames.len() {
        return Err(Error::NumericalFailure(format!("no pose recovered for any of {failures} frames")));
    }
    Ok(())
}

/// Agreement required between the two solvers.
const CROSS_CHECK_TOLERANCE: f64 = 1e-9;

fn cmd_cross_check(a: CrossCheckArgs, out: &mut dyn Write) -> Result<()> {
    let ds = io::load_dataset(&a.dataset)?;
    let (set, _) = build_correspondences(&ds.frames, &ds.phantom, &ds.geometry)?;
    let mode: FitMode = a.mode.into();
    let horn = solve_horn(&set, mode)?;
    let svd = solve_svd_oracle(&set, mode)?;
    let dot = horn.transform.rotation.similarity(&svd.transform.rotation);
    let d_rms = (horn.rms_residual - svd.rms_residual).abs();
    let d_t = horn.transform.translation.distance(&svd.transform.translation);
    let d_s = (horn.transform.scale() - svd.transform.scale()).abs();
    let agree = 1.0 - dot <= CROSS_CHECK_TOLERANCE && d_rms <= CROSS_CHECK_TOLERANCE;
    let mut text = String::new();
    let _ = writeln!(text, "pairs {}", set.len());
    let _ = writeln!(text, "horn_rms_mm {}", fmt17(horn.rms_residual));
    let _ = writeln!(text, "svd_rms_mm {}", fmt17(svd.rms_residual));
    let _ = writeln!(text, "delta_rms_mm {d_rms:.3e}");
    let _ = writeln!(text, "quaternion_dot {}", fmt17(dot));
    let _ = writeln!(text, "delta_translation_mm {d_t:.3e}");
    let _ = writeln!(text, "delta_scale {d_s:.3e}");
    let _ = writeln!(text, "agree {}", if agree { "yes" } else { "no" });
    emit(out, &text)?;
    if agree {
        Ok(())
    } else {
        Err(Error::NumericalFailure(format!("solvers disagree: 1 - dot = {:.3e}, delta rms = {d_rms:.3e}", 1.0 - dot)))
    }
}

