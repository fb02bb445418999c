//! Ground-truth acquisitions for exercising the calibration pipeline.
//!
//! For every frame a probe orientation is drawn and the marker translation is
//! then solved so that the ultrasound plane passes through the phantom
//! landmark at a random image location:
//!
//! `t = T_PC·x_p − R·T_UM(P_k)`
//!
//! Noise is applied afterwards, to the tracked marker pose and to the
//! detected pixel, from an RNG stream separate from the pose stream so that
//! changing the noise level leaves the underlying poses untouched.

use crate::absolute_orientation::{solve_horn, FitMode};
use crate::bscan::{BScanGeometry, BScanImage};
use crate::calibrate::build_correspondences;
use crate::error::{Error, Result};
use crate::geom3d::{Point3, RigidTransform, UnitQuaternion};
use crate::phantom::{PhantomKind, PhantomModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

/// Zero-mean Gaussian perturbations applied to the observations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseSpec {
    /// Std of each marker translation component, mm.
    pub sigma_t: f64,
    /// Std of the angle of a random-axis rotation applied to the marker pose, rad.
    pub sigma_rot: f64,
    /// Std of each detected pixel coordinate, px.
    pub sigma_px: f64,
}

impl NoiseSpec {
    pub fn translation(sigma_t: f64) -> Self {
        Self { sigma_t, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_t", self.sigma_t), ("sigma_rot", self.sigma_rot), ("sigma_px", self.sigma_px)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Probe sweep: uniform angles about the marker x and y axes, fixed about z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationRange {
    pub x: (f64, f64),
    pub y: (f64, f64),
    pub z_fixed: f64,
}

impl Default for RotationRange {
    fn default() -> Self {
        Self { x: (-0.5, 0.5), y: (-0.5, 0.5), z_fixed: 0.3 }
    }
}

/// Box in the image plane, mm, from which the landmark's image point is drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureBounds {
    pub u_mm: (f64, f64),
    pub v_mm: (f64, f64),
}

impl Default for FeatureBounds {
    fn default() -> Self {
        Self { u_mm: (20.0, 60.0), v_mm: (20.0, 50.0) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_frames: usize,
    pub seed: u64,
    pub rotation_range: RotationRange,
    pub feature_bounds: FeatureBounds,
    pub noise: NoiseSpec,
    pub geometry: BScanGeometry,
    pub t_um_true: RigidTransform,
    pub t_pc_true: RigidTransform,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_frames: 20,
            seed: 0,
            rotation_range: RotationRange::default(),
            feature_bounds: FeatureBounds::default(),
            noise: NoiseSpec::default(),
            geometry: BScanGeometry::default(),
            t_um_true: default_t_um(),
            t_pc_true: default_t_pc(),
        }
    }
}

/// Image plane to marker: a few centimetres below the marker, tilted.
pub fn default_t_um() -> RigidTransform {
    RigidTransform::new(
        UnitQuaternion::from_axis_angle(Point3::new(0.3, 1.0, 0.2), 0.4),
        Point3::new(12.0, -25.0, 80.0),
    )
}

/// Phantom to camera: about half a metre in front of the camera, facing it.
pub fn default_t_pc() -> RigidTransform {
    RigidTransform::new(
        UnitQuaternion::from_axis_angle(Point3::new(1.0, 0.1, 0.0), 2.8),
        Point3::new(-40.0, 30.0, 480.0),
    )
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 3 {
            return Err(Error::InvalidArgument(format!("n_frames must be >= 3, got {}", self.n_frames)));
        }
        self.noise.validate()?;
        let r = &self.rotation_range;
        let b = &self.feature_bounds;
        for (name, (lo, hi)) in [("rotation x", r.x), ("rotation y", r.y), ("feature u", b.u_mm), ("feature v", b.v_mm)] {
            if !(lo <= hi && lo.is_finite() && hi.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} bounds ({lo}, {hi}) are empty")));
            }
        }
        let g = &self.geometry;
        let (umax, vmax) = ((g.width - 1) as f64 * g.sx, (g.height - 1) as f64 * g.sy);
        if b.u_mm.0 < 0.0 || b.v_mm.0 < 0.0 || b.u_mm.1 > umax || b.v_mm.1 > vmax {
            return Err(Error::InvalidArgument(format!(
                "feature bounds {b:?} leave the {umax}×{vmax} mm image"
            )));
        }
        Ok(())
    }
}

/// One tracked acquisition: marker and phantom poses plus the landmark pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub frame_id: u32,
    pub t_mc: RigidTransform,
    pub t_pc: RigidTransform,
    /// Landmark location `(u, v)` in pixels, once detected.
    pub feature_px: Option<[f64; 2]>,
    pub bscan: Option<BScanImage>,
}

/// Noise-free quantities behind a synthetic frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTruth {
    pub t_mc: RigidTransform,
    /// Exact landmark image point `P_k`, mm.
    pub image_point: Point3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticAcquisition {
    pub frames: Vec<FrameObservation>,
    pub truth: Vec<FrameTruth>,
}

const POSE_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;
const SPECKLE_STREAM: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive independent per-trial seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        // keep the stream aligned with the non-degenerate case
        let _: f64 = rng.random();
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Synthetic frames with their ground truth. Pass `render` to attach B-scans
/// drawn from the noise-free geometry (hemisphere phantoms only).
pub fn generate(cfg: &SyntheticConfig, phantom: &PhantomModel, render: Option<&RenderOptions>) -> Result<SyntheticAcquisition> {
    cfg.validate()?;
    let x_p = phantom.primary_feature().position;
    let anchor = cfg.t_pc_true.apply(x_p);
    let mut pose_rng = rng_for(cfg.seed, POSE_STREAM);
    let mut noise_rng = rng_for(cfg.seed, NOISE_STREAM);
    let (ex, ey, ez) = (Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0), Point3::new(0.0, 0.0, 1.0));

    let mut frames = Vec::with_capacity(cfg.n_frames);
    let mut truth = Vec::with_capacity(cfg.n_frames);
    for k in 0..cfg.n_frames {
        let rr = &cfg.rotation_range;
        let ax = uniform(&mut pose_rng, rr.x);
        let ay = uniform(&mut pose_rng, rr.y);
        let rotation = UnitQuaternion::from_axis_angle(ex, ax)
            * UnitQuaternion::from_axis_angle(ey, ay)
            * UnitQuaternion::from_axis_angle(ez, rr.z_fixed);
        let image_point = Point3::new(
            uniform(&mut pose_rng, cfg.feature_bounds.u_mm),
            uniform(&mut pose_rng, cfg.feature_bounds.v_mm),
            0.0,
        );
        let t = anchor - rotation.rotate(cfg.t_um_true.apply(image_point));
        let t_mc_true = RigidTransform::new(rotation, t);

        let bscan = match render {
            Some(opts) => Some(render_bscan(phantom, &t_mc_true, &cfg.t_pc_true, &cfg.t_um_true, &cfg.geometry, &opts.for_frame(k as u64))?),
            None => None,
        };

        let n = &cfg.noise;
        let dt = Point3::new(normal(&mut noise_rng), normal(&mut noise_rng), normal(&mut noise_rng)) * n.sigma_t;
        let axis = Point3::new(normal(&mut noise_rng), normal(&mut noise_rng), normal(&mut noise_rng));
        let angle = normal(&mut noise_rng) * n.sigma_rot;
        let (du, dv) = (normal(&mut noise_rng) * n.sigma_px, normal(&mut noise_rng) * n.sigma_px);

        let noisy_rotation = UnitQuaternion::from_axis_angle(axis, angle) * rotation;
        let t_mc = RigidTransform::new(noisy_rotation, t + dt);
        let [u, v] = cfg.geometry.plane_to_pixel(image_point);
        frames.push(FrameObservation {
            frame_id: k as u32,
            t_mc,
            t_pc: cfg.t_pc_true,
            feature_px: Some([u + du, v + dv]),
            bscan,
        });
        truth.push(FrameTruth { t_mc: t_mc_true, image_point });
    }
    Ok(SyntheticAcquisition { frames, truth })
}

/// Frames only; see [`generate`].
pub fn generate_poses(cfg: &SyntheticConfig, phantom: &PhantomModel) -> Result<Vec<FrameObservation>> {
    Ok(generate(cfg, phantom, None)?.frames)
}

/// Image artifacts layered over the arc.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub enum Artifacts {
    #[default]
    None,
    /// Multiplicative Rayleigh speckle.
    Speckle,
    /// Speckle plus the container walls cut by the image plane.
    SpeckleWalls,
}

impl fmt::Display for Artifacts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Artifacts::None => "none",
            Artifacts::Speckle => "speckle",
            Artifacts::SpeckleWalls => "speckle+walls",
        })
    }
}

impl FromStr for Artifacts {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(Artifacts::None),
            "speckle" => Ok(Artifacts::Speckle),
            "speckle+walls" => Ok(Artifacts::SpeckleWalls),
            other => Err(Error::InvalidArgument(format!("unknown artifacts `{other}` (none|speckle|speckle+walls)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub artifacts: Artifacts,
    /// Visible angular extent of the arc, centred on the direction toward
    /// the transducer (`-v`), rad.
    pub coverage: f64,
    /// Gaussian half-width of the bright ridge, px.
    pub line_sigma_px: f64,
    pub intensity: f64,
    pub background: f64,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            artifacts: Artifacts::None,
            coverage: std::f64::consts::PI,
            line_sigma_px: 1.0,
            intensity: 200.0,
            background: 20.0,
            seed: 0,
        }
    }
}

impl RenderOptions {
    fn for_frame(&self, index: u64) -> Self {
        Self { seed: mix_seed(self.seed, index), ..*self }
    }
}

/// Where the sphere/plane intersection circle lands in the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArcTruth {
    pub center_px: [f64; 2],
    pub radius_mm: f64,
    /// Signed distance of the sphere centre from the image plane, mm.
    pub offset_mm: f64,
}

impl ArcTruth {
    pub fn radius_px(&self, g: &BScanGeometry) -> f64 {
        self.radius_mm / (0.5 * (g.sx + g.sy))
    }
}

/// Intersection of the image plane (placed by `T_PC⁻¹·T_MC·T_UM`) with the
/// hemisphere's sphere.
pub fn intersection_circle(
    phantom: &PhantomModel,
    t_mc: &RigidTransform,
    t_pc: &RigidTransform,
    t_um: &RigidTransform,
    geom: &BScanGeometry,
) -> Result<ArcTruth> {
    let radius = match (phantom.kind(), phantom.hemisphere_radius()) {
        (PhantomKind::Hemisphere, Some(r)) => r,
        _ => return Err(Error::InvalidArgument(format!("cannot render a {} phantom", phantom.kind()))),
    };
    let image_to_phantom = t_pc.inverse().compose(t_mc).compose(t_um);
    let c = image_to_phantom.inverse().apply(phantom.primary_feature().position);
    let r_image = radius / image_to_phantom.scale();
    if c.z.abs() >= r_image {
        return Err(Error::NoIntersection { offset_mm: c.z, radius_mm: r_image });
    }
    Ok(ArcTruth {
        center_px: geom.plane_to_pixel(c),
        radius_mm: (r_image * r_image - c.z * c.z).sqrt(),
        offset_mm: c.z,
    })
}

/// Draws the arc of `truth` (and artifacts other than walls) into a fresh canvas.
fn arc_canvas(geom: &BScanGeometry, truth: &ArcTruth, opts: &RenderOptions) -> Vec<f64> {
    let (w, h) = (geom.width, geom.height);
    let s_mean = 0.5 * (geom.sx + geom.sy);
    let r_px = truth.radius_mm / s_mean;
    let half = 0.5 * opts.coverage;
    let two_sigma2 = 2.0 * opts.line_sigma_px * opts.line_sigma_px;
    let mut canvas = vec![opts.background; w * h];
    for v in 0..h {
        for u in 0..w {
            let x = (u as f64 - truth.center_px[0]) * geom.sx;
            let y = (v as f64 - truth.center_px[1]) * geom.sy;
            let radial = (x.hypot(y) - truth.radius_mm) / s_mean;
            if radial.abs() > 6.0 * opts.line_sigma_px {
                continue;
            }
            // angle from the -v direction
            let phi = x.atan2(-y).abs();
            let beyond = ((phi - half).max(0.0)) * r_px;
            let d2 = radial * radial + beyond * beyond;
            canvas[v * w + u] += opts.intensity * (-d2 / two_sigma2).exp();
        }
    }
    canvas
}

fn add_walls(canvas: &mut [f64], phantom: &PhantomModel, image_to_phantom: &RigidTransform, geom: &BScanGeometry, opts: &RenderOptions) {
    let ext = phantom.container();
    let s_mean = 0.5 * (geom.sx + geom.sy);
    let two_sigma2 = 2.0 * opts.line_sigma_px * opts.line_sigma_px;
    let margin = 1.0;
    for v in 0..geom.height {
        for u in 0..geom.width {
            let p = image_to_phantom.apply(geom.pixel_to_plane(u as f64, v as f64));
            let c = p.to_array();
            let e = ext.to_array();
            // side walls and floor; the top is the open water surface
            let faces = [(0, 0.0), (0, e[0]), (1, 0.0), (1, e[1]), (2, 0.0)];
            let mut best = f64::INFINITY;
            for (axis, at) in faces {
                let inside = (0..3).filter(|&a| a != axis).all(|a| c[a] >= -margin && c[a] <= e[a] + margin);
                if inside {
                    best = best.min((c[axis] - at).abs());
                }
            }
            let d = best / s_mean;
            if d < 6.0 * opts.line_sigma_px {
                canvas[v * geom.width + u] += 0.8 * opts.intensity * (-(d * d) / two_sigma2).exp();
            }
        }
    }
}

fn finish_canvas(mut canvas: Vec<f64>, geom: &BScanGeometry, opts: &RenderOptions) -> BScanImage {
    if opts.artifacts != Artifacts::None {
        let mut rng = rng_for(opts.seed, SPECKLE_STREAM);
        // Rayleigh with unit mean: sigma = sqrt(2/pi)
        let sigma = (2.0 / std::f64::consts::PI).sqrt();
        for px in canvas.iter_mut() {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            *px *= sigma * (-2.0 * u.ln()).sqrt();
        }
    }
    let pixels = canvas.iter().map(|&x| x.round().clamp(0.0, 255.0) as u8).collect();
    BScanImage::new(geom.width, geom.height, pixels).expect("canvas matches geometry")
}

/// Renders the B-scan of a hemisphere phantom seen through the chain
/// `T_PC⁻¹·T_MC·T_UM`.
pub fn render_bscan(
    phantom: &PhantomModel,
    t_mc: &RigidTransform,
    t_pc: &RigidTransform,
    t_um: &RigidTransform,
    geom: &BScanGeometry,
    opts: &RenderOptions,
) -> Result<BScanImage> {
    let truth = intersection_circle(phantom, t_mc, t_pc, t_um, geom)?;
    let mut canvas = arc_canvas(geom, &truth, opts);
    if opts.artifacts == Artifacts::SpeckleWalls {
        let image_to_phantom = t_pc.inverse().compose(t_mc).compose(t_um);
        add_walls(&mut canvas, phantom, &image_to_phantom, geom, opts);
    }
    Ok(finish_canvas(canvas, geom, opts))
}

/// Renders a bare arc at a given pixel centre and radius. Wall artifacts need
/// phantom geometry and are ignored here.
pub fn render_arc(geom: &BScanGeometry, center_px: [f64; 2], radius_px: f64, opts: &RenderOptions) -> BScanImage {
    let truth = ArcTruth { center_px, radius_mm: radius_px * 0.5 * (geom.sx + geom.sy), offset_mm: 0.0 };
    finish_canvas(arc_canvas(geom, &truth, opts), geom, opts)
}

/// Renders the B-scan of one synthetic frame from its noise-free pose.
pub fn render_frame(
    phantom: &PhantomModel,
    cfg: &SyntheticConfig,
    truth: &FrameTruth,
    opts: &RenderOptions,
) -> Result<BScanImage> {
    render_bscan(phantom, &truth.t_mc, &cfg.t_pc_true, &cfg.t_um_true, &cfg.geometry, opts)
}

/// One row of a noise study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStudyRow {
    pub sigma: f64,
    /// Sample standard deviation of the pooled per-pair residual norms, mm.
    pub residual_std: f64,
    pub trials: usize,
}

/// For each `sigma`, sets `noise.sigma_t = sigma`, runs `trials` independent
/// generate → rigid calibrate rounds and pools the per-pair residual norms.
///
/// Trial `i` uses seed `mix_seed(cfg.seed, i)` for every sigma, so rows share
/// their underlying poses and noise directions.
pub fn noise_study(cfg: &SyntheticConfig, phantom: &PhantomModel, sigmas: &[f64], trials: usize) -> Result<Vec<NoiseStudyRow>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    cfg.validate()?;
    sigmas
        .iter()
        .map(|&sigma| {
            let residuals: Vec<Vec<f64>> = (0..trials)
                .into_par_iter()
                .map(|i| {
                    let trial_cfg = SyntheticConfig {
                        seed: mix_seed(cfg.seed, i as u64),
                        noise: NoiseSpec { sigma_t: sigma, ..cfg.noise },
                        ..cfg.clone()
                    };
                    let frames = generate_poses(&trial_cfg, phantom)?;
                    let (set, _) = build_correspondences(&frames, phantom, &cfg.geometry)?;
                    Ok(solve_horn(&set, FitMode::Rigid)?.per_pair_residuals)
                })
                .collect::<Result<_>>()?;
            let pooled: Vec<f64> = residuals.into_iter().flatten().collect();
            Ok(NoiseStudyRow { sigma, residual_std: sample_std(&pooled), trials })
        })
        .collect()
}

pub(crate) fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}
