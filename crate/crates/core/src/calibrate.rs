//! End-to-end calibration: correspondences, the closed-form fit, and
//! backprojection residual error (BRE) with threshold filtering.
//!
//! The image point of frame `k` is `P_k = (s_x·u, s_y·v, 0)`; its partner is
//! the landmark expressed in the marker frame, `Q_k = T_MC⁻¹·T_PC·x_p`. The
//! fitted transform maps every `P_k` onto its `Q_k`.
//!
//! BRE maps the image point all the way back into the phantom frame,
//! `T_PC⁻¹·T_MC·T_UM·P_k`, and compares it with the known landmark per axis.

use crate::absolute_orientation::{solve_horn, CorrespondenceSet, FitMode};
use crate::bscan::BScanGeometry;
use crate::error::{Error, Result};
use crate::geom3d::{Point3, RigidTransform};
use crate::phantom::PhantomModel;
use crate::synthetic::{sample_std, FrameObservation};
use rayon::prelude::*;

/// Summary of one axis of absolute errors, mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisStats {
    /// Sample standard deviation (n − 1 denominator).
    pub std: f64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl AxisStats {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { std: 0.0, mean: 0.0, min: 0.0, max: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self {
            std: sample_std(values),
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BreStats {
    pub x: AxisStats,
    pub y: AxisStats,
    pub z: AxisStats,
}

impl BreStats {
    pub fn axes(&self) -> [AxisStats; 3] {
        [self.x, self.y, self.z]
    }
}

/// Per-frame absolute backprojection error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameBre {
    pub frame_id: u32,
    /// `(|Δx|, |Δy|, |Δz|)`, mm.
    pub error: Point3,
}

impl FrameBre {
    pub fn max_axis(&self) -> f64 {
        self.error.x.max(self.error.y).max(self.error.z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub t_um: RigidTransform,
    pub mode: FitMode,
    /// BRE of every input frame that carries a feature, fitted or not.
    pub per_frame_bre: Vec<FrameBre>,
    /// Statistics over the frames in `frames_used`.
    pub stats: BreStats,
    pub frames_used: Vec<u32>,
    /// RMS residual of the fit itself, mm.
    pub rms_residual: f64,
}

impl CalibrationResult {
    /// Recomputes `stats` from `per_frame_bre` restricted to `frames_used`.
    pub fn recompute_stats(&self) -> BreStats {
        stats_for(&self.per_frame_bre, &self.frames_used)
    }
}

fn stats_for(bre: &[FrameBre], used: &[u32]) -> BreStats {
    let sel: Vec<&FrameBre> = bre.iter().filter(|b| used.contains(&b.frame_id)).collect();
    let axis = |f: fn(&Point3) -> f64| AxisStats::of(&sel.iter().map(|b| f(&b.error)).collect::<Vec<_>>());
    BreStats { x: axis(|p| p.x), y: axis(|p| p.y), z: axis(|p| p.z) }
}

/// Builds `(P_k, Q_k)` pairs for the frames that carry a detected feature,
/// in input order. Returns the set and the ids of the frames used.
pub fn build_correspondences(
    frames: &[FrameObservation],
    phantom: &PhantomModel,
    geom: &BScanGeometry,
) -> Result<(CorrespondenceSet, Vec<u32>)> {
    let label = &phantom.primary_feature().label;
    let mut source = Vec::with_capacity(frames.len());
    let mut target = Vec::with_capacity(frames.len());
    let mut ids = Vec::with_capacity(frames.len());
    for f in frames {
        if let Some([u, v]) = f.feature_px {
            source.push(geom.pixel_to_plane(u, v));
            target.push(phantom.feature_in_marker_frame(label, &f.t_pc, &f.t_mc)?);
            ids.push(f.frame_id);
        }
    }
    Ok((CorrespondenceSet::new(source, target)?, ids))
}

/// `(|Δx|, |Δy|, |Δz|)` between the landmark and the image point mapped
/// through `T_PC⁻¹·T_MC·T_UM`.
pub fn backprojection_error(
    frame: &FrameObservation,
    phantom: &PhantomModel,
    geom: &BScanGeometry,
    t_um: &RigidTransform,
) -> Result<Point3> {
    let [u, v] = frame
        .feature_px
        .ok_or_else(|| Error::InvalidArgument(format!("frame {} has no detected feature", frame.frame_id)))?;
    let chain = frame.t_pc.inverse().compose(&frame.t_mc).compose(t_um);
    let mapped = chain.apply(geom.pixel_to_plane(u, v));
    Ok((mapped - phantom.primary_feature().position).abs())
}

fn all_bre(frames: &[FrameObservation], phantom: &PhantomModel, geom: &BScanGeometry, t_um: &RigidTransform) -> Result<Vec<FrameBre>> {
    frames
        .par_iter()
        .filter(|f| f.feature_px.is_some())
        .map(|f| Ok(FrameBre { frame_id: f.frame_id, error: backprojection_error(f, phantom, geom, t_um)? }))
        .collect()
}

fn fit(frames: &[FrameObservation], phantom: &PhantomModel, geom: &BScanGeometry, mode: FitMode, all: &[FrameObservation]) -> Result<CalibrationResult> {
    let (set, frames_used) = build_correspondences(frames, phantom, geom)?;
    let sol = solve_horn(&set, mode)?;
    let per_frame_bre = all_bre(all, phantom, geom, &sol.transform)?;
    let stats = stats_for(&per_frame_bre, &frames_used);
    Ok(CalibrationResult { t_um: sol.transform, mode, per_frame_bre, stats, frames_used, rms_residual: sol.rms_residual })
}

/// Fits `T_UM` to every frame with a feature and evaluates BRE on all of them.
pub fn calibrate(frames: &[FrameObservation], phantom: &PhantomModel, geom: &BScanGeometry, mode: FitMode) -> Result<CalibrationResult> {
    fit(frames, phantom, geom, mode, frames)
}

/// Evaluates a given `T_UM` on a set of frames without refitting.
pub fn evaluate(
    frames: &[FrameObservation],
    phantom: &PhantomModel,
    geom: &BScanGeometry,
    t_um: &RigidTransform,
    mode: FitMode,
) -> Result<CalibrationResult> {
    let per_frame_bre = all_bre(frames, phantom, geom, t_um)?;
    let frames_used: Vec<u32> = per_frame_bre.iter().map(|b| b.frame_id).collect();
    let stats = stats_for(&per_frame_bre, &frames_used);
    let (set, _) = build_correspondences(frames, phantom, geom)?;
    let rms_residual = (set.cost(t_um) / set.len() as f64).sqrt();
    Ok(CalibrationResult { t_um: *t_um, mode, per_frame_bre, stats, frames_used, rms_residual })
}

/// Drops every frame whose largest per-axis BRE under `result` exceeds
/// `threshold_mm` and fits once more on the rest. Single pass.
pub fn filter_and_recalibrate(
    result: &CalibrationResult,
    frames: &[FrameObservation],
    phantom: &PhantomModel,
    geom: &BScanGeometry,
    threshold_mm: f64,
) -> Result<CalibrationResult> {
    if threshold_mm.is_nan() || threshold_mm < 0.0 {
        return Err(Error::InvalidArgument(format!("threshold must be >= 0, got {threshold_mm}")));
    }
    let keep: Vec<u32> = result
        .per_frame_bre
        .iter()
        .filter(|b| result.frames_used.contains(&b.frame_id) && b.max_axis() <= threshold_mm)
        .map(|b| b.frame_id)
        .collect();
    if keep.len() < 3 {
        return Err(Error::TooFewInliers { kept: keep.len(), threshold_mm });
    }
    let inliers: Vec<FrameObservation> = frames.iter().filter(|f| keep.contains(&f.frame_id)).cloned().collect();
    fit(&inliers, phantom, geom, result.mode, frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom3d::UnitQuaternion;
    use crate::synthetic::{generate, generate_poses, NoiseSpec, SyntheticConfig};
    use nalgebra::Vector4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hemi() -> PhantomModel {
        PhantomModel::default_hemisphere()
    }

    fn frame(id: u32, t_mc: RigidTransform, t_pc: RigidTransform, px: [f64; 2]) -> FrameObservation {
        FrameObservation { frame_id: id, t_mc, t_pc, feature_px: Some(px), bscan: None }
    }

    #[test]
    fn minimal_exact_case() {
        let cfg = SyntheticConfig { n_frames: 3, seed: 2, ..SyntheticConfig::default() };
        let frames = generate_poses(&cfg, &hemi()).unwrap();
        let (set, ids) = build_correspondences(&frames, &hemi(), &cfg.geometry).unwrap();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!(solve_horn(&set, FitMode::Rigid).unwrap().rms_residual < 1e-10);
    }

    #[test]
    fn identity_poses_at_origin_are_degenerate() {
        let m = PhantomModel::hemisphere(Point3::ORIGIN, 5.0).unwrap();
        let g = BScanGeometry::default();
        let frames: Vec<_> = (0..4).map(|i| frame(i, RigidTransform::IDENTITY, RigidTransform::IDENTITY, [0.0, 0.0])).collect();
        assert!(matches!(build_correspondences(&frames, &m, &g), Err(Error::DegenerateInput(_))));
        assert!(matches!(calibrate(&frames, &m, &g, FitMode::Rigid), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn correspondences_match_homogeneous_chain() {
        let cfg = SyntheticConfig { seed: 31, noise: NoiseSpec::translation(0.3), ..SyntheticConfig::default() };
        let frames = generate_poses(&cfg, &hemi()).unwrap();
        let (set, _) = build_correspondences(&frames, &hemi(), &cfg.geometry).unwrap();
        let x = hemi().primary_feature().position;
        for (f, q) in frames.iter().zip(set.target()) {
            let h = f.t_mc.to_homogeneous().try_inverse().unwrap() * f.t_pc.to_homogeneous();
            let v = h * Vector4::new(x.x, x.y, x.z, 1.0);
            assert!(q.distance(&Point3::new(v.x, v.y, v.z)) < 1e-10);
        }
    }

    #[test]
    fn noiseless_recovery() {
        let cfg = SyntheticConfig { seed: 4, ..SyntheticConfig::default() };
        let frames = generate_poses(&cfg, &hemi()).unwrap();
        let r = calibrate(&frames, &hemi(), &cfg.geometry, FitMode::Rigid).unwrap();
        assert!(r.t_um.rotation.similarity(&cfg.t_um_true.rotation) >= 1.0 - 1e-10);
        assert!(r.t_um.translation.distance(&cfg.t_um_true.translation) < 1e-8);
        assert!(r.per_frame_bre.iter().all(|b| b.max_axis() < 1e-10));
        assert_eq!(r.recompute_stats(), r.stats);
    }

    #[test]
    fn bre_examples() {
        let m = PhantomModel::hemisphere(Point3::new(20.0, 10.0, 5.0), 5.0).unwrap();
        let g = BScanGeometry::default();
        let f = frame(0, RigidTransform::IDENTITY, RigidTransform::IDENTITY, [100.0, 50.0]);
        // feature sits at P_k + (0, 0, 5); a T_UM lifting the plane by 5 mm is exact
        let exact = RigidTransform::from_translation(Point3::new(0.0, 0.0, 5.0));
        assert!(backprojection_error(&f, &m, &g, &exact).unwrap().norm() < 1e-10);
        let off = RigidTransform::from_translation(Point3::new(1.0, 0.0, 5.0));
        let e = backprojection_error(&f, &m, &g, &off).unwrap();
        assert!(e.distance(&Point3::new(1.0, 0.0, 0.0)) < 1e-12);
        let no_feature = FrameObservation { feature_px: None, ..f };
        assert!(backprojection_error(&no_feature, &m, &g, &exact).is_err());
    }

    #[test]
    fn bre_matches_homogeneous_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = hemi();
        let g = BScanGeometry::default();
        let rt = |rng: &mut ChaCha8Rng| {
            RigidTransform::new(
                UnitQuaternion::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                Point3::new(rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0), rng.random_range(-300.0..300.0)),
            )
        };
        for _ in 0..20 {
            let (t_mc, t_pc, t_um) = (rt(&mut rng), rt(&mut rng), rt(&mut rng));
            let px = [rng.random_range(0.0..400.0), rng.random_range(0.0..300.0)];
            let f = frame(0, t_mc, t_pc, px);
            let h = t_pc.to_homogeneous().try_inverse().unwrap() * t_mc.to_homogeneous() * t_um.to_homogeneous();
            let v = h * Vector4::new(px[0] * g.sx, px[1] * g.sy, 0.0, 1.0);
            let x = m.primary_feature().position;
            let want = Point3::new((v.x - x.x).abs(), (v.y - x.y).abs(), (v.z - x.z).abs());
            assert!(backprojection_error(&f, &m, &g, &t_um).unwrap().distance(&want) < 1e-10);
        }
    }

    #[test]
    fn frames_without_features_are_evaluated_but_not_fitted() {
        let cfg = SyntheticConfig { seed: 8, ..SyntheticConfig::default() };
        let mut frames = generate_poses(&cfg, &hemi()).unwrap();
        frames[3].feature_px = None;
        let r = calibrate(&frames, &hemi(), &cfg.geometry, FitMode::Rigid).unwrap();
        assert_eq!(r.frames_used.len(), cfg.n_frames - 1);
        assert!(!r.frames_used.contains(&3));
        assert_eq!(r.per_frame_bre.len(), cfg.n_frames - 1);
    }

    #[test]
    fn threshold_filtering() {
        let cfg = SyntheticConfig { seed: 12, n_frames: 30, noise: NoiseSpec::translation(0.2), ..SyntheticConfig::default() };
        let mut frames = generate_poses(&cfg, &hemi()).unwrap();
        let r = calibrate(&frames, &hemi(), &cfg.geometry, FitMode::Rigid).unwrap();
        let same = filter_and_recalibrate(&r, &frames, &hemi(), &cfg.geometry, f64::INFINITY).unwrap();
        assert_eq!(same, r);

        frames[5].t_mc.translation = frames[5].t_mc.translation + Point3::new(8.0, -6.0, 5.0);
        let r = calibrate(&frames, &hemi(), &cfg.geometry, FitMode::Rigid).unwrap();
        assert!(r.per_frame_bre[5].max_axis() > 2.0);
        let f = filter_and_recalibrate(&r, &frames, &hemi(), &cfg.geometry, 2.0).unwrap();
        assert!(!f.frames_used.contains(&5));
        assert_eq!(f.per_frame_bre.len(), frames.len());
        assert_eq!(f.recompute_stats(), f.stats);
        assert!(f.frames_used.iter().all(|id| r.frames_used.contains(id)));

        assert!(matches!(
            filter_and_recalibrate(&r, &frames, &hemi(), &cfg.geometry, 0.0),
            Err(Error::TooFewInliers { .. })
        ));
    }

    #[test]
    fn stats_invariants() {
        let s = AxisStats::of(&[0.5, 1.0, 4.0]);
        assert!(s.min <= s.mean && s.mean <= s.max);
        assert_eq!((s.min, s.max), (0.5, 4.0));
        assert!((s.mean - 5.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn evaluate_reproduces_calibrate_bre() {
        let cfg = SyntheticConfig { seed: 14, noise: NoiseSpec::translation(0.5), ..SyntheticConfig::default() };
        let acq = generate(&cfg, &hemi(), None).unwrap();
        let r = calibrate(&acq.frames, &hemi(), &cfg.geometry, FitMode::Rigid).unwrap();
        let e = evaluate(&acq.frames, &hemi(), &cfg.geometry, &r.t_um, FitMode::Rigid).unwrap();
        assert_eq!(e.per_frame_bre, r.per_frame_bre);
        assert!((e.rms_residual - r.rms_residual).abs() < 1e-12);
    }
}
