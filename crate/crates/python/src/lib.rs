//! Python bindings. Points are `(x, y, z)` tuples in mm, quaternions
//! `(w, x, y, z)`, images 2D lists or row-major bytes.

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use std::path::PathBuf;
use uscal_core::io;
use uscal_core::planar_pose::{self, CameraIntrinsics, PlanarTarget};
use uscal_core::synthetic;
use uscal_core::{BScanImage, FitMode, Point3, UnitQuaternion};

create_exception!(uscal, UscalError, PyException, "Raised for every toolkit failure; `args[0]` is the error code.");

fn to_py(e: uscal_core::Error) -> PyErr {
    UscalError::new_err((e.code(), e.to_string()))
}

type Vec3 = (f64, f64, f64);

fn point(p: Vec3) -> Point3 {
    Point3::new(p.0, p.1, p.2)
}

fn tuple(p: Point3) -> Vec3 {
    (p.x, p.y, p.z)
}

fn mode(name: &str) -> PyResult<FitMode> {
    match name {
        "rigid" => Ok(FitMode::Rigid),
        "similarity" => Ok(FitMode::Similarity),
        other => Err(to_py(uscal_core::Error::InvalidArgument(format!("unknown mode `{other}` (rigid|similarity)")))),
    }
}

/// Rotation, translation in mm and uniform scale.
#[pyclass(name = "RigidTransform", frozen, from_py_object)]
#[derive(Clone)]
struct PyRigidTransform(uscal_core::RigidTransform);

#[pymethods]
impl PyRigidTransform {
    #[new]
    #[pyo3(signature = (rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0), scale=1.0))]
    fn new(rotation: (f64, f64, f64, f64), translation: Vec3, scale: f64) -> PyResult<Self> {
        let (w, x, y, z) = rotation;
        let q = UnitQuaternion::try_new(w, x, y, z)
            .ok_or_else(|| to_py(uscal_core::Error::InvalidArgument("zero or non-finite quaternion".into())))?;
        uscal_core::RigidTransform::with_scale(q, point(translation), scale)
            .map(Self)
            .ok_or_else(|| to_py(uscal_core::Error::InvalidArgument(format!("invalid scale {scale}"))))
    }

    #[getter]
    fn rotation(&self) -> (f64, f64, f64, f64) {
        let [w, x, y, z] = self.0.rotation.coords();
        (w, x, y, z)
    }

    #[getter]
    fn translation(&self) -> Vec3 {
        tuple(self.0.translation)
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.0.scale()
    }

    fn apply(&self, p: Vec3) -> Vec3 {
        tuple(self.0.apply(point(p)))
    }

    fn compose(&self, other: &Self) -> Self {
        Self(self.0.compose(&other.0))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// `(rotation angle in rad, translation distance in mm)` to `other`.
    fn pose_error(&self, other: &Self) -> (f64, f64) {
        self.0.pose_error(&other.0)
    }

    fn matrix(&self) -> Vec<Vec<f64>> {
        let m = self.0.to_homogeneous();
        (0..4).map(|r| (0..4).map(|c| m[(r, c)]).collect()).collect()
    }

    fn __repr__(&self) -> String {
        let [w, x, y, z] = self.0.rotation.coords();
        let t = self.0.translation;
        format!("RigidTransform(rotation=({w}, {x}, {y}, {z}), translation=({}, {}, {}), scale={})", t.x, t.y, t.z, self.0.scale())
    }
}

/// Absolute-orientation fit.
#[pyclass(name = "Solution", frozen, get_all)]
struct PySolution {
    transform: PyRigidTransform,
    rms_residual: f64,
    per_pair_residuals: Vec<f64>,
}

fn solve(source: Vec<Vec3>, target: Vec<Vec3>, fit: &str, oracle: bool) -> PyResult<PySolution> {
    let set = uscal_core::CorrespondenceSet::new(source.into_iter().map(point).collect(), target.into_iter().map(point).collect())
        .map_err(to_py)?;
    let m = mode(fit)?;
    let s = if oracle { uscal_core::solve_svd_oracle(&set, m) } else { uscal_core::solve_horn(&set, m) }.map_err(to_py)?;
    Ok(PySolution { transform: PyRigidTransform(s.transform), rms_residual: s.rms_residual, per_pair_residuals: s.per_pair_residuals })
}

/// Closed-form quaternion fit of `target ≈ T(source)`.
#[pyfunction]
#[pyo3(signature = (source, target, mode="rigid"))]
fn solve_horn(source: Vec<Vec3>, target: Vec<Vec3>, mode: &str) -> PyResult<PySolution> {
    solve(source, target, mode, false)
}

/// SVD fit of the same problem, for cross-checking.
#[pyfunction]
#[pyo3(signature = (source, target, mode="rigid"))]
fn solve_svd_oracle(source: Vec<Vec3>, target: Vec<Vec3>, mode: &str) -> PyResult<PySolution> {
    solve(source, target, mode, true)
}

/// Calibration acquisition: phantom, image geometry and tracked frames.
#[pyclass(name = "Dataset", frozen)]
struct PyDataset(io::Dataset);

#[pymethods]
impl PyDataset {
    /// Seeded synthetic acquisition with the default phantom and ground truth.
    #[staticmethod]
    #[pyo3(signature = (seed=0, n_frames=20, sigma_t=0.0, sigma_rot=0.0, sigma_px=0.0))]
    fn synthetic(seed: u64, n_frames: usize, sigma_t: f64, sigma_rot: f64, sigma_px: f64) -> PyResult<Self> {
        let cfg = uscal_core::SyntheticConfig {
            n_frames,
            seed,
            noise: uscal_core::NoiseSpec { sigma_t, sigma_rot, sigma_px },
            ..uscal_core::SyntheticConfig::default()
        };
        let phantom = uscal_core::PhantomModel::default_hemisphere();
        let frames = synthetic::generate_poses(&cfg, &phantom).map_err(to_py)?;
        Ok(Self(io::Dataset {
            root: PathBuf::new(),
            phantom,
            geometry: cfg.geometry,
            frames,
            provenance: io::Provenance::Synthetic(cfg),
        }))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load_dataset(&path).map(Self).map_err(to_py)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&self.0, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.0.frames.len()
    }

    /// Ground-truth `T_UM` of a synthetic dataset, else `None`.
    #[getter]
    fn true_t_um(&self) -> Option<PyRigidTransform> {
        match &self.0.provenance {
            io::Provenance::Synthetic(c) => Some(PyRigidTransform(c.t_um_true)),
            io::Provenance::External => None,
        }
    }

    /// Landmark pixel `(u, v)` per frame, `None` where undetected.
    #[getter]
    fn features(&self) -> Vec<Option<(f64, f64)>> {
        self.0.frames.iter().map(|f| f.feature_px.map(|[u, v]| (u, v))).collect()
    }

    /// Fits `T_UM`; a `threshold` in mm adds one outlier-rejection pass.
    #[pyo3(signature = (mode="rigid", threshold=None))]
    fn calibrate(&self, mode: &str, threshold: Option<f64>) -> PyResult<PyCalibration> {
        let ds = &self.0;
        let mut r = uscal_core::calibrate(&ds.frames, &ds.phantom, &ds.geometry, self::mode(mode)?).map_err(to_py)?;
        if let Some(t) = threshold {
            r = uscal_core::filter_and_recalibrate(&r, &ds.frames, &ds.phantom, &ds.geometry, t).map_err(to_py)?;
        }
        Ok(PyCalibration(r))
    }
}

#[pyclass(name = "Calibration", frozen)]
struct PyCalibration(uscal_core::CalibrationResult);

#[pymethods]
impl PyCalibration {
    #[getter]
    fn t_um(&self) -> PyRigidTransform {
        PyRigidTransform(self.0.t_um)
    }

    #[getter]
    fn rms_residual(&self) -> f64 {
        self.0.rms_residual
    }

    #[getter]
    fn frames_used(&self) -> Vec<u32> {
        self.0.frames_used.clone()
    }

    /// `(frame_id, (|dx|, |dy|, |dz|))` per frame, mm.
    #[getter]
    fn bre(&self) -> Vec<(u32, Vec3)> {
        self.0.per_frame_bre.iter().map(|b| (b.frame_id, tuple(b.error))).collect()
    }

    /// Per-axis mean BRE over the frames used, mm.
    #[getter]
    fn mean_bre(&self) -> Vec3 {
        let [x, y, z] = self.0.stats.axes();
        (x.mean, y.mean, z.mean)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_result(&self.0, &path).map_err(to_py)
    }
}

fn image(pixels: Vec<Vec<u8>>) -> PyResult<BScanImage> {
    let height = pixels.len();
    let width = pixels.first().map_or(0, Vec::len);
    if pixels.iter().any(|row| row.len() != width) {
        return Err(to_py(uscal_core::Error::InvalidArgument("image rows differ in length".into())));
    }
    BScanImage::new(width, height, pixels.concat()).map_err(to_py)
}

/// Finds the hemisphere arc in a grayscale image given as rows of bytes.
/// Returns `(u, v, radius, score)` in pixels.
#[pyfunction]
fn detect_circle(pixels: Vec<Vec<u8>>, r_min: f64, r_max: f64) -> PyResult<(f64, f64, f64, f64)> {
    let d = uscal_core::detect_circle(&image(pixels)?, r_min, r_max).map_err(to_py)?;
    Ok((d.center_px[0], d.center_px[1], d.radius_px, d.score))
}

/// Reads a binary PGM as rows of bytes.
#[pyfunction]
fn read_pgm(path: PathBuf) -> PyResult<Vec<Vec<u8>>> {
    let img = io::read_pgm(&path).map_err(to_py)?;
    Ok(img.pixels().chunks(img.width()).map(<[u8]>::to_vec).collect())
}

/// Pose of a planar target from its pixel observations. Returns the
/// target-to-camera transform and the RMS reprojection error in pixels.
#[pyfunction]
fn estimate_pose(
    intrinsics: (f64, f64, f64, f64),
    target: Vec<Vec3>,
    observations: Vec<(f64, f64)>,
) -> PyResult<(PyRigidTransform, f64)> {
    let (fx, fy, cx, cy) = intrinsics;
    let k = CameraIntrinsics::new(fx, fy, cx, cy).map_err(to_py)?;
    let t = PlanarTarget::new(target.into_iter().map(point).collect(), "python").map_err(to_py)?;
    let obs: Vec<[f64; 2]> = observations.into_iter().map(|(u, v)| [u, v]).collect();
    let est = planar_pose::estimate_pose(&k, &t, &obs).map_err(to_py)?;
    Ok((PyRigidTransform(est.pose), est.rms_reprojection))
}

/// Pinhole projection of `pose · p`.
#[pyfunction]
fn project(intrinsics: (f64, f64, f64, f64), pose: &PyRigidTransform, p: Vec3) -> PyResult<(f64, f64)> {
    let (fx, fy, cx, cy) = intrinsics;
    let k = CameraIntrinsics::new(fx, fy, cx, cy).map_err(to_py)?;
    let [u, v] = planar_pose::project(&k, &pose.0, point(p)).map_err(to_py)?;
    Ok((u, v))
}

/// `(sigma, residual_std, trials)` rows for the given translation noise levels.
#[pyfunction]
#[pyo3(signature = (sigmas, trials=100, seed=0, n_frames=20))]
fn noise_study(sigmas: Vec<f64>, trials: usize, seed: u64, n_frames: usize) -> PyResult<Vec<(f64, f64, usize)>> {
    let cfg = uscal_core::SyntheticConfig { n_frames, seed, ..uscal_core::SyntheticConfig::default() };
    let rows = synthetic::noise_study(&cfg, &uscal_core::PhantomModel::default_hemisphere(), &sigmas, trials).map_err(to_py)?;
    Ok(rows.into_iter().map(|r| (r.sigma, r.residual_std, r.trials)).collect())
}

#[pymodule]
fn uscal(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("UscalError", m.py().get_type::<UscalError>())?;
    m.add_class::<PyRigidTransform>()?;
    m.add_class::<PySolution>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCalibration>()?;
    m.add_function(wrap_pyfunction!(solve_horn, m)?)?;
    m.add_function(wrap_pyfunction!(solve_svd_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(detect_circle, m)?)?;
    m.add_function(wrap_pyfunction!(read_pgm, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_pose, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(noise_study, m)?)?;
    Ok(())
}
