//! Freehand 2D ultrasound probe calibration.
//!
//! The toolkit estimates `T_UM`, the transform from the ultrasound image
//! plane to the tracking marker rigidly mounted on the probe, from frames
//! that pair a tracked probe pose with the image location of a phantom
//! landmark. Around that solver sit a synthetic acquisition generator, a
//! B-scan circle detector for hemisphere phantoms, planar-fiducial pose
//! estimation, and backprojection residual evaluation.
//!
//! Transforms are named by the frames they connect: `t_mc` maps marker
//! coordinates to camera coordinates, `t_pc` phantom to camera, and `t_um`
//! image plane (mm) to marker.

pub mod absolute_orientation;
pub mod bscan;
pub mod calibrate;
pub mod error;
pub mod geom3d;
pub mod io;
pub mod phantom;
pub mod planar_pose;
pub mod synthetic;

pub use absolute_orientation::{solve_horn, solve_svd_oracle, AbsOrientSolution, CorrespondenceSet, FitMode};
pub use bscan::{detect_circle, detect_edges, BScanGeometry, BScanImage, CircleDetection, HoughParams};
pub use calibrate::{calibrate, filter_and_recalibrate, CalibrationResult};
pub use error::{Error, Result};
pub use geom3d::{Point3, RigidTransform, UnitQuaternion};
pub use phantom::{PhantomKind, PhantomModel};
pub use synthetic::{FrameObservation, NoiseSpec, SyntheticConfig};
