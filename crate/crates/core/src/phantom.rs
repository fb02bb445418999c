//! Calibration phantom geometry in the phantom coordinate system.
//!
//! The phantom frame has its origin at one corner of the phantom's tracking
//! marker; feature coordinates and the container box are expressed there.

use crate::error::{Error, Result};
use crate::geom3d::{Point3, RigidTransform};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomKind {
    /// Hemisphere whose sphere centre is the single landmark.
    Hemisphere,
    /// Single pin-head style point target.
    Point,
    /// Crossed wires; every crossing is a landmark.
    MultiWire,
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhantomKind::Hemisphere => "hemisphere",
            PhantomKind::Point => "point",
            PhantomKind::MultiWire => "multi_wire",
        })
    }
}

impl FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hemisphere" => Ok(PhantomKind::Hemisphere),
            "point" => Ok(PhantomKind::Point),
            "multi_wire" => Ok(PhantomKind::MultiWire),
            other => Err(Error::InvalidArgument(format!("unknown phantom kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feature {
    pub label: String,
    pub position: Point3,
}

/// Validated phantom description.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomModel {
    kind: PhantomKind,
    features: Vec<Feature>,
    hemisphere_radius: Option<f64>,
    /// Container spans `[0, extent.x] × [0, extent.y] × [0, extent.z]`.
    container: Point3,
}

pub const DEFAULT_HEMISPHERE_RADIUS_MM: f64 = 15.0;
pub const DEFAULT_CONTAINER_MM: Point3 = Point3::new(120.0, 120.0, 80.0);

impl PhantomModel {
    pub fn new(
        kind: PhantomKind,
        features: Vec<Feature>,
        hemisphere_radius: Option<f64>,
        container: Point3,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::InvalidArgument("phantom needs at least one feature".into()));
        }
        match (kind, hemisphere_radius) {
            (PhantomKind::Hemisphere, Some(r)) if r > 0.0 && r.is_finite() => {}
            (PhantomKind::Hemisphere, Some(r)) => {
                return Err(Error::InvalidArgument(format!("hemisphere radius must be positive, got {r}")))
            }
            (PhantomKind::Hemisphere, None) => {
                return Err(Error::InvalidArgument("hemisphere phantom needs a radius".into()))
            }
            (_, Some(_)) => return Err(Error::InvalidArgument(format!("radius given for a {kind} phantom"))),
            (_, None) => {}
        }
        if kind == PhantomKind::Hemisphere && features.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "hemisphere phantom has exactly one feature (the sphere centre), got {}",
                features.len()
            )));
        }
        if !(container.x > 0.0 && container.y > 0.0 && container.z > 0.0) {
            return Err(Error::InvalidArgument(format!("container extents must be positive: {container:?}")));
        }
        for (i, f) in features.iter().enumerate() {
            if features[..i].iter().any(|g| g.label == f.label) {
                return Err(Error::InvalidArgument(format!("duplicate feature label `{}`", f.label)));
            }
            let p = f.position;
            let inside = p.is_finite()
                && (0.0..=container.x).contains(&p.x)
                && (0.0..=container.y).contains(&p.y)
                && (0.0..=container.z).contains(&p.z);
            if !inside {
                return Err(Error::InvalidArgument(format!("feature `{}` at {p:?} lies outside the container", f.label)));
            }
        }
        Ok(Self { kind, features, hemisphere_radius, container })
    }

    /// Hemisphere of radius `radius` whose centre sits at `center`.
    pub fn hemisphere(center: Point3, radius: f64) -> Result<Self> {
        Self::new(
            PhantomKind::Hemisphere,
            vec![Feature { label: "center".into(), position: center }],
            Some(radius),
            DEFAULT_CONTAINER_MM,
        )
    }

    /// The hemisphere preset used by the synthetic pipeline.
    pub fn default_hemisphere() -> Self {
        Self::hemisphere(Point3::new(40.0, 35.0, 12.0), DEFAULT_HEMISPHERE_RADIUS_MM).expect("valid preset")
    }

    /// Pin-head point target preset.
    pub fn point_target() -> Self {
        Self::new(
            PhantomKind::Point,
            vec![Feature { label: "tip".into(), position: Point3::new(60.0, 60.0, 20.0) }],
            None,
            DEFAULT_CONTAINER_MM,
        )
        .expect("valid preset")
    }

    /// Two wire layers crossing at four landmarks.
    pub fn four_wire() -> Self {
        let features = [(30.0, 30.0), (90.0, 30.0), (30.0, 90.0), (90.0, 90.0)]
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Feature { label: format!("cross{i}"), position: Point3::new(x, y, 25.0) })
            .collect();
        Self::new(PhantomKind::MultiWire, features, None, DEFAULT_CONTAINER_MM).expect("valid preset")
    }

    pub fn kind(&self) -> PhantomKind {
        self.kind
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn hemisphere_radius(&self) -> Option<f64> {
        self.hemisphere_radius
    }

    pub fn container(&self) -> Point3 {
        self.container
    }

    /// The first feature; for a hemisphere this is the sphere centre.
    pub fn primary_feature(&self) -> &Feature {
        &self.features[0]
    }

    pub fn feature(&self, label: &str) -> Result<Point3> {
        self.features
            .iter()
            .find(|f| f.label == label)
            .map(|f| f.position)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Maps a landmark into the probe-marker frame: `T_MC⁻¹ · T_PC · x_p`.
    pub fn feature_in_marker_frame(&self, label: &str, t_pc: &RigidTransform, t_mc: &RigidTransform) -> Result<Point3> {
        let p = self.feature(label)?;
        Ok(t_mc.inverse().compose(t_pc).apply(p))
    }
}
