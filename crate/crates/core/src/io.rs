//! On-disk formats.
//!
//! Dataset directory layout:
//!
//! ```text
//! dataset/config.txt          key = value [unit]; geometry, phantom, provenance
//! dataset/poses.csv           frame_id,qw_MC,qx_MC,qy_MC,qz_MC,tx_mm_MC,ty_mm_MC,tz_mm_MC,
//!                             qw_PC,qx_PC,qy_PC,qz_PC,tx_mm_PC,ty_mm_PC,tz_mm_PC
//! dataset/features.csv        frame_id,u_px,v_px
//! dataset/images/<id>.pgm     optional binary P5 B-scans
//! ```
//!
//! Every float is written with 17 significant digits so that a save → load
//! round trip is exact. CSV files use `\n` line endings and `.` decimals.

use crate::absolute_orientation::FitMode;
use crate::bscan::{BScanGeometry, BScanImage};
use crate::calibrate::{AxisStats, BreStats, CalibrationResult, FrameBre};
use crate::error::{Error, Result};
use crate::geom3d::{Point3, RigidTransform, UnitQuaternion};
use crate::phantom::{Feature, PhantomKind, PhantomModel};
use crate::planar_pose::{CameraIntrinsics, PlanarTarget};
use crate::synthetic::{FeatureBounds, FrameObservation, NoiseSpec, NoiseStudyRow, RotationRange, SyntheticConfig};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

/// Formats a float with 17 significant digits.
pub fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io { path: path.to_path_buf(), source: e },
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn parse_err(file: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { file: file.to_path_buf(), line, msg: msg.into() }
}

// ---------------------------------------------------------------------------
// key = value files

/// Physical dimension a value is expected to carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    /// No unit tag allowed.
    None,
    /// mm, cm or m; normalized to mm.
    Length,
    /// rad or deg; normalized to rad.
    Angle,
    /// px.
    Pixels,
    /// mm/px.
    PixelScale,
}

impl Dimension {
    fn factor(self, unit: Option<&str>) -> std::result::Result<f64, String> {
        match (self, unit) {
            (Dimension::None, None) => Ok(1.0),
            (Dimension::None, Some(u)) => Err(format!("unexpected unit `{u}` on a dimensionless value")),
            (_, None) => Err(format!("missing unit tag (expected {})", self.expected())),
            (Dimension::Length, Some("mm")) => Ok(1.0),
            (Dimension::Length, Some("cm")) => Ok(10.0),
            (Dimension::Length, Some("m")) => Ok(1000.0),
            (Dimension::Angle, Some("rad")) => Ok(1.0),
            (Dimension::Angle, Some("deg")) => Ok(std::f64::consts::PI / 180.0),
            (Dimension::Pixels, Some("px")) => Ok(1.0),
            (Dimension::PixelScale, Some("mm/px")) => Ok(1.0),
            (_, Some(u)) => Err(format!("unknown unit `{u}` (expected {})", self.expected())),
        }
    }

    fn expected(self) -> &'static str {
        match self {
            Dimension::None => "no unit",
            Dimension::Length => "mm|cm|m",
            Dimension::Angle => "rad|deg",
            Dimension::Pixels => "px",
            Dimension::PixelScale => "mm/px",
        }
    }
}

/// Parsed `key = value [unit]` file; `#` starts a comment.
#[derive(Debug, Clone)]
pub struct KeyValueFile {
    path: PathBuf,
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValueFile {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| parse_err(path, line, format!("expected `key = value`, got `{content}`")))?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(parse_err(path, line, "empty key"));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), line)).is_some() {
                return Err(parse_err(path, line, format!("duplicate key `{key}`")));
            }
        }
        Ok(Self { path: path.to_path_buf(), entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &read_text(path)?)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.entries.keys().filter(move |k| k.starts_with(prefix)).map(|k| k.as_str())
    }

    fn raw(&self, key: &str) -> Result<(&str, usize)> {
        self.entries
            .get(key)
            .map(|(v, l)| (v.as_str(), *l))
            .ok_or_else(|| parse_err(&self.path, 0, format!("missing key `{key}`")))
    }

    pub fn text(&self, key: &str) -> Result<&str> {
        Ok(self.raw(key)?.0)
    }

    pub fn line_of(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |(_, l)| *l)
    }

    /// `n` numbers followed by a unit tag matching `dim`, converted to the canonical unit.
    pub fn numbers(&self, key: &str, n: usize, dim: Dimension) -> Result<Vec<f64>> {
        let (value, line) = self.raw(key)?;
        let mut tokens: Vec<&str> = value.split_whitespace().collect();
        let unit = match tokens.last() {
            Some(t) if t.parse::<f64>().is_err() => tokens.pop(),
            _ => None,
        };
        let factor = dim
            .factor(unit)
            .map_err(|msg| Error::Unit { file: self.path.clone(), line, msg: format!("`{key}`: {msg}") })?;
        if tokens.len() != n {
            return Err(parse_err(&self.path, line, format!("`{key}` needs {n} numbers, got {}", tokens.len())));
        }
        tokens
            .iter()
            .map(|t| {
                t.parse::<f64>()
                    .map(|v| v * factor)
                    .map_err(|_| parse_err(&self.path, line, format!("`{key}`: `{t}` is not a number")))
            })
            .collect()
    }

    pub fn number(&self, key: &str, dim: Dimension) -> Result<f64> {
        Ok(self.numbers(key, 1, dim)?[0])
    }

    pub fn integer(&self, key: &str, dim: Dimension) -> Result<u64> {
        let v = self.number(key, dim)?;
        if v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
            return Err(parse_err(&self.path, self.line_of(key), format!("`{key}` must be a non-negative integer")));
        }
        Ok(v as u64)
    }

    /// `rotation = w x y z`, `translation = x y z mm`, `scale = s` under `prefix`.
    pub fn transform(&self, prefix: &str) -> Result<RigidTransform> {
        let rkey = format!("{prefix}.rotation");
        let q = self.numbers(&rkey, 4, Dimension::None)?;
        let rotation = UnitQuaternion::try_new(q[0], q[1], q[2], q[3])
            .ok_or_else(|| parse_err(&self.path, self.line_of(&rkey), "zero quaternion"))?;
        let t = self.numbers(&format!("{prefix}.translation"), 3, Dimension::Length)?;
        let skey = format!("{prefix}.scale");
        let scale = if self.contains(&skey) { self.number(&skey, Dimension::None)? } else { 1.0 };
        RigidTransform::with_scale(rotation, Point3::new(t[0], t[1], t[2]), scale)
            .ok_or_else(|| parse_err(&self.path, self.line_of(&skey), format!("scale must be positive, got {scale}")))
    }

    fn wrap<T>(&self, key: &str, r: Result<T>) -> Result<T> {
        r.map_err(|e| match e {
            Error::InvalidArgument(msg) => parse_err(&self.path, self.line_of(key), msg),
            other => other,
        })
    }
}

fn push_kv(out: &mut String, key: &str, values: &[f64], unit: &str) {
    let nums: Vec<String> = values.iter().map(|v| fmt17(*v)).collect();
    if unit.is_empty() {
        let _ = writeln!(out, "{key} = {}", nums.join(" "));
    } else {
        let _ = writeln!(out, "{key} = {} {unit}", nums.join(" "));
    }
}

fn push_transform(out: &mut String, prefix: &str, t: &RigidTransform) {
    push_kv(out, &format!("{prefix}.rotation"), &t.rotation.coords(), "");
    push_kv(out, &format!("{prefix}.translation"), &t.translation.to_array(), "mm");
    push_kv(out, &format!("{prefix}.scale"), &[t.scale()], "");
}

// ---------------------------------------------------------------------------
// phantom description

/// Writes the phantom keys, each prefixed with `prefix` (may be empty).
pub fn format_phantom(m: &PhantomModel, prefix: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{prefix}kind = {}", m.kind());
    if let Some(r) = m.hemisphere_radius() {
        push_kv(&mut out, &format!("{prefix}radius"), &[r], "mm");
    }
    push_kv(&mut out, &format!("{prefix}container"), &m.container().to_array(), "mm");
    for f in m.features() {
        push_kv(&mut out, &format!("{prefix}feature.{}", f.label), &f.position.to_array(), "mm");
    }
    out
}

/// Reads a phantom from keys under `prefix`. Feature order follows the
/// `feature.N` line order in the file.
pub fn phantom_from_kv(kv: &KeyValueFile, prefix: &str) -> Result<PhantomModel> {
    let kind_key = format!("{prefix}kind");
    let kind: PhantomKind = kv.wrap(&kind_key, kv.text(&kind_key)?.parse())?;
    let radius_key = format!("{prefix}radius");
    let radius = if kv.contains(&radius_key) { Some(kv.number(&radius_key, Dimension::Length)?) } else { None };
    let c = kv.numbers(&format!("{prefix}container"), 3, Dimension::Length)?;
    let feature_prefix = format!("{prefix}feature.");
    let mut keys: Vec<&str> = kv.keys_with_prefix(&feature_prefix).collect();
    keys.sort_by_key(|k| kv.line_of(k));
    let mut features = Vec::new();
    for key in keys {
        let label = &key[feature_prefix.len()..];
        if label.is_empty() || !label.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
            return Err(parse_err(kv.path(), kv.line_of(key), format!("bad feature label `{label}`")));
        }
        let p = kv.numbers(key, 3, Dimension::Length)?;
        features.push(Feature { label: label.to_string(), position: Point3::new(p[0], p[1], p[2]) });
    }
    kv.wrap(&kind_key, PhantomModel::new(kind, features, radius, Point3::new(c[0], c[1], c[2])))
}

pub fn load_phantom(path: &Path) -> Result<PhantomModel> {
    phantom_from_kv(&KeyValueFile::load(path)?, "")
}

pub fn save_phantom(m: &PhantomModel, path: &Path) -> Result<()> {
    write_bytes(path, format_phantom(m, "").as_bytes())
}

// ---------------------------------------------------------------------------
// PGM (binary P5, 8-bit)

pub fn encode_pgm(img: &BScanImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<BScanImage> {
    let err = |msg: &str| parse_err(path, 1, msg.to_string());
    let mut pos = 0;
    let token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(err("truncated PGM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    if token(&mut pos)? != "P5" {
        return Err(err("not a binary PGM (expected magic P5)"));
    }
    let mut dim = |what: &str| -> Result<usize> {
        token(&mut pos)?.parse::<usize>().map_err(|_| err(&format!("bad PGM {what}")))
    };
    let (w, h, maxval) = (dim("width")?, dim("height")?, dim("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(err("only 8-bit PGM (maxval 1..=255) is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h;
    if bytes.len() < pos + need {
        return Err(err(&format!("PGM raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos))));
    }
    BScanImage::new(w, h, bytes[pos..pos + need].to_vec())
}

pub fn read_pgm(path: &Path) -> Result<BScanImage> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io { path: path.to_path_buf(), source: e },
    })?;
    decode_pgm(path, &bytes)
}

pub fn write_pgm(img: &BScanImage, path: &Path) -> Result<()> {
    write_bytes(path, &encode_pgm(img))
}

// ---------------------------------------------------------------------------
// CSV helpers

/// Data rows of a CSV file whose first line must equal `header`.
fn csv_rows<'a>(path: &'a Path, text: &'a str, header: &str) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)> + 'a> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => return Err(parse_err(path, 1, format!("expected header `{header}`, got `{h}`"))),
        None => return Err(parse_err(path, 1, format!("empty file, expected header `{header}`"))),
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').map(str::trim).collect())))
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, s: &str, what: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(path, line, format!("{what}: cannot parse `{s}`")))
}

fn floats(path: &Path, line: usize, cols: &[&str]) -> Result<Vec<f64>> {
    cols.iter().map(|c| field::<f64>(path, line, c, "number")).collect()
}

// ---------------------------------------------------------------------------
// datasets

const POSES_HEADER: &str = "frame_id,qw_MC,qx_MC,qy_MC,qz_MC,tx_mm_MC,ty_mm_MC,tz_mm_MC,qw_PC,qx_PC,qy_PC,qz_PC,tx_mm_PC,ty_mm_PC,tz_mm_PC";
const FEATURES_HEADER: &str = "frame_id,u_px,v_px";

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Synthetic(SyntheticConfig),
    External,
}

/// A calibration acquisition on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub phantom: PhantomModel,
    pub geometry: BScanGeometry,
    pub frames: Vec<FrameObservation>,
    pub provenance: Provenance,
}

fn format_config(ds: &Dataset) -> String {
    let mut out = String::from("# uscal dataset\nformat = 1\n");
    let g = &ds.geometry;
    let _ = writeln!(out, "image.width = {} px", g.width);
    let _ = writeln!(out, "image.height = {} px", g.height);
    push_kv(&mut out, "image.sx", &[g.sx], "mm/px");
    push_kv(&mut out, "image.sy", &[g.sy], "mm/px");
    let has_images = ds.frames.iter().any(|f| f.bscan.is_some());
    let _ = writeln!(out, "images = {}", if has_images { "yes" } else { "no" });
    out.push_str(&format_phantom(&ds.phantom, "phantom."));
    match &ds.provenance {
        Provenance::External => out.push_str("provenance = external\n"),
        Provenance::Synthetic(c) => {
            out.push_str("provenance = synthetic\n");
            let _ = writeln!(out, "synthetic.n_frames = {}", c.n_frames);
            let _ = writeln!(out, "synthetic.seed = {}", c.seed);
            push_kv(&mut out, "synthetic.rotation.x", &[c.rotation_range.x.0, c.rotation_range.x.1], "rad");
            push_kv(&mut out, "synthetic.rotation.y", &[c.rotation_range.y.0, c.rotation_range.y.1], "rad");
            push_kv(&mut out, "synthetic.rotation.z", &[c.rotation_range.z_fixed], "rad");
            push_kv(&mut out, "synthetic.feature.u", &[c.feature_bounds.u_mm.0, c.feature_bounds.u_mm.1], "mm");
            push_kv(&mut out, "synthetic.feature.v", &[c.feature_bounds.v_mm.0, c.feature_bounds.v_mm.1], "mm");
            push_kv(&mut out, "synthetic.noise.sigma_t", &[c.noise.sigma_t], "mm");
            push_kv(&mut out, "synthetic.noise.sigma_rot", &[c.noise.sigma_rot], "rad");
            push_kv(&mut out, "synthetic.noise.sigma_px", &[c.noise.sigma_px], "px");
            push_transform(&mut out, "synthetic.t_um", &c.t_um_true);
            push_transform(&mut out, "synthetic.t_pc", &c.t_pc_true);
        }
    }
    out
}

fn pair(v: Vec<f64>) -> (f64, f64) {
    (v[0], v[1])
}

fn synthetic_from_kv(kv: &KeyValueFile, geometry: BScanGeometry) -> Result<SyntheticConfig> {
    Ok(SyntheticConfig {
        n_frames: kv.integer("synthetic.n_frames", Dimension::None)? as usize,
        seed: kv.text("synthetic.seed")?.parse().map_err(|_| parse_err(kv.path(), kv.line_of("synthetic.seed"), "seed must be an unsigned integer"))?,
        rotation_range: RotationRange {
            x: pair(kv.numbers("synthetic.rotation.x", 2, Dimension::Angle)?),
            y: pair(kv.numbers("synthetic.rotation.y", 2, Dimension::Angle)?),
            z_fixed: kv.number("synthetic.rotation.z", Dimension::Angle)?,
        },
        feature_bounds: FeatureBounds {
            u_mm: pair(kv.numbers("synthetic.feature.u", 2, Dimension::Length)?),
            v_mm: pair(kv.numbers("synthetic.feature.v", 2, Dimension::Length)?),
        },
        noise: NoiseSpec {
            sigma_t: kv.number("synthetic.noise.sigma_t", Dimension::Length)?,
            sigma_rot: kv.number("synthetic.noise.sigma_rot", Dimension::Angle)?,
            sigma_px: kv.number("synthetic.noise.sigma_px", Dimension::Pixels)?,
        },
        geometry,
        t_um_true: kv.transform("synthetic.t_um")?,
        t_pc_true: kv.transform("synthetic.t_pc")?,
    })
}

fn format_poses(frames: &[FrameObservation]) -> String {
    let mut out = format!("{POSES_HEADER}\n");
    for f in frames {
        let mut cols = vec![f.frame_id.to_string()];
        for t in [&f.t_mc, &f.t_pc] {
            cols.extend(t.rotation.coords().iter().map(|v| fmt17(*v)));
            cols.extend(t.translation.to_array().iter().map(|v| fmt17(*v)));
        }
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

fn format_features(frames: &[FrameObservation]) -> String {
    let mut out = format!("{FEATURES_HEADER}\n");
    for f in frames {
        if let Some([u, v]) = f.feature_px {
            let _ = writeln!(out, "{},{},{}", f.frame_id, fmt17(u), fmt17(v));
        }
    }
    out
}

fn pose_from(path: &Path, line: usize, v: &[f64]) -> Result<RigidTransform> {
    let q = UnitQuaternion::try_new(v[0], v[1], v[2], v[3]).ok_or_else(|| parse_err(path, line, "zero quaternion"))?;
    Ok(RigidTransform::new(q, Point3::new(v[4], v[5], v[6])))
}

fn parse_poses(path: &Path, text: &str) -> Result<Vec<FrameObservation>> {
    let mut frames: Vec<FrameObservation> = Vec::new();
    for (line, cols) in csv_rows(path, text, POSES_HEADER)? {
        if cols.len() != 15 {
            return Err(parse_err(
                path,
                line,
                format!("expected 15 columns (frame_id + 2 × (4 quaternion + 3 translation)), got {}", cols.len()),
            ));
        }
        let frame_id: u32 = field(path, line, cols[0], "frame_id")?;
        if let Some(prev) = frames.last() {
            if frame_id <= prev.frame_id {
                return Err(parse_err(path, line, format!("frame ids must be unique and increasing ({frame_id} after {})", prev.frame_id)));
            }
        }
        let v = floats(path, line, &cols[1..])?;
        frames.push(FrameObservation {
            frame_id,
            t_mc: pose_from(path, line, &v[0..7])?,
            t_pc: pose_from(path, line, &v[7..14])?,
            feature_px: None,
            bscan: None,
        });
    }
    Ok(frames)
}

fn parse_features(path: &Path, text: &str, frames: &mut [FrameObservation]) -> Result<()> {
    for (line, cols) in csv_rows(path, text, FEATURES_HEADER)? {
        if cols.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 columns, got {}", cols.len())));
        }
        let id: u32 = field(path, line, cols[0], "frame_id")?;
        let uv = floats(path, line, &cols[1..])?;
        let f = frames
            .iter_mut()
            .find(|f| f.frame_id == id)
            .ok_or_else(|| parse_err(path, line, format!("feature for unknown frame {id}")))?;
        if f.feature_px.is_some() {
            return Err(parse_err(path, line, format!("duplicate feature for frame {id}")));
        }
        f.feature_px = Some([uv[0], uv[1]]);
    }
    Ok(())
}

fn image_path(root: &Path, id: u32) -> PathBuf {
    root.join("images").join(format!("{id}.pgm"))
}

pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::Io { path: root.to_path_buf(), source: e })?;
    write_bytes(&root.join("config.txt"), format_config(ds).as_bytes())?;
    write_bytes(&root.join("poses.csv"), format_poses(&ds.frames).as_bytes())?;
    write_bytes(&root.join("features.csv"), format_features(&ds.frames).as_bytes())?;
    if ds.frames.iter().any(|f| f.bscan.is_some()) {
        let dir = root.join("images");
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        for f in &ds.frames {
            let img = f.bscan.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("frame {} has no image while others do", f.frame_id))
            })?;
            write_pgm(img, &image_path(root, f.frame_id))?;
        }
    }
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let kv = KeyValueFile::load(&root.join("config.txt"))?;
    let geometry = BScanGeometry {
        width: kv.integer("image.width", Dimension::Pixels)? as usize,
        height: kv.integer("image.height", Dimension::Pixels)? as usize,
        sx: kv.number("image.sx", Dimension::PixelScale)?,
        sy: kv.number("image.sy", Dimension::PixelScale)?,
    };
    let geometry = kv.wrap("image.sx", BScanGeometry::new(geometry.width, geometry.height, geometry.sx, geometry.sy))?;
    let phantom = phantom_from_kv(&kv, "phantom.")?;
    let provenance = match kv.text("provenance")? {
        "external" => Provenance::External,
        "synthetic" => Provenance::Synthetic(synthetic_from_kv(&kv, geometry)?),
        other => return Err(parse_err(kv.path(), kv.line_of("provenance"), format!("unknown provenance `{other}`"))),
    };
    let images = match kv.text("images")? {
        "yes" => true,
        "no" => false,
        other => return Err(parse_err(kv.path(), kv.line_of("images"), format!("images must be yes|no, got `{other}`"))),
    };

    let poses_path = root.join("poses.csv");
    let mut frames = parse_poses(&poses_path, &read_text(&poses_path)?)?;
    let features_path = root.join("features.csv");
    parse_features(&features_path, &read_text(&features_path)?, &mut frames)?;
    if images {
        for f in frames.iter_mut() {
            let img = read_pgm(&image_path(root, f.frame_id))?;
            if img.width() != geometry.width || img.height() != geometry.height {
                return Err(parse_err(
                    &image_path(root, f.frame_id),
                    1,
                    format!("image is {}×{}, dataset geometry is {}×{}", img.width(), img.height(), geometry.width, geometry.height),
                ));
            }
            f.bscan = Some(img);
        }
    }
    Ok(Dataset { root: root.to_path_buf(), phantom, geometry, frames, provenance })
}

// ---------------------------------------------------------------------------
// calibration results

const BRE_HEADER: &str = "frame_id,dx_mm,dy_mm,dz_mm";

pub fn format_result(r: &CalibrationResult) -> String {
    let mut out = String::from("# uscal calibration result\n");
    let _ = writeln!(out, "mode = {}", r.mode);
    push_transform(&mut out, "t_um", &r.t_um);
    push_kv(&mut out, "rms_residual", &[r.rms_residual], "mm");
    let used: Vec<String> = r.frames_used.iter().map(|i| i.to_string()).collect();
    let _ = writeln!(out, "frames_used = {}", used.join(" "));
    for (axis, s) in ["x", "y", "z"].iter().zip(r.stats.axes()) {
        // std mean min max
        push_kv(&mut out, &format!("stats.{axis}"), &[s.std, s.mean, s.min, s.max], "mm");
    }
    out.push_str("[bre]\n");
    out.push_str(BRE_HEADER);
    out.push('\n');
    for b in &r.per_frame_bre {
        let _ = writeln!(out, "{},{},{},{}", b.frame_id, fmt17(b.error.x), fmt17(b.error.y), fmt17(b.error.z));
    }
    out
}

pub fn parse_result(path: &Path, text: &str) -> Result<CalibrationResult> {
    let (head, bre) = match text.find("[bre]\n") {
        Some(i) => (&text[..i], &text[i + "[bre]\n".len()..]),
        None => return Err(parse_err(path, 0, "missing [bre] section")),
    };
    let kv = KeyValueFile::parse(path, head)?;
    let mode: FitMode = kv.wrap("mode", kv.text("mode")?.parse())?;
    let t_um = kv.transform("t_um")?;
    let rms_residual = kv.number("rms_residual", Dimension::Length)?;
    let frames_used = kv
        .text("frames_used")?
        .split_whitespace()
        .map(|t| field::<u32>(path, kv.line_of("frames_used"), t, "frame id"))
        .collect::<Result<Vec<_>>>()?;
    let axis = |k: &str| -> Result<AxisStats> {
        let v = kv.numbers(k, 4, Dimension::Length)?;
        Ok(AxisStats { std: v[0], mean: v[1], min: v[2], max: v[3] })
    };
    let stats = BreStats { x: axis("stats.x")?, y: axis("stats.y")?, z: axis("stats.z")? };
    let offset = head.lines().count() + 1;
    let mut per_frame_bre = Vec::new();
    for (line, cols) in csv_rows(path, bre, BRE_HEADER)? {
        let line = line + offset;
        if cols.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 columns, got {}", cols.len())));
        }
        let v = floats(path, line, &cols[1..])?;
        per_frame_bre.push(FrameBre { frame_id: field(path, line, cols[0], "frame_id")?, error: Point3::new(v[0], v[1], v[2]) });
    }
    Ok(CalibrationResult { t_um, mode, per_frame_bre, stats, frames_used, rms_residual })
}

pub fn save_result(r: &CalibrationResult, path: &Path) -> Result<()> {
    write_bytes(path, format_result(r).as_bytes())
}

pub fn load_result(path: &Path) -> Result<CalibrationResult> {
    parse_result(path, &read_text(path)?)
}

// ---------------------------------------------------------------------------
// noise study, planar pose inputs and outputs

/// Noise-study report; values in mm at nanometre resolution.
pub fn format_noise_study(rows: &[NoiseStudyRow]) -> String {
    let mut out = String::from("sigma_mm,residual_std_mm,trials\n");
    for r in rows {
        let _ = writeln!(out, "{:.9},{:.9},{}", r.sigma, r.residual_std, r.trials);
    }
    out
}

/// `fx = …`, `fy = …`, `cx = …`, `cy = …`, optionally tagged `px`.
pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let kv = KeyValueFile::load(path)?;
    let get = |k: &str| -> Result<f64> {
        let (v, _) = kv.raw(k)?;
        let dim = if v.split_whitespace().count() > 1 { Dimension::Pixels } else { Dimension::None };
        kv.number(k, dim)
    };
    kv.wrap("fx", CameraIntrinsics::new(get("fx")?, get("fy")?, get("cx")?, get("cy")?))
}

const TARGET_HEADER: &str = "point_index,x_mm,y_mm,z_mm";
const CORNERS_HEADER: &str = "frame_id,point_index,u,v";

pub fn load_target(path: &Path) -> Result<PlanarTarget> {
    let text = read_text(path)?;
    let mut pts = Vec::new();
    for (line, cols) in csv_rows(path, &text, TARGET_HEADER)? {
        if cols.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 columns, got {}", cols.len())));
        }
        let idx: usize = field(path, line, cols[0], "point_index")?;
        if idx != pts.len() {
            return Err(parse_err(path, line, format!("point_index {idx} out of sequence (expected {})", pts.len())));
        }
        let v = floats(path, line, &cols[1..])?;
        pts.push(Point3::new(v[0], v[1], v[2]));
    }
    PlanarTarget::new(pts, path.display().to_string())
}

/// Corner observations grouped by frame, each ordered by point index.
pub fn load_corners(path: &Path) -> Result<Vec<(u32, Vec<[f64; 2]>)>> {
    let text = read_text(path)?;
    let mut frames: BTreeMap<u32, BTreeMap<usize, [f64; 2]>> = BTreeMap::new();
    for (line, cols) in csv_rows(path, &text, CORNERS_HEADER)? {
        if cols.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 columns, got {}", cols.len())));
        }
        let id: u32 = field(path, line, cols[0], "frame_id")?;
        let idx: usize = field(path, line, cols[1], "point_index")?;
        let uv = floats(path, line, &cols[2..])?;
        if frames.entry(id).or_default().insert(idx, [uv[0], uv[1]]).is_some() {
            return Err(parse_err(path, line, format!("duplicate corner {idx} in frame {id}")));
        }
    }
    frames
        .into_iter()
        .map(|(id, pts)| {
            if pts.keys().enumerate().any(|(i, k)| i != *k) {
                return Err(parse_err(path, 0, format!("frame {id} has gaps in its point indices")));
            }
            Ok((id, pts.into_values().collect()))
        })
        .collect()
}

pub fn format_corners(frames: &[(u32, Vec<[f64; 2]>)]) -> String {
    let mut out = format!("{CORNERS_HEADER}\n");
    for (id, pts) in frames {
        for (i, [u, v]) in pts.iter().enumerate() {
            let _ = writeln!(out, "{id},{i},{},{}", fmt17(*u), fmt17(*v));
        }
    }
    out
}

pub fn format_target(t: &PlanarTarget) -> String {
    let mut out = format!("{TARGET_HEADER}\n");
    for (i, p) in t.points().iter().enumerate() {
        let _ = writeln!(out, "{i},{},{},{}", fmt17(p.x), fmt17(p.y), fmt17(p.z));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, Artifacts, RenderOptions};

    #[test]
    fn fmt17_round_trips() {
        for x in [0.1, 1.0 / 3.0, -123456.789e-7, f64::MIN_POSITIVE, 1e300, 0.0] {
            assert_eq!(fmt17(x).parse::<f64>().unwrap(), x);
        }
    }

    #[test]
    fn kv_units() {
        let p = Path::new("cfg.txt");
        let kv = KeyValueFile::parse(p, "a = 1 2 3 cm\nb = 90 deg # comment\nc = 4\nd = 5 furlong\ne = 6\n").unwrap();
        assert_eq!(kv.numbers("a", 3, Dimension::Length).unwrap(), vec![10.0, 20.0, 30.0]);
        assert!((kv.number("b", Dimension::Angle).unwrap() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
        assert_eq!(kv.number("c", Dimension::None).unwrap(), 4.0);
        assert!(matches!(kv.number("d", Dimension::Length), Err(Error::Unit { line: 4, .. })));
        assert!(matches!(kv.number("e", Dimension::Length), Err(Error::Unit { line: 5, .. })));
        assert!(matches!(kv.numbers("a", 2, Dimension::Length), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(KeyValueFile::parse(p, "x = 1\nx = 2\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(KeyValueFile::parse(p, "novalue\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn phantom_grammar() {
        let text = "kind = hemisphere\nradius = 1.5 cm\ncontainer = 120 120 80 mm\nfeature.0 = 40.0 35.0 12.0 mm\n";
        let kv = KeyValueFile::parse(Path::new("p.txt"), text).unwrap();
        let m = phantom_from_kv(&kv, "").unwrap();
        assert_eq!(m.hemisphere_radius(), Some(15.0));
        assert_eq!(m.feature("0").unwrap(), Point3::new(40.0, 35.0, 12.0));
        let again = KeyValueFile::parse(Path::new("p.txt"), &format_phantom(&m, "")).unwrap();
        assert_eq!(phantom_from_kv(&again, "").unwrap(), m);

        let no_unit = "kind = point\ncontainer = 10 10 10 mm\nfeature.a = 1 2 3\n";
        let kv = KeyValueFile::parse(Path::new("p.txt"), no_unit).unwrap();
        assert!(matches!(phantom_from_kv(&kv, ""), Err(Error::Unit { line: 3, .. })));
        let bad_kind = "kind = cube\ncontainer = 10 10 10 mm\nfeature.a = 1 2 3 mm\n";
        let kv = KeyValueFile::parse(Path::new("p.txt"), bad_kind).unwrap();
        assert!(matches!(phantom_from_kv(&kv, ""), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn pgm_round_trip_and_errors() {
        let img = BScanImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(&bytes[..11], b"P5\n3 2\n255\n");
        assert_eq!(decode_pgm(Path::new("x"), &bytes).unwrap(), img);
        let commented = b"P5\n# made by hand\n3 2\n255\n\x00\x01\x02\xfd\xfe\xff";
        assert_eq!(decode_pgm(Path::new("x"), commented).unwrap(), img);
        assert!(decode_pgm(Path::new("x"), b"P2\n3 2\n255\n").is_err());
        assert!(decode_pgm(Path::new("x"), b"P5\n3 2\n255\n\x00").is_err());
        assert!(decode_pgm(Path::new("x"), b"P5\n3 2\n65535\n").is_err());
    }

    fn synthetic_dataset(root: &Path, render: bool) -> Dataset {
        let cfg = SyntheticConfig {
            seed: 5,
            noise: NoiseSpec { sigma_t: 0.3, sigma_rot: 0.002, sigma_px: 0.7 },
            ..SyntheticConfig::default()
        };
        let phantom = PhantomModel::default_hemisphere();
        let opts = RenderOptions { artifacts: Artifacts::Speckle, ..RenderOptions::default() };
        let acq = generate(&cfg, &phantom, render.then_some(&opts)).unwrap();
        Dataset { root: root.to_path_buf(), phantom, geometry: cfg.geometry, frames: acq.frames, provenance: Provenance::Synthetic(cfg) }
    }

    #[test]
    fn dataset_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for render in [false, true] {
            let root = dir.path().join(format!("ds{render}"));
            let ds = synthetic_dataset(&root, render);
            save_dataset(&ds, &root).unwrap();
            assert_eq!(load_dataset(&root).unwrap(), ds);
        }
    }

    #[test]
    fn empty_external_dataset_loads() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset {
            root: dir.path().to_path_buf(),
            phantom: PhantomModel::default_hemisphere(),
            geometry: BScanGeometry::default(),
            frames: vec![],
            provenance: Provenance::External,
        };
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert!(matches!(
            crate::calibrate::calibrate(&back.frames, &back.phantom, &back.geometry, FitMode::Rigid),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn malformed_pose_line_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset(dir.path(), false);
        save_dataset(&ds, dir.path()).unwrap();
        let poses = dir.path().join("poses.csv");
        let text = fs::read_to_string(&poses).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        // drop one quaternion component from the third data row
        let mut cols: Vec<&str> = lines[3].split(',').collect();
        cols.remove(4);
        lines[3] = cols.join(",");
        fs::write(&poses, lines.join("\n") + "\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { file, line, .. }) => {
                assert_eq!(file, poses);
                assert_eq!(line, 4);
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_files_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
        let ds = synthetic_dataset(dir.path(), true);
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/3.pgm")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(p)) if p.ends_with("3.pgm")));
    }

    #[test]
    fn result_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthetic_dataset(dir.path(), false);
        let r = crate::calibrate::calibrate(&ds.frames, &ds.phantom, &ds.geometry, FitMode::Similarity).unwrap();
        let path = dir.path().join("r.txt");
        save_result(&r, &path).unwrap();
        assert_eq!(load_result(&path).unwrap(), r);
    }

    #[test]
    fn corners_and_targets() {
        let dir = tempfile::tempdir().unwrap();
        let t = PlanarTarget::checkerboard(3, 2, 10.0).unwrap();
        let tp = dir.path().join("t.csv");
        fs::write(&tp, format_target(&t)).unwrap();
        assert_eq!(load_target(&tp).unwrap().points(), t.points());
        let frames = vec![(0u32, vec![[1.0, 2.0]; 6]), (4, vec![[3.0, 4.0]; 6])];
        let cp = dir.path().join("c.csv");
        fs::write(&cp, format_corners(&frames)).unwrap();
        assert_eq!(load_corners(&cp).unwrap(), frames);
        let kp = dir.path().join("k.txt");
        fs::write(&kp, "fx = 800\nfy = 810 px\ncx = 320\ncy = 240\n").unwrap();
        assert_eq!(load_intrinsics(&kp).unwrap(), CameraIntrinsics::new(800.0, 810.0, 320.0, 240.0).unwrap());
    }
}
