//! B-scan images and localization of the hemisphere landmark.
//!
//! The hemisphere shows up as a bright arc. Its centre is found with a
//! two-stage Hough transform: edge pixels vote along their gradient lines
//! into a 2D centre accumulator, then a histogram of edge distances from the
//! winning centre picks the radius.

use crate::error::{Error, Result};
use crate::geom3d::Point3;

/// Pixel grid size and the millimetre size of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BScanGeometry {
    pub width: usize,
    pub height: usize,
    /// mm per pixel along `u` (columns).
    pub sx: f64,
    /// mm per pixel along `v` (rows, increasing with depth).
    pub sy: f64,
}

impl BScanGeometry {
    pub fn new(width: usize, height: usize, sx: f64, sy: f64) -> Result<Self> {
        if !(sx > 0.0 && sy > 0.0 && sx.is_finite() && sy.is_finite()) {
            return Err(Error::InvalidArgument(format!("pixel scale must be positive, got ({sx}, {sy})")));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image must be non-empty".into()));
        }
        Ok(Self { width, height, sx, sy })
    }

    /// Metric image-plane point `(s_x·u, s_y·v, 0)`.
    pub fn pixel_to_plane(&self, u: f64, v: f64) -> Point3 {
        Point3::new(self.sx * u, self.sy * v, 0.0)
    }

    pub fn plane_to_pixel(&self, p: Point3) -> [f64; 2] {
        [p.x / self.sx, p.y / self.sy]
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

impl Default for BScanGeometry {
    fn default() -> Self {
        Self { width: 400, height: 300, sx: 0.2, sy: 0.2 }
    }
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BScanImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BScanImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "pixel buffer has {} bytes, expected {width}×{height}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, u: usize, v: usize) -> u8 {
        self.pixels[v * self.width + u]
    }

    pub fn set(&mut self, u: usize, v: usize, value: u8) {
        self.pixels[v * self.width + u] = value;
    }

    fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }
}

/// Binary edge mask with gradient direction (radians, `atan2(g_v, g_u)`).
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub direction: Vec<f64>,
    pub magnitude: Vec<f64>,
}

impl EdgeMap {
    pub fn is_edge(&self, u: usize, v: usize) -> bool {
        self.mask[v * self.width + u]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(i, _)| (i % self.width, i / self.width, self.direction[i]))
    }
}

/// Central-difference gradient edges; `grad_threshold` is a fraction of the
/// image's maximum gradient magnitude.
pub fn detect_edges(img: &BScanImage, grad_threshold: f64) -> EdgeMap {
    edges_of(&img.to_f64(), img.width, img.height, grad_threshold)
}

/// Gradients below this (grey levels per pixel) are rounding noise.
const MIN_GRADIENT: f64 = 1e-6;

fn edges_of(data: &[f64], width: usize, height: usize, grad_threshold: f64) -> EdgeMap {
    let n = width * height;
    let mut magnitude = vec![0.0; n];
    let mut direction = vec![0.0; n];
    if width >= 3 && height >= 3 {
        for v in 1..height - 1 {
            for u in 1..width - 1 {
                let i = v * width + u;
                let gu = 0.5 * (data[i + 1] - data[i - 1]);
                let gv = 0.5 * (data[i + width] - data[i - width]);
                magnitude[i] = gu.hypot(gv);
                direction[i] = gv.atan2(gu);
            }
        }
    }
    let max = magnitude.iter().copied().fold(0.0, f64::max);
    let mask = if max > 0.0 {
        magnitude.iter().map(|&m| m > MIN_GRADIENT && m >= grad_threshold * max).collect()
    } else {
        vec![false; n]
    };
    EdgeMap { width, height, mask, direction, magnitude }
}

fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for v in 0..height {
            for u in 0..width {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, w) in (-radius..=radius).zip(&kernel) {
                    let (uu, vv) = if horizontal { (u as isize + k, v as isize) } else { (u as isize, v as isize + k) };
                    if uu < 0 || vv < 0 || uu >= width as isize || vv >= height as isize {
                        continue;
                    }
                    acc += w * src[vv as usize * width + uu as usize];
                    wsum += w;
                }
                out[v * width + u] = acc / wsum;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Which half of each gradient line an edge pixel votes along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VoteRays {
    /// Only the half-line heading deeper into the image (`+v`). The arc is
    /// convex toward the transducer, so its centre lies deeper than the arc.
    #[default]
    Deeper,
    /// Both half-lines.
    Both,
}

/// Tuning of the circle detector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HoughParams {
    pub r_min: f64,
    pub r_max: f64,
    /// Edge threshold as a fraction of the maximum gradient.
    pub grad_threshold: f64,
    /// Gaussian pre-smoothing before the gradient, pixels. Zero disables it.
    pub blur_sigma: f64,
    /// Edge pixels whose gradient is within this angle of an image axis do
    /// not vote; container walls appear as axis-aligned lines.
    pub axis_reject: f64,
    pub vote_rays: VoteRays,
    /// Minimum share of voting edge pixels that lie on the circle.
    pub min_score: f64,
    /// Minimum number of edge pixels supporting the circle.
    pub min_support: usize,
    /// A second centre peak within this relative margin of the first is ambiguous.
    pub ambiguity_margin: f64,
    /// Half-width of the square window used to sum centre support and to
    /// take the sub-pixel centroid (1 gives 3×3).
    pub peak_window: usize,
}

impl HoughParams {
    pub fn new(r_min: f64, r_max: f64) -> Self {
        Self {
            r_min,
            r_max,
            grad_threshold: 0.3,
            blur_sigma: 2.5,
            axis_reject: 10f64.to_radians(),
            vote_rays: VoteRays::Deeper,
            min_score: 0.18,
            min_support: 20,
            ambiguity_margin: 0.05,
            peak_window: 6,
        }
    }
}

/// Detected circle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleDetection {
    /// Sub-pixel centre `(a, b)`.
    pub center_px: [f64; 2],
    pub radius_px: f64,
    /// Fraction of the voting edge pixels lying on the detected circle.
    pub score: f64,
}

pub fn detect_circle(img: &BScanImage, r_min: f64, r_max: f64) -> Result<CircleDetection> {
    detect_circle_with(img, &HoughParams::new(r_min, r_max))
}

// Edge pixels sit on either side of a bright ridge, so the distance
// histogram is widened by this many pixels on both ends of the search range.
const RADIAL_SLACK: f64 = 3.0;

pub fn detect_circle_with(img: &BScanImage, params: &HoughParams) -> Result<CircleDetection> {
    let HoughParams { r_min, r_max, .. } = *params;
    if !(r_min >= 0.0 && r_min < r_max) {
        return Err(Error::InvalidArgument(format!("need 0 <= r_min < r_max, got {r_min}, {r_max}")));
    }
    let (w, h) = (img.width, img.height);
    if (w as f64) <= 2.0 * r_min || (h as f64) <= 2.0 * r_min {
        return Err(Error::InvalidArgument(format!("{w}×{h} image is too small for r_min = {r_min}")));
    }

    let smoothed = gaussian_blur(&img.to_f64(), w, h, params.blur_sigma);
    let edges = edges_of(&smoothed, w, h, params.grad_threshold);
    let edge_list: Vec<(usize, usize, f64)> = edges.edges().collect();
    if edge_list.is_empty() {
        return Err(Error::NoCircleFound("image has no edges".into()));
    }

    // Stage 1: centre accumulator.
    let mut acc = vec![0u32; w * h];
    let lo = (r_min - RADIAL_SLACK).max(1.0);
    let hi = r_max + RADIAL_SLACK;
    for &(u, v, theta) in &edge_list {
        if near_axis(theta, params.axis_reject) {
            continue;
        }
        let (dv, du) = theta.sin_cos();
        let signs: &[f64] = match params.vote_rays {
            VoteRays::Both => &[1.0, -1.0],
            VoteRays::Deeper if dv > 0.0 => &[1.0],
            VoteRays::Deeper => &[-1.0],
        };
        for &s in signs {
            let mut last = usize::MAX;
            let mut k = lo;
            while k <= hi {
                let a = (u as f64 + s * k * du).round();
                let b = (v as f64 + s * k * dv).round();
                if a < 0.0 || b < 0.0 || a >= w as f64 || b >= h as f64 {
                    break;
                }
                let idx = b as usize * w + a as usize;
                if idx != last {
                    acc[idx] += 1;
                    last = idx;
                }
                k += 1.0;
            }
        }
    }

    let support = box_sum(&acc, w, h, params.peak_window);
    let (peak, peak_support) = support
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, &s)| (i, s))
        .unwrap();
    if peak_support == 0 {
        return Err(Error::NoCircleFound("no centre votes".into()));
    }
    let (pa, pb) = (peak % w, peak / w);

    let exclusion = (r_min * 0.5).max(5.0).max((2 * params.peak_window + 1) as f64);
    let second = support
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let (a, b) = ((i % w) as f64, (i / w) as f64);
            (a - pa as f64).hypot(b - pb as f64) > exclusion
        })
        .map(|(_, &s)| s)
        .max()
        .unwrap_or(0);

    let (a0, b0) = centroid(&acc, w, h, pa, pb, params.peak_window);

    // Stage 2: radius histogram of edge distances from the centre.
    let nbins = hi.ceil() as usize + 2;
    let mut hist = vec![0u32; nbins];
    let mut dists = Vec::with_capacity(edge_list.len());
    for &(u, v, _) in &edge_list {
        let d = (u as f64 - a0).hypot(v as f64 - b0);
        if d >= lo && d <= hi {
            hist[d.floor() as usize] += 1;
            dists.push(d);
        }
    }
    let smooth: Vec<u32> = (0..nbins)
        .map(|i| (i.saturating_sub(2)..(i + 3).min(nbins)).map(|j| hist[j]).sum())
        .collect();
    let best_bin = (0..nbins).max_by(|&x, &y| smooth[x].cmp(&smooth[y]).then(y.cmp(&x))).unwrap();
    // A bright ridge yields an edge band on each side; shift the window
    // until it straddles both so the mean lands on the ridge line.
    let half = RADIAL_SLACK + 2.0 * params.blur_sigma;
    let mut radius = best_bin as f64 + 0.5;
    for _ in 0..10 {
        let window: Vec<f64> = dists.iter().copied().filter(|d| (d - radius).abs() <= half).collect();
        if window.is_empty() {
            return Err(Error::NoCircleFound("empty radius histogram".into()));
        }
        let next = window.iter().sum::<f64>() / window.len() as f64;
        let moved = (next - radius).abs();
        radius = next;
        if moved < 1e-3 {
            break;
        }
    }
    // Score: share of the voting edges that sit on the circle.
    let voters: Vec<&(usize, usize, f64)> = edge_list.iter().filter(|e| !near_axis(e.2, params.axis_reject)).collect();
    let on_circle = voters
        .iter()
        .filter(|&&&(u, v, _)| ((u as f64 - a0).hypot(v as f64 - b0) - radius).abs() <= half)
        .count();
    let score = if voters.is_empty() { 0.0 } else { on_circle as f64 / voters.len() as f64 };

    if on_circle < params.min_support || score < params.min_score {
        return Err(Error::NoCircleFound(format!(
            "best circle has support {on_circle} edge pixels (score {score:.3})"
        )));
    }
    if radius < r_min - 1.0 || radius > r_max + 1.0 {
        return Err(Error::NoCircleFound(format!("radius {radius:.1} px outside search range")));
    }
    if second as f64 >= (1.0 - params.ambiguity_margin) * peak_support as f64 {
        return Err(Error::AmbiguousPeak { first: peak_support, second });
    }
    Ok(CircleDetection { center_px: [a0, b0], radius_px: radius, score })
}

fn near_axis(theta: f64, tol: f64) -> bool {
    use std::f64::consts::FRAC_PI_2;
    let m = theta.rem_euclid(FRAC_PI_2);
    m < tol || FRAC_PI_2 - m < tol
}

fn box_sum(acc: &[u32], w: usize, h: usize, k: usize) -> Vec<u32> {
    let mut out = vec![0u32; acc.len()];
    for b in 0..h {
        for a in 0..w {
            let mut s = 0;
            for bb in b.saturating_sub(k)..(b + k + 1).min(h) {
                for aa in a.saturating_sub(k)..(a + k + 1).min(w) {
                    s += acc[bb * w + aa];
                }
            }
            out[b * w + a] = s;
        }
    }
    out
}

fn centroid(acc: &[u32], w: usize, h: usize, a: usize, b: usize, k: usize) -> (f64, f64) {
    let (mut sa, mut sb, mut sw) = (0.0, 0.0, 0.0);
    for bb in b.saturating_sub(k)..(b + k + 1).min(h) {
        for aa in a.saturating_sub(k)..(a + k + 1).min(w) {
            let wgt = acc[bb * w + aa] as f64;
            sa += wgt * aa as f64;
            sb += wgt * bb as f64;
            sw += wgt;
        }
    }
    if sw == 0.0 {
        (a as f64, b as f64)
    } else {
        (sa / sw, sb / sw)
    }
}

/// Metric image-plane point of a detection.
pub fn feature_to_image_point(d: &CircleDetection, g: &BScanGeometry) -> Point3 {
    g.pixel_to_plane(d.center_px[0], d.center_px[1])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster_circle(w: usize, h: usize, a: f64, b: f64, r: f64) -> BScanImage {
        let mut img = BScanImage::filled(w, h, 0);
        let steps = (2.0 * std::f64::consts::PI * r * 4.0) as usize;
        for i in 0..steps {
            let t = i as f64 / steps as f64 * std::f64::consts::TAU;
            let (u, v) = ((a + r * t.cos()).round(), (b + r * t.sin()).round());
            if u >= 0.0 && v >= 0.0 && (u as usize) < w && (v as usize) < h {
                img.set(u as usize, v as usize, 255);
            }
        }
        img
    }

    #[test]
    fn uniform_image_has_no_edges() {
        let e = detect_edges(&BScanImage::filled(20, 20, 77), 0.3);
        assert_eq!(e.count(), 0);
    }

    #[test]
    fn vertical_step_edge_direction() {
        let mut img = BScanImage::filled(20, 10, 10);
        for v in 0..10 {
            for u in 10..20 {
                img.set(u, v, 200);
            }
        }
        let e = detect_edges(&img, 0.3);
        assert!(e.count() > 0);
        for (u, v, dir) in e.edges() {
            assert!(u == 9 || u == 10, "edge at column {u}");
            assert!((1..9).contains(&v));
            assert!(dir.abs() < 0.05);
        }
    }

    #[test]
    fn perfect_circle() {
        let img = raster_circle(160, 160, 60.0, 80.0, 40.0);
        let d = detect_circle(&img, 20.0, 70.0).unwrap();
        assert!((d.center_px[0] - 60.0).abs() <= 1.0, "{d:?}");
        assert!((d.center_px[1] - 80.0).abs() <= 1.0, "{d:?}");
        assert!((d.radius_px - 40.0).abs() <= 1.0, "{d:?}");
        assert!(d.score > 0.5 && d.score <= 1.0);
    }

    #[test]
    fn both_ray_voting_also_finds_circle() {
        let img = raster_circle(160, 160, 70.0, 75.0, 35.0);
        let mut p = HoughParams::new(20.0, 60.0);
        p.vote_rays = VoteRays::Both;
        let d = detect_circle_with(&img, &p).unwrap();
        assert!((d.center_px[0] - 70.0).abs() <= 1.0 && (d.center_px[1] - 75.0).abs() <= 1.0, "{d:?}");
    }

    #[test]
    fn blank_image_has_no_circle() {
        assert!(matches!(detect_circle(&BScanImage::filled(100, 100, 0), 10.0, 40.0), Err(Error::NoCircleFound(_))));
    }

    #[test]
    fn two_equal_circles_are_ambiguous() {
        let mut img = raster_circle(300, 160, 70.0, 80.0, 40.0);
        let other = raster_circle(300, 160, 220.0, 80.0, 40.0);
        for (p, q) in img.pixels.iter_mut().zip(other.pixels()) {
            *p = (*p).max(*q);
        }
        assert!(matches!(detect_circle(&img, 20.0, 60.0), Err(Error::AmbiguousPeak { .. })));
    }

    #[test]
    fn invalid_ranges() {
        let img = BScanImage::filled(50, 50, 0);
        assert!(matches!(detect_circle(&img, 30.0, 20.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(detect_circle(&img, 30.0, 40.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn image_point_conversion() {
        let g = BScanGeometry::new(200, 200, 0.2, 0.2).unwrap();
        let at = |a, b| CircleDetection { center_px: [a, b], radius_px: 10.0, score: 1.0 };
        assert_eq!(feature_to_image_point(&at(0.0, 0.0), &g), Point3::ORIGIN);
        let p = feature_to_image_point(&at(100.0, 50.0), &g);
        assert!(p.distance(&Point3::new(20.0, 10.0, 0.0)) < 1e-12);
    }

    #[test]
    fn geometry_and_image_validation() {
        assert!(BScanGeometry::new(10, 10, 0.0, 1.0).is_err());
        assert!(BScanImage::new(3, 3, vec![0; 8]).is_err());
    }
}
