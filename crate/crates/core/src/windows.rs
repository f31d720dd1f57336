//! Candidate windows: sliding windows over an image pyramid, pruned to the
//! windows whose implied 3D position lies inside the monitored scene.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Relative slack when assigning object sizes to the closed size-ratio band.
const BAND_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Window side in pixels at every pyramid level.
    pub ws: usize,
    /// Window step as a fraction of `ws`.
    pub stride_frac: f64,
    /// Size ratio between consecutive pyramid levels.
    pub pyramid_ratio: f64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            ws: 48,
            stride_frac: 0.3,
            pyramid_ratio: 1.4,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ws == 0 {
            return Err(Error::config("window size must be positive"));
        }
        if !(self.stride_frac > 0.0 && self.stride_frac <= 1.0) {
            return Err(Error::config(format!("stride fraction {} outside (0, 1]", self.stride_frac)));
        }
        if !(self.pyramid_ratio > 1.0) {
            return Err(Error::config(format!("pyramid ratio {} must exceed 1", self.pyramid_ratio)));
        }
        Ok(())
    }

    /// Step in level pixels: `floor(stride_frac * ws)`, at least 1.
    pub fn step(&self) -> usize {
        ((self.stride_frac * self.ws as f64 + 1e-9).floor() as usize).max(1)
    }
}

/// Size and placement of one pyramid level relative to the source image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelGeometry {
    pub level: usize,
    pub width: usize,
    pub height: usize,
    /// `ratio^level`.
    pub nominal_scale: f64,
    /// Source width / level width.
    pub scale_x: f64,
    /// Source height / level height.
    pub scale_y: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel {
    pub geometry: LevelGeometry,
    pub image: Image,
}

/// Level sizes for a `width x height` source: level `k` is
/// `round(size / ratio^k)`, down to the last level whose smaller side still
/// holds a window.
pub fn pyramid_geometry(width: usize, height: usize, ws: usize, ratio: f64) -> Result<Vec<LevelGeometry>> {
    if !(ratio > 1.0) {
        return Err(Error::config(format!("pyramid ratio {ratio} must exceed 1")));
    }
    if width.min(height) < ws {
        return Err(Error::EmptyPyramid { width, height, window: ws });
    }
    let mut levels = Vec::new();
    for level in 0.. {
        let s = ratio.powi(level as i32);
        let (w, h) = if level == 0 {
            (width, height)
        } else {
            ((width as f64 / s).round() as usize, (height as f64 / s).round() as usize)
        };
        if w.min(h) < ws {
            break;
        }
        levels.push(LevelGeometry {
            level,
            width: w,
            height: h,
            nominal_scale: s,
            scale_x: width as f64 / w as f64,
            scale_y: height as f64 / h as f64,
        });
    }
    Ok(levels)
}

/// Resamples the image to every level of [`pyramid_geometry`].
pub fn build_pyramid(image: &Image, ws: usize, ratio: f64) -> Result<Vec<PyramidLevel>> {
    let geo = pyramid_geometry(image.width, image.height, ws, ratio)?;
    Ok(geo
        .into_iter()
        .map(|g| PyramidLevel {
            image: if g.level == 0 {
                image.clone()
            } else {
                image.resize_bilinear(g.width, g.height)
            },
            geometry: g,
        })
        .collect())
}

/// A square window, `ws x ws` at its own level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window {
    /// Centre in source pixels.
    pub x2d: f64,
    pub y2d: f64,
    /// Side in source pixels.
    pub d2d: f64,
    pub level: usize,
    /// Top-left corner in level pixels.
    pub lx: usize,
    pub ly: usize,
    pub scale_x: f64,
    pub scale_y: f64,
}

impl Window {
    /// `(x0, y0, x1, y1)` in source pixels.
    pub fn footprint(&self, ws: usize) -> (f64, f64, f64, f64) {
        let (lx, ly, ws) = (self.lx as f64, self.ly as f64, ws as f64);
        (
            lx * self.scale_x,
            ly * self.scale_y,
            (lx + ws) * self.scale_x,
            (ly + ws) * self.scale_y,
        )
    }
}

/// Window origins along one axis: regular steps plus one flush with the end.
pub fn axis_positions(len: usize, ws: usize, step: usize) -> Vec<usize> {
    if len < ws {
        return Vec::new();
    }
    let mut out: Vec<usize> = (0..=len - ws).step_by(step).collect();
    if *out.last().expect("len >= ws") != len - ws {
        out.push(len - ws);
    }
    out
}

/// Every window of one level, row-major, mapped to source coordinates.
pub fn sliding_windows(level: &LevelGeometry, ws: usize, stride_frac: f64) -> Vec<Window> {
    let cfg = WindowConfig {
        ws,
        stride_frac,
        pyramid_ratio: 2.0,
    };
    let step = cfg.step();
    let xs = axis_positions(level.width, ws, step);
    let ys = axis_positions(level.height, ws, step);
    let half = ws as f64 / 2.0;
    let mut out = Vec::with_capacity(xs.len() * ys.len());
    for &ly in &ys {
        for &lx in &xs {
            out.push(Window {
                x2d: (lx as f64 + half) * level.scale_x,
                y2d: (ly as f64 + half) * level.scale_y,
                d2d: ws as f64 * 0.5 * (level.scale_x + level.scale_y),
                level: level.level,
                lx,
                ly,
                scale_x: level.scale_x,
                scale_y: level.scale_y,
            });
        }
    }
    out
}

/// Sliding windows of every level, level-major.
pub fn all_windows(width: usize, height: usize, cfg: &WindowConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    Ok(pyramid_geometry(width, height, cfg.ws, cfg.pyramid_ratio)?
        .iter()
        .flat_map(|l| sliding_windows(l, cfg.ws, cfg.stride_frac))
        .collect())
}

/// Outcome of [`coverage_verify`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoverageReport {
    /// Every object was contained with a strictly positive margin.
    pub pass: bool,
    /// Smallest containment slack over all objects, source pixels.
    pub worst_margin: f64,
    /// `(side, x, y)` of the object attaining the worst margin.
    pub worst_object: (f64, f64, f64),
    pub sizes_checked: usize,
    pub positions_checked: usize,
}

/// Slack of the best window for a 1D interval `[a, a + len]` on a canvas of
/// length `canvas`: the smaller of its distances to the window edges,
/// maximised over windows. Window edges on the canvas border cannot be
/// crossed by an on-canvas object and impose no limit.
fn axis_margin(starts: &[f64], extent: f64, a: f64, len: f64, canvas: f64) -> f64 {
    starts
        .iter()
        .map(|&s| {
            let lo = if s <= 1e-9 { f64::INFINITY } else { a - s };
            let hi = if s + extent >= canvas - 1e-9 { f64::INFINITY } else { s + extent - a - len };
            lo.min(hi)
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

fn sweep(from: f64, to: f64, step: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut v = from;
    while v < to {
        out.push(v);
        v += step;
    }
    out.push(to);
    out
}

/// Exhaustive containment check on a `canvas x canvas` image: for every
/// square object whose size ratio `side / (ws * level scale)` falls in
/// `[rs_lo, rs_hi]` at some level, and every position (both swept at
/// `resolution` pixels), some window of such a level must contain it.
///
/// Window grids are separable, so the per-axis best margins at a level bound
/// the 2D margin from below.
pub fn coverage_verify(
    rs_lo: f64,
    rs_hi: f64,
    cfg: &WindowConfig,
    canvas: usize,
    resolution: f64,
) -> Result<CoverageReport> {
    cfg.validate()?;
    if !(rs_lo > 0.0 && rs_lo < rs_hi && rs_hi <= 1.0) {
        return Err(Error::config(format!("size-ratio band [{rs_lo}, {rs_hi}] is invalid")));
    }
    if cfg.pyramid_ratio > rs_hi / rs_lo * (1.0 + BAND_EPS) {
        return Err(Error::config(format!(
            "pyramid ratio {} leaves gaps in the size-ratio band [{rs_lo}, {rs_hi}]",
            cfg.pyramid_ratio
        )));
    }
    if !(resolution > 0.0) {
        return Err(Error::config("sweep resolution must be positive"));
    }
    let levels = pyramid_geometry(canvas, canvas, cfg.ws, cfg.pyramid_ratio)?;
    let step = cfg.step();
    let ws = cfg.ws as f64;
    // per level and axis: window starts and extent in source pixels
    let axes: Vec<[(Vec<f64>, f64); 2]> = levels
        .iter()
        .map(|l| {
            let ax = |len: usize, s: f64| {
                (
                    axis_positions(len, cfg.ws, step).iter().map(|&p| p as f64 * s).collect::<Vec<_>>(),
                    ws * s,
                )
            };
            [ax(l.width, l.scale_x), ax(l.height, l.scale_y)]
        })
        .collect();

    let top = levels.last().expect("pyramid is non-empty").nominal_scale;
    let sizes = sweep(rs_lo * ws, rs_hi * ws * top, resolution);
    let mut report = CoverageReport {
        pass: true,
        worst_margin: f64::INFINITY,
        worst_object: (0.0, 0.0, 0.0),
        sizes_checked: sizes.len(),
        positions_checked: 0,
    };
    for &side in &sizes {
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for (l, axis) in levels.iter().zip(&axes) {
            let rs = side / (ws * l.nominal_scale);
            if rs < rs_lo * (1.0 - BAND_EPS) || rs > rs_hi * (1.0 + BAND_EPS) {
                continue;
            }
            let mut level_worst = (f64::INFINITY, 0.0, 0.0);
            let positions = sweep(0.0, canvas as f64 - side, resolution);
            report.positions_checked += 2 * positions.len();
            for (dim, (starts, extent)) in axis.iter().enumerate() {
                for &a in &positions {
                    let m = axis_margin(starts, *extent, a, side, canvas as f64);
                    if m < level_worst.0 {
                        level_worst = if dim == 0 { (m, a, level_worst.2) } else { (m, level_worst.1, a) };
                    }
                }
            }
            if level_worst.0 > best.0 {
                best = level_worst;
            }
        }
        if best.0 < report.worst_margin {
            report.worst_margin = best.0;
            report.worst_object = (side, best.1, best.2);
        }
    }
    report.pass = report.worst_margin > 0.0;
    Ok(report)
}

/// Simplified projection with small camera rotations:
/// `x2D = (m11 x + m13 z + m14) / (z + m34)`,
/// `y2D = (m22 y + m23 z + m24) / (z + m34)`,
/// `d2D = m11 d3D / (z + m34)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub m11: f64,
    pub m22: f64,
    pub m13: f64,
    pub m23: f64,
    pub m14: f64,
    pub m24: f64,
    pub m34: f64,
}

impl CameraModel {
    pub fn new(m11: f64, m22: f64, m13: f64, m23: f64, m14: f64, m24: f64, m34: f64) -> Result<Self> {
        let cam = CameraModel {
            m11,
            m22,
            m13,
            m23,
            m14,
            m24,
            m34,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// From focal lengths, principal point and camera translation.
    pub fn from_intrinsics(fx: f64, fy: f64, u0: f64, v0: f64, t: [f64; 3]) -> Result<Self> {
        Self::new(fx, fy, u0, v0, fx * t[0] + u0 * t[2], fy * t[1] + v0 * t[2], t[2])
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.m11, self.m22, self.m13, self.m23, self.m14, self.m24, self.m34];
        if !all.iter().all(|v| v.is_finite()) || !(self.m11 > 0.0 && self.m22 > 0.0) {
            return Err(Error::config("camera needs finite terms and positive focal terms"));
        }
        Ok(())
    }

    /// `(x2D, y2D, d2D)` of an object of side `d3d` at `(x, y, z)`.
    pub fn project(&self, x: f64, y: f64, z: f64, d3d: f64) -> (f64, f64, f64) {
        let depth = z + self.m34;
        (
            (self.m11 * x + self.m13 * z + self.m14) / depth,
            (self.m22 * y + self.m23 * z + self.m24) / depth,
            self.m11 * d3d / depth,
        )
    }

    /// World position of an object of side `d3d` seen as a `d2d` square
    /// centred at `(x2d, y2d)`.
    pub fn implied_3d(&self, x2d: f64, y2d: f64, d2d: f64, d3d: f64) -> (f64, f64, f64) {
        let depth = self.m11 * d3d / d2d;
        let z = depth - self.m34;
        let x = ((x2d - self.m13) * depth + self.m13 * self.m34 - self.m14) / self.m11;
        let y = ((y2d - self.m23) * depth + self.m23 * self.m34 - self.m24) / self.m22;
        (x, y, z)
    }

    pub fn window_3d(&self, w: &Window, d3d: f64) -> (f64, f64, f64) {
        self.implied_3d(w.x2d, w.y2d, w.d2d, d3d)
    }
}

/// Lateral and vertical extent of the scene plus the physical object size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneRanges {
    pub x3d_min: f64,
    pub x3d_max: f64,
    pub y3d_min: f64,
    pub y3d_max: f64,
    pub d3d: f64,
}

impl SceneRanges {
    pub fn validate(&self) -> Result<()> {
        if !(self.x3d_min < self.x3d_max && self.y3d_min < self.y3d_max) {
            return Err(Error::config("scene ranges need min < max on both axes"));
        }
        if !(self.d3d > 0.0 && self.d3d.is_finite()) {
            return Err(Error::config("object size d3d must be positive"));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x3d_min..=self.x3d_max).contains(&x) && (self.y3d_min..=self.y3d_max).contains(&y)
    }
}

/// Keeps the windows whose implied world position lies inside `ranges`.
pub fn perspective_filter(windows: &[Window], cam: &CameraModel, ranges: &SceneRanges) -> Vec<Window> {
    windows
        .iter()
        .filter(|w| {
            let (x, y, _) = cam.window_3d(w, ranges.d3d);
            ranges.contains(x, y)
        })
        .copied()
        .collect()
}

/// Membership in the region bounded by the four boundary planes
/// `d3D (x2D - m13) = a d2D` and `d3D (y2D - m23) = b d2D`, evaluated as
/// half-spaces in window coordinates. Infinite bounds impose nothing.
pub fn inside_boundary_planes(x2d: f64, y2d: f64, d2d: f64, cam: &CameraModel, ranges: &SceneRanges) -> bool {
    let ax = |bound: f64| (cam.m11 * bound + cam.m14 - cam.m13 * cam.m34) / cam.m11;
    let ay = |bound: f64| (cam.m22 * bound + cam.m24 - cam.m23 * cam.m34) / cam.m11;
    let u = ranges.d3d * (x2d - cam.m13);
    let v = ranges.d3d * (y2d - cam.m23);
    let above = |val: f64, bound: f64, a: &dyn Fn(f64) -> f64| bound == f64::NEG_INFINITY || val >= a(bound) * d2d;
    let below = |val: f64, bound: f64, a: &dyn Fn(f64) -> f64| bound == f64::INFINITY || val <= a(bound) * d2d;
    above(u, ranges.x3d_min, &ax)
        && below(u, ranges.x3d_max, &ax)
        && above(v, ranges.y3d_min, &ay)
        && below(v, ranges.y3d_max, &ay)
}

/// Sliding windows and the perspective-feasible subset used for detection.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalWindows {
    /// Number of sliding windows before pruning.
    pub sliding: usize,
    pub windows: Vec<Window>,
}

impl FinalWindows {
    /// `|kept| / |sliding|`.
    pub fn keep_ratio(&self) -> f64 {
        if self.sliding == 0 {
            0.0
        } else {
            self.windows.len() as f64 / self.sliding as f64
        }
    }
}

/// Sliding windows of the whole pyramid intersected with the scene frustum;
/// without a camera every sliding window is kept.
pub fn final_windows(
    width: usize,
    height: usize,
    geometry: Option<(&CameraModel, &SceneRanges)>,
    cfg: &WindowConfig,
) -> Result<FinalWindows> {
    let all = all_windows(width, height, cfg)?;
    let sliding = all.len();
    let windows = match geometry {
        Some((cam, ranges)) => {
            cam.validate()?;
            ranges.validate()?;
            perspective_filter(&all, cam, ranges)
        }
        None => all,
    };
    Ok(FinalWindows { sliding, windows })
}

pub fn windows_csv(windows: &[Window]) -> String {
    let mut out = String::from("level,x2d,y2d,d2d\n");
    for w in windows {
        let _ = writeln!(out, "{},{:.3},{:.3},{:.3}", w.level, w.x2d, w.y2d, w.d2d);
    }
    out
}

/// Camera, scene and window settings as read from a TOML file. Camera terms
/// are either all given or all absent (no pruning); ranges default to
/// unbounded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub m11: Option<f64>,
    pub m22: Option<f64>,
    pub m13: Option<f64>,
    pub m23: Option<f64>,
    pub m14: Option<f64>,
    pub m24: Option<f64>,
    pub m34: Option<f64>,
    pub d3d: f64,
    pub x3d_min: f64,
    pub x3d_max: f64,
    pub y3d_min: f64,
    pub y3d_max: f64,
    pub ws: usize,
    pub stride_frac: f64,
    pub pyramid_ratio: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        let w = WindowConfig::default();
        GeometryConfig {
            m11: None,
            m22: None,
            m13: None,
            m23: None,
            m14: None,
            m24: None,
            m34: None,
            d3d: 1.0,
            x3d_min: f64::NEG_INFINITY,
            x3d_max: f64::INFINITY,
            y3d_min: f64::NEG_INFINITY,
            y3d_max: f64::INFINITY,
            ws: w.ws,
            stride_frac: w.stride_frac,
            pyramid_ratio: w.pyramid_ratio,
        }
    }
}

impl GeometryConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn with_camera(cam: &CameraModel, ranges: &SceneRanges, windows: &WindowConfig) -> Self {
        GeometryConfig {
            m11: Some(cam.m11),
            m22: Some(cam.m22),
            m13: Some(cam.m13),
            m23: Some(cam.m23),
            m14: Some(cam.m14),
            m24: Some(cam.m24),
            m34: Some(cam.m34),
            d3d: ranges.d3d,
            x3d_min: ranges.x3d_min,
            x3d_max: ranges.x3d_max,
            y3d_min: ranges.y3d_min,
            y3d_max: ranges.y3d_max,
            ws: windows.ws,
            stride_frac: windows.stride_frac,
            pyramid_ratio: windows.pyramid_ratio,
        }
    }

    pub fn window_config(&self) -> Result<WindowConfig> {
        let w = WindowConfig {
            ws: self.ws,
            stride_frac: self.stride_frac,
            pyramid_ratio: self.pyramid_ratio,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn ranges(&self) -> Result<SceneRanges> {
        let r = SceneRanges {
            x3d_min: self.x3d_min,
            x3d_max: self.x3d_max,
            y3d_min: self.y3d_min,
            y3d_max: self.y3d_max,
            d3d: self.d3d,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn camera(&self) -> Result<Option<CameraModel>> {
        let terms = [self.m11, self.m22, self.m13, self.m23, self.m14, self.m24, self.m34];
        match terms.iter().filter(|t| t.is_some()).count() {
            0 => Ok(None),
            7 => {
                let t: Vec<f64> = terms.iter().map(|v| v.expect("counted")).collect();
                CameraModel::new(t[0], t[1], t[2], t[3], t[4], t[5], t[6]).map(Some)
            }
            _ => Err(Error::config("camera terms m11..m34 must be given together")),
        }
    }

    /// Camera and ranges when pruning is enabled.
    pub fn geometry(&self) -> Result<Option<(CameraModel, SceneRanges)>> {
        match self.camera()? {
            Some(c) => Ok(Some((c, self.ranges()?))),
            None => Ok(None),
        }
    }
}
