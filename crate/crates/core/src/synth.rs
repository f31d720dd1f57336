//! Synthetic, camera-consistent detection scenes and the labelled training
//! windows cut from them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{encode_target, BBox, GroundTruthBox};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::train::TrainSample;
use crate::windows::{build_pyramid, CameraModel, LevelGeometry, PyramidLevel, SceneRanges, WindowConfig, Window};

/// Class id of rectangles.
pub const RECTANGLE: usize = 1;
/// Class id of discs.
pub const DISC: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    /// Object image sizes are drawn log-uniformly from this range, which fixes
    /// the depth; lateral and vertical positions come from the scene ranges.
    pub d2d_min: f64,
    pub d2d_max: f64,
    /// Amplitude of the per-pixel background noise.
    pub noise: u8,
    /// Placement attempts per object.
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 320,
            height: 240,
            objects_min: 1,
            objects_max: 3,
            d2d_min: 26.0,
            d2d_max: 110.0,
            noise: 24,
            max_attempts: 200,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("image size must be positive"));
        }
        if self.objects_min > self.objects_max {
            return Err(Error::config("objects_min exceeds objects_max"));
        }
        if !(self.d2d_min > 0.0 && self.d2d_min <= self.d2d_max) {
            return Err(Error::config("object size range is invalid"));
        }
        Ok(())
    }
}

/// A rendered image with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<GroundTruthBox>,
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn contrasting_color(rng: &mut ChaCha8Rng, base: [u8; 3]) -> [u8; 3] {
    loop {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let diff: i32 = c.iter().zip(&base).map(|(a, b)| (*a as i32 - *b as i32).abs()).sum();
        if diff >= 3 * 70 {
            return c;
        }
    }
}

/// Paints `color` with 4x4 supersampled coverage of `inside`.
fn paint<F: Fn(f64, f64) -> bool>(img: &mut Image, b: &BBox, color: [u8; 3], inside: F) {
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(img.width);
    let y1 = (b.y2.ceil() as usize).min(img.height);
    for y in y0..y1 {
        for x in x0..x1 {
            let mut hits = 0u32;
            for sy in 0..4 {
                for sx in 0..4 {
                    let px = x as f64 + (sx as f64 + 0.5) / 4.0;
                    let py = y as f64 + (sy as f64 + 0.5) / 4.0;
                    hits += inside(px, py) as u32;
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f64 / 16.0;
            let old = img.get(x, y);
            let mut px = [0u8; 3];
            for k in 0..3 {
                px[k] = (old[k] as f64 * (1.0 - a) + color[k] as f64 * a).round() as u8;
            }
            img.put(x, y, px);
        }
    }
}

fn render_background(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (Image, [u8; 3]) {
    let base: [u8; 3] = [rng.random_range(40..216), rng.random_range(40..216), rng.random_range(40..216)];
    let gx: f64 = rng.random_range(-30.0..30.0) / cfg.width as f64;
    let gy: f64 = rng.random_range(-30.0..30.0) / cfg.height as f64;
    let mut img = Image::new(cfg.width, cfg.height);
    let n = cfg.noise as i32;
    for y in 0..cfg.height {
        for x in 0..cfg.width {
            let shade = gx * (x as f64 - cfg.width as f64 / 2.0) + gy * (y as f64 - cfg.height as f64 / 2.0);
            let mut px = [0u8; 3];
            for k in 0..3 {
                let noise = if n > 0 { rng.random_range(-n..=n) } else { 0 };
                px[k] = (base[k] as f64 + shade + noise as f64).round().clamp(0.0, 255.0) as u8;
            }
            img.put(x, y, px);
        }
    }
    (img, base)
}

/// Renders scene `index` of the stream identified by `seed`.
pub fn generate_scene(
    cfg: &SynthConfig,
    cam: &CameraModel,
    ranges: &SceneRanges,
    seed: u64,
    index: usize,
) -> Result<Scene> {
    cfg.validate()?;
    cam.validate()?;
    ranges.validate()?;
    if ![ranges.x3d_min, ranges.x3d_max, ranges.y3d_min, ranges.y3d_max].iter().all(|v| v.is_finite()) {
        return Err(Error::Generation("scene ranges must be finite to place objects".into()));
    }
    let mut rng = scene_rng(seed, index);
    let (mut img, base) = render_background(&mut rng, cfg);
    let wanted = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let mut objects: Vec<GroundTruthBox> = Vec::new();
    let (lmin, lmax) = (cfg.d2d_min.ln(), cfg.d2d_max.ln());
    for _ in 0..wanted {
        for _ in 0..cfg.max_attempts {
            let d2d = if lmax > lmin { rng.random_range(lmin..lmax).exp() } else { cfg.d2d_min };
            let z = cam.m11 * ranges.d3d / d2d - cam.m34;
            let x = rng.random_range(ranges.x3d_min..=ranges.x3d_max);
            let y = rng.random_range(ranges.y3d_min..=ranges.y3d_max);
            let (cx, cy, side) = cam.project(x, y, z, ranges.d3d);
            let label = if rng.random::<bool>() { RECTANGLE } else { DISC };
            let (w, h) = if label == RECTANGLE {
                let aspect = rng.random_range(0.7..=1.0);
                if rng.random::<bool>() {
                    (side, side * aspect)
                } else {
                    (side * aspect, side)
                }
            } else {
                (side, side)
            };
            let b = BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0);
            let inside = b.x1 >= 1.0 && b.y1 >= 1.0 && b.x2 <= cfg.width as f64 - 1.0 && b.y2 <= cfg.height as f64 - 1.0;
            let apart = objects.iter().all(|o| {
                b.x2 + 4.0 <= o.bbox.x1 || o.bbox.x2 + 4.0 <= b.x1 || b.y2 + 4.0 <= o.bbox.y1 || o.bbox.y2 + 4.0 <= b.y1
            });
            if !(inside && apart) {
                continue;
            }
            let color = contrasting_color(&mut rng, base);
            if label == RECTANGLE {
                paint(&mut img, &b, color, |px, py| px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2);
            } else {
                let r2 = (side / 2.0).powi(2);
                paint(&mut img, &b, color, |px, py| (px - cx).powi(2) + (py - cy).powi(2) <= r2);
            }
            objects.push(GroundTruthBox { bbox: b, label });
            break;
        }
    }
    if objects.len() < cfg.objects_min {
        return Err(Error::Generation(format!(
            "placed {} of at least {} objects in scene {index}; the scene ranges barely intersect the image",
            objects.len(),
            cfg.objects_min
        )));
    }
    Ok(Scene { image: img, objects })
}

/// Scenes `first..first + count` of the stream `seed`.
pub fn generate_scenes(
    cfg: &SynthConfig,
    cam: &CameraModel,
    ranges: &SceneRanges,
    seed: u64,
    first: usize,
    count: usize,
) -> Result<Vec<Scene>> {
    (first..first + count).map(|i| generate_scene(cfg, cam, ranges, seed, i)).collect()
}

/// How training windows are labelled and balanced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Size-ratio band of positive windows.
    pub rs_lo: f64,
    pub rs_hi: f64,
    pub positives_per_object: usize,
    /// Background windows per positive.
    pub neg_ratio: f64,
    /// Share of background windows drawn next to objects.
    pub hard_fraction: f64,
    /// Windows that show at least this fraction of an object whose size
    /// ratio is within `ignore_slack` of the band are left out of training.
    pub ignore_visible: f64,
    pub ignore_slack: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            rs_lo: 0.5,
            rs_hi: 0.7,
            positives_per_object: 1,
            neg_ratio: 3.0,
            hard_fraction: 0.5,
            ignore_visible: 0.85,
            ignore_slack: 1.1,
        }
    }
}

/// Training label of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowLabel {
    /// Fully contains object `i` at a size ratio inside the band.
    Positive(usize),
    Background,
    /// Too close to a positive to be called background; not used.
    Ignore,
}

/// Labels a window footprint `(x0, y0, x1, y1)` against the scene objects.
pub fn label_window(fp: (f64, f64, f64, f64), objects: &[GroundTruthBox], cfg: &SampleConfig) -> WindowLabel {
    let (x0, y0, x1, y1) = fp;
    let side = 0.5 * ((x1 - x0) + (y1 - y0));
    let mut positive = None;
    for (i, o) in objects.iter().enumerate() {
        let b = &o.bbox;
        let rs = b.side() / side;
        let contained = b.x1 >= x0 && b.y1 >= y0 && b.x2 <= x1 && b.y2 <= y1;
        if contained && rs >= cfg.rs_lo && rs <= cfg.rs_hi {
            if positive.is_some() {
                return WindowLabel::Ignore;
            }
            positive = Some(i);
            continue;
        }
        let iw = (b.x2.min(x1) - b.x1.max(x0)).max(0.0);
        let ih = (b.y2.min(y1) - b.y1.max(y0)).max(0.0);
        let visible = iw * ih / b.area();
        if visible >= cfg.ignore_visible && rs >= cfg.rs_lo / cfg.ignore_slack && rs <= cfg.rs_hi * cfg.ignore_slack {
            return WindowLabel::Ignore;
        }
    }
    match positive {
        Some(i) => WindowLabel::Positive(i),
        None => WindowLabel::Background,
    }
}

fn level_window(g: &LevelGeometry, lx: usize, ly: usize, ws: usize) -> Window {
    let half = ws as f64 / 2.0;
    Window {
        x2d: (lx as f64 + half) * g.scale_x,
        y2d: (ly as f64 + half) * g.scale_y,
        d2d: ws as f64 * 0.5 * (g.scale_x + g.scale_y),
        level: g.level,
        lx,
        ly,
        scale_x: g.scale_x,
        scale_y: g.scale_y,
    }
}

/// Integer window origins along one axis that keep `[lo, hi]` (level
/// pixels) inside a window of side `ws` on a level of length `len`.
fn containing_origins(lo: f64, hi: f64, ws: usize, len: usize) -> Option<(usize, usize)> {
    let first = (hi - ws as f64).ceil().max(0.0) as usize;
    let last = (lo.floor().max(0.0) as usize).min(len.checked_sub(ws)?);
    (first <= last).then_some((first, last))
}

fn sample_at(pyr: &[PyramidLevel], w: &Window, ws: usize, label: usize, target: Option<&BBox>) -> Result<TrainSample> {
    let patch = pyr[w.level].image.crop(w.lx, w.ly, ws)?;
    Ok(TrainSample {
        patch,
        label,
        gt_loc: target.map(|b| encode_target(b, w, ws)),
    })
}

/// Cuts labelled training windows out of one scene: positives fully holding
/// an object at an in-band size ratio, then background windows (part of them
/// next to objects) at `neg_ratio` per positive.
pub fn extract_samples(
    scene: &Scene,
    wcfg: &WindowConfig,
    scfg: &SampleConfig,
    rng: &mut impl Rng,
) -> Result<Vec<TrainSample>> {
    let ws = wcfg.ws;
    let pyr = build_pyramid(&scene.image, ws, wcfg.pyramid_ratio)?;
    let mut out = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        let b = &o.bbox;
        let levels: Vec<&PyramidLevel> = pyr
            .iter()
            .filter(|l| {
                let rs = b.side() / (ws as f64 * 0.5 * (l.geometry.scale_x + l.geometry.scale_y));
                rs >= scfg.rs_lo && rs <= scfg.rs_hi
            })
            .collect();
        if levels.is_empty() {
            continue;
        }
        let mut made = 0;
        for _ in 0..20 * scfg.positives_per_object {
            if made == scfg.positives_per_object {
                break;
            }
            let g = &levels[rng.random_range(0..levels.len())].geometry;
            let xs = containing_origins(b.x1 / g.scale_x, b.x2 / g.scale_x, ws, g.width);
            let ys = containing_origins(b.y1 / g.scale_y, b.y2 / g.scale_y, ws, g.height);
            let (Some(xs), Some(ys)) = (xs, ys) else { continue };
            let w = level_window(g, rng.random_range(xs.0..=xs.1), rng.random_range(ys.0..=ys.1), ws);
            if label_window(w.footprint(ws), &scene.objects, scfg) == WindowLabel::Positive(i) {
                out.push(sample_at(&pyr, &w, ws, o.label, Some(b))?);
                made += 1;
            }
        }
    }
    let wanted = (scfg.neg_ratio * out.len().max(1) as f64).round() as usize;
    let hard = if scene.objects.is_empty() { 0 } else { (scfg.hard_fraction * wanted as f64).round() as usize };
    let mut negatives = 0;
    for attempt in 0..50 * wanted {
        if negatives == wanted {
            break;
        }
        let near = negatives < hard && attempt < 25 * wanted;
        let (g, (lx, ly)) = if near {
            // a window overlapping an object, at a level where its size ratio
            // is not far from the band
            let b = &scene.objects[rng.random_range(0..scene.objects.len())].bbox;
            let levels: Vec<&LevelGeometry> = pyr
                .iter()
                .map(|l| &l.geometry)
                .filter(|g| {
                    let rs = b.side() / (ws as f64 * 0.5 * (g.scale_x + g.scale_y));
                    rs >= 0.5 * scfg.rs_lo && rs <= 2.0 * scfg.rs_hi
                })
                .collect();
            if levels.is_empty() {
                continue;
            }
            let g = levels[rng.random_range(0..levels.len())];
            let around = |lo: f64, hi: f64, s: f64, len: usize, rng: &mut dyn rand::RngCore| {
                let from = ((lo / s) - ws as f64).max(0.0) as usize;
                let to = ((hi / s).max(0.0) as usize).min(len - ws);
                if from >= to {
                    to
                } else {
                    rng.random_range(from..=to)
                }
            };
            (g, (around(b.x1, b.x2, g.scale_x, g.width, rng), around(b.y1, b.y2, g.scale_y, g.height, rng)))
        } else {
            let g = &pyr[rng.random_range(0..pyr.len())].geometry;
            (g, (rng.random_range(0..=g.width - ws), rng.random_range(0..=g.height - ws)))
        };
        let w = level_window(g, lx, ly, ws);
        if label_window(w.footprint(ws), &scene.objects, scfg) == WindowLabel::Background {
            out.push(sample_at(&pyr, &w, ws, 0, None)?);
            negatives += 1;
        }
    }
    Ok(out)
}

/// Samples of many scenes, each with its own deterministic stream.
pub fn extract_all(scenes: &[Scene], wcfg: &WindowConfig, scfg: &SampleConfig, seed: u64) -> Result<Vec<TrainSample>> {
    let mut out = Vec::new();
    for (i, s) in scenes.iter().enumerate() {
        let mut rng = scene_rng(seed ^ 0x5a3c_1e0f_77aa_0102, i);
        out.extend(extract_samples(s, wcfg, scfg, &mut rng)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Image path relative to the manifest.
    pub image: String,
    pub boxes: Vec<GroundTruthBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

pub fn sidecar_text(objects: &[GroundTruthBox]) -> String {
    objects
        .iter()
        .map(|o| format!("{} {} {} {} {}\n", o.label, o.bbox.x1, o.bbox.y1, o.bbox.x2, o.bbox.y2))
        .collect()
}

pub fn parse_sidecar(text: &str) -> Result<Vec<GroundTruthBox>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            if f.len() != 5 {
                return Err(Error::data(format!("annotation line {l:?} needs 5 fields")));
            }
            let label = f[0].parse().map_err(|_| Error::data(format!("bad label in {l:?}")))?;
            let v: Vec<f64> = f[1..]
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| Error::data(format!("bad coordinate in {l:?}"))))
                .collect::<Result<_>>()?;
            Ok(GroundTruthBox {
                bbox: BBox::new(v[0], v[1], v[2], v[3]),
                label,
            })
        })
        .collect()
}

impl DatasetManifest {
    pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
        dir.join(format!("{split}.json"))
    }

    /// Writes images, annotation sidecars and the manifest into `dir`.
    pub fn write(dir: &Path, split: &str, seed: u64, scenes: &[Scene]) -> Result<DatasetManifest> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(scenes.len());
        for (i, s) in scenes.iter().enumerate() {
            let name = format!("{split}_{i:05}");
            s.image.write_ppm(&dir.join(format!("{name}.ppm")))?;
            fs::write(dir.join(format!("{name}.txt")), sidecar_text(&s.objects))?;
            entries.push(ManifestEntry {
                image: format!("{name}.ppm"),
                boxes: s.objects.clone(),
            });
        }
        let m = DatasetManifest {
            split: split.to_string(),
            seed,
            entries,
        };
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::data(e.to_string()))?;
        fs::write(Self::manifest_path(dir, split), json)?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }

    /// Loads every image, checking that it parses and holds its boxes.
    pub fn load_scenes(&self, dir: &Path) -> Result<Vec<Scene>> {
        self.entries
            .iter()
            .map(|e| {
                let image = Image::read_ppm(&dir.join(&e.image))
                    .map_err(|err| Error::data(format!("{}: {err}", e.image)))?;
                for b in &e.boxes {
                    let bb = &b.bbox;
                    if !bb.is_valid() || bb.x1 < 0.0 || bb.y1 < 0.0 || bb.x2 > image.width as f64 || bb.y2 > image.height as f64 {
                        return Err(Error::data(format!("{}: box {bb:?} outside the image", e.image)));
                    }
                }
                Ok(Scene {
                    image,
                    objects: e.boxes.clone(),
                })
            })
            .collect()
    }
}
