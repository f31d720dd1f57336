//! Detection pipeline: window outputs to image boxes, mean-shift and NMS
//! refinement, and matching-based evaluation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::compressed::{CompressedModel, OpCounter};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::windows::{build_pyramid, final_windows, CameraModel, SceneRanges, Window, WindowConfig};

/// Axis-aligned box in source-image pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2 && [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Side of the bounding square.
    pub fn side(&self) -> f64 {
        self.width().max(self.height())
    }

    fn key(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; 0 for disjoint or empty boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub label: usize,
    pub score: f64,
    pub source_window: Window,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: BBox,
    pub label: usize,
}

/// Maps `(dx1, dx2, dy1, dy2)`, given in window units (0 at the window's
/// min edge, 1 at its max edge), to source pixels. `None` for degenerate boxes.
pub fn decode_outputs(loc: &[f64; 4], w: &Window, ws: usize) -> Option<BBox> {
    let (x0, y0, x1, y1) = w.footprint(ws);
    let (sw, sh) = (x1 - x0, y1 - y0);
    let b = BBox::new(x0 + loc[0] * sw, y0 + loc[2] * sh, x0 + loc[1] * sw, y0 + loc[3] * sh);
    b.is_valid().then_some(b)
}

/// Inverse of [`decode_outputs`]: box edges in window units.
pub fn encode_target(b: &BBox, w: &Window, ws: usize) -> [f64; 4] {
    let (x0, y0, x1, y1) = w.footprint(ws);
    let (sw, sh) = (x1 - x0, y1 - y0);
    [(b.x1 - x0) / sw, (b.x2 - x0) / sw, (b.y1 - y0) / sh, (b.y2 - y0) / sh]
}

/// Ranking used by NMS and matching: score, then area, then box coordinates.
fn rank(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.bbox.area().total_cmp(&a.bbox.area()))
        .then_with(|| {
            a.bbox
                .key()
                .iter()
                .zip(b.bbox.key().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then(a.label.cmp(&b.label))
}

/// Greedy per-label suppression of boxes overlapping a better one by more
/// than `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<Detection> = Vec::new();
    for d in sorted {
        if kept.iter().all(|k| k.label != d.label || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

type Point = [f64; 4];

fn to_point(b: &BBox) -> Point {
    let (cx, cy) = b.center();
    [cx, cy, b.width().ln(), b.height().ln()]
}

fn from_point(p: &Point) -> BBox {
    let (w, h) = (p[2].exp(), p[3].exp());
    BBox::new(p[0] - w / 2.0, p[1] - h / 2.0, p[0] + w / 2.0, p[1] + h / 2.0)
}

/// Kernel distance of `q` seen from `p`: the largest per-coordinate offset
/// in bandwidth units, position scaled by `frac * mean size at p` and log
/// sizes by `frac`. The flat kernel covers distances up to 1.
fn kernel_dist(p: &Point, q: &Point, frac: f64) -> f64 {
    let size = 0.5 * (p[2].exp() + p[3].exp());
    let pb = frac * size;
    [(q[0] - p[0]) / pb, (q[1] - p[1]) / pb, (q[2] - p[2]) / frac, (q[3] - p[3]) / frac]
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
}

fn weighted_mean(points: &[Point], weights: &[f64], members: &[usize]) -> Point {
    let mut acc = [0.0; 4];
    let mut total = 0.0;
    for &i in members {
        let w = weights[i].max(1e-12);
        for k in 0..4 {
            acc[k] += w * points[i][k];
        }
        total += w;
    }
    acc.map(|v| v / total)
}

fn shift_to_mode(start: Point, points: &[Point], weights: &[f64], frac: f64) -> Point {
    let mut mode = start;
    for _ in 0..200 {
        let members: Vec<usize> = (0..points.len()).filter(|&j| kernel_dist(&mode, &points[j], frac) <= 1.0).collect();
        if members.is_empty() {
            break;
        }
        let next = weighted_mean(points, weights, &members);
        let moved = kernel_dist(&mode, &next, frac);
        mode = next;
        if moved < 1e-12 {
            break;
        }
    }
    mode
}

struct Cluster {
    members: Vec<usize>,
    center: Point,
}

/// Flat-kernel mean shift in `(cx, cy, ln w, ln h)`, per label. Clusters whose
/// centres fall inside each other's kernel are merged until none do, so the
/// output is a fixed point of the refinement. Each cluster yields the
/// score-weighted mean box with the best member score; single-member clusters
/// return the member unchanged.
pub fn mean_shift_refine(dets: &[Detection], bandwidth_frac: f64) -> Vec<Detection> {
    let mut labels: Vec<usize> = dets.iter().map(|d| d.label).collect();
    labels.sort_unstable();
    labels.dedup();
    let mut out = Vec::new();
    for label in labels {
        let group: Vec<&Detection> = dets.iter().filter(|d| d.label == label).collect();
        let points: Vec<Point> = group.iter().map(|d| to_point(&d.bbox)).collect();
        let weights: Vec<f64> = group.iter().map(|d| d.score).collect();

        let mut clusters: Vec<Cluster> = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let mode = shift_to_mode(*p, &points, &weights, bandwidth_frac);
            match clusters.iter_mut().find(|c| kernel_dist(&c.center, &mode, bandwidth_frac) < 1e-6) {
                Some(c) => c.members.push(i),
                None => clusters.push(Cluster {
                    members: vec![i],
                    center: mode,
                }),
            }
        }
        for c in clusters.iter_mut() {
            c.center = weighted_mean(&points, &weights, &c.members);
        }
        'merge: loop {
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let (pa, pb) = (clusters[a].center, clusters[b].center);
                    if kernel_dist(&pa, &pb, bandwidth_frac) <= 1.0 || kernel_dist(&pb, &pa, bandwidth_frac) <= 1.0 {
                        let gone = clusters.remove(b);
                        clusters[a].members.extend(gone.members);
                        clusters[a].members.sort_unstable();
                        clusters[a].center = weighted_mean(&points, &weights, &clusters[a].members);
                        continue 'merge;
                    }
                }
            }
            break;
        }
        for c in clusters {
            let best = *c
                .members
                .iter()
                .max_by(|&&a, &&b| weights[a].total_cmp(&weights[b]).then(b.cmp(&a)))
                .expect("clusters are non-empty");
            if c.members.len() == 1 {
                out.push(*group[best]);
            } else {
                out.push(Detection {
                    bbox: from_point(&c.center),
                    label,
                    score: weights[best],
                    source_window: group[best].source_window,
                });
            }
        }
    }
    out.sort_by(rank);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Minimum class probability for a window to count as a detection.
    pub score_threshold: f64,
    pub bandwidth_frac: f64,
    pub nms_iou: f64,
    /// IoU needed for a detection to match a ground truth.
    pub eval_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            score_threshold: 0.5,
            bandwidth_frac: 0.3,
            nms_iou: 0.7,
            eval_iou: 0.7,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::config("score threshold outside [0, 1]"));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou <= 1.0) || !(self.eval_iou > 0.0 && self.eval_iou <= 1.0) {
            return Err(Error::config("IoU thresholds must lie in (0, 1]"));
        }
        if !(self.bandwidth_frac > 0.0) {
            return Err(Error::config("mean-shift bandwidth must be positive"));
        }
        Ok(())
    }
}

/// Per-image pipeline diagnostics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetectStats {
    pub sliding_windows: usize,
    pub windows: usize,
    /// Windows above threshold before refinement.
    pub raw: usize,
    /// Positive windows whose box decoded to nothing.
    pub degenerate: usize,
    pub ops: OpCounter,
}

/// Runs the model over the final windows of `image` and refines the hits.
pub fn detect_image(
    image: &Image,
    model: &CompressedModel,
    geometry: Option<(&CameraModel, &SceneRanges)>,
    wcfg: &WindowConfig,
    dcfg: &DetectConfig,
) -> Result<(Vec<Detection>, DetectStats)> {
    dcfg.validate()?;
    let (scored, mut stats) = score_windows(image, model, geometry, wcfg, dcfg.score_threshold)?;
    let dets = refine_detections(&scored, dcfg);
    stats.raw = scored.iter().filter(|d| d.score >= dcfg.score_threshold).count();
    Ok((dets, stats))
}

/// Object windows scoring at least `min_score`, decoded to image boxes and
/// not yet refined. `stats.raw` is left at zero.
pub fn score_windows(
    image: &Image,
    model: &CompressedModel,
    geometry: Option<(&CameraModel, &SceneRanges)>,
    wcfg: &WindowConfig,
    min_score: f64,
) -> Result<(Vec<Detection>, DetectStats)> {
    if model.spec().arch.input_size != wcfg.ws || model.spec().arch.in_channels != 3 {
        return Err(Error::config(format!(
            "model input {} does not match window size {}",
            model.spec().arch.input_size,
            wcfg.ws
        )));
    }
    let fw = final_windows(image.width, image.height, geometry, wcfg)?;
    let mut stats = DetectStats {
        sliding_windows: fw.sliding,
        windows: fw.windows.len(),
        ..Default::default()
    };
    if fw.windows.is_empty() {
        return Ok((Vec::new(), stats));
    }
    let pyramid = build_pyramid(image, wcfg.ws, wcfg.pyramid_ratio)?;
    let mut scored = Vec::new();
    for w in &fw.windows {
        let patch = pyramid[w.level].image.crop(w.lx, w.ly, wcfg.ws)?;
        let out = model.infer(&patch.to_tensor(), &mut stats.ops)?;
        let (label, score) = out.decision();
        if label == 0 || score < min_score {
            continue;
        }
        match decode_outputs(&out.loc, w, wcfg.ws) {
            Some(bbox) => scored.push(Detection {
                bbox,
                label,
                score,
                source_window: *w,
            }),
            None => stats.degenerate += 1,
        }
    }
    Ok((scored, stats))
}

/// Threshold, mean shift and NMS over scored windows.
pub fn refine_detections(scored: &[Detection], dcfg: &DetectConfig) -> Vec<Detection> {
    let kept: Vec<Detection> = scored
        .iter()
        .filter(|d| d.score >= dcfg.score_threshold)
        .cloned()
        .collect();
    nms(&mean_shift_refine(&kept, dcfg.bandwidth_frac), dcfg.nms_iou)
}

pub fn detections_csv(dets: &[Detection]) -> String {
    let mut out = String::from("label,score,x1,y1,x2,y2\n");
    for d in dets {
        out.push_str(&format!(
            "{},{:.6},{:.2},{:.2},{:.2},{:.2}\n",
            d.label, d.score, d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2
        ));
    }
    out
}

/// Detection and ground truth of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub truth: Vec<GroundTruthBox>,
}

/// Precision and recall of the objects in one distance band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistanceBucket {
    pub z_min: f64,
    pub z_max: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl DistanceBucket {
    /// 1 when the bucket holds no detections.
    pub fn precision(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp)
    }

    /// 1 when the bucket holds no ground truth.
    pub fn recall(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }
}

fn ratio_or_one(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Samples the error rate is normalized by.
    pub n: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(FP + FN) / N`.
    pub er_cla: f64,
    /// Mean squared edge error per coordinate over matched pairs, in units of
    /// the detection's source window.
    pub er_loc: f64,
    pub buckets: Vec<DistanceBucket>,
}

impl EvalReport {
    pub fn precision(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio_or_one(self.tp, self.tp + self.fn_)
    }
}

/// Distance bucketing for [`evaluate`].
#[derive(Clone, Debug)]
pub struct DistanceBands<'a> {
    pub camera: &'a CameraModel,
    pub d3d: f64,
    /// Ascending bucket edges in world depth.
    pub edges: Vec<f64>,
}

impl DistanceBands<'_> {
    fn bucket_of(&self, b: &BBox) -> Option<usize> {
        let (cx, cy) = b.center();
        let (_, _, z) = self.camera.implied_3d(cx, cy, b.side(), self.d3d);
        self.edges.windows(2).position(|e| z >= e[0] && z < e[1])
    }
}

/// Greedy one-to-one matching per image: detections in descending score
/// order take the unmatched same-label ground truth of highest IoU, if that
/// IoU reaches `iou_thresh`. `n` normalizes the classification error.
pub fn evaluate(
    results: &[ImageResult],
    n: usize,
    iou_thresh: f64,
    ws: usize,
    bands: Option<&DistanceBands<'_>>,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(Error::data("evaluation needs at least one sample"));
    }
    let mut report = EvalReport {
        n,
        tp: 0,
        fp: 0,
        fn_: 0,
        er_cla: 0.0,
        er_loc: 0.0,
        buckets: bands
            .map(|b| {
                b.edges
                    .windows(2)
                    .map(|e| DistanceBucket {
                        z_min: e[0],
                        z_max: e[1],
                        tp: 0,
                        fp: 0,
                        fn_: 0,
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    let mut loc_sum = 0.0;
    for r in results {
        let mut dets = r.detections.clone();
        dets.sort_by(rank);
        let mut taken = vec![false; r.truth.len()];
        for d in &dets {
            let best = r
                .truth
                .iter()
                .enumerate()
                .filter(|(i, g)| !taken[*i] && g.label == d.label)
                .map(|(i, g)| (i, iou(&d.bbox, &g.bbox)))
                .filter(|(_, v)| *v >= iou_thresh)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            let bucket = bands.and_then(|b| b.bucket_of(&d.bbox));
            match best {
                Some((i, _)) => {
                    taken[i] = true;
                    report.tp += 1;
                    let pred = encode_target(&d.bbox, &d.source_window, ws);
                    let truth = encode_target(&r.truth[i].bbox, &d.source_window, ws);
                    loc_sum += pred.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                    if let Some(k) = bands.and_then(|b| b.bucket_of(&r.truth[i].bbox)) {
                        report.buckets[k].tp += 1;
                    }
                }
                None => {
                    report.fp += 1;
                    if let Some(k) = bucket {
                        report.buckets[k].fp += 1;
                    }
                }
            }
        }
        for (i, g) in r.truth.iter().enumerate() {
            if !taken[i] {
                report.fn_ += 1;
                if let Some(k) = bands.and_then(|b| b.bucket_of(&g.bbox)) {
                    report.buckets[k].fn_ += 1;
                }
            }
        }
    }
    report.er_cla = (report.fp + report.fn_) as f64 / n as f64;
    if report.tp > 0 {
        report.er_loc = loc_sum / (4 * report.tp) as f64;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::windows::{pyramid_geometry, sliding_windows};
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Strategy};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(lx: usize, ly: usize, scale: f64) -> Window {
        Window {
            x2d: (lx as f64 + 24.0) * scale,
            y2d: (ly as f64 + 24.0) * scale,
            d2d: 48.0 * scale,
            level: 0,
            lx,
            ly,
            scale_x: scale,
            scale_y: scale,
        }
    }

    fn det(x1: f64, y1: f64, x2: f64, y2: f64, label: usize, score: f64) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            label,
            score,
            source_window: window(0, 0, 1.0),
        }
    }

    #[test]
    fn decode_examples() {
        let w = window(0, 0, 1.0);
        assert_eq!(decode_outputs(&[0.0, 1.0, 0.0, 1.0], &w, 48), Some(BBox::new(0.0, 0.0, 48.0, 48.0)));
        assert_eq!(decode_outputs(&[0.25, 0.75, 0.25, 0.75], &w, 48), Some(BBox::new(12.0, 12.0, 36.0, 36.0)));
        let w2 = window(0, 0, 2.0);
        assert_eq!(decode_outputs(&[0.25, 0.75, 0.25, 0.75], &w2, 48), Some(BBox::new(24.0, 24.0, 72.0, 72.0)));
        assert_eq!(decode_outputs(&[0.6, 0.4, 0.0, 1.0], &w, 48), None);
        assert_eq!(decode_outputs(&[0.0, 1.0, 0.5, 0.5], &w, 48), None);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nms_examples() {
        let one = vec![det(0.0, 0.0, 10.0, 10.0, 1, 0.9)];
        assert_eq!(nms(&one, 0.7), one);
        // IoU of (0,0,10,10) and (0,0,10,8) is 0.8
        let pair = vec![det(0.0, 0.0, 10.0, 8.0, 1, 0.8), det(0.0, 0.0, 10.0, 10.0, 1, 0.9)];
        let kept = nms(&pair, 0.7);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        // IoU 0.5
        let apart = vec![det(0.0, 0.0, 10.0, 10.0, 1, 0.9), det(0.0, 0.0, 10.0, 5.0, 1, 0.8)];
        assert_eq!(nms(&apart, 0.7).len(), 2);
        let other_label = vec![det(0.0, 0.0, 10.0, 10.0, 1, 0.9), det(0.0, 0.0, 10.0, 10.0, 2, 0.8)];
        assert_eq!(nms(&other_label, 0.7).len(), 2);
    }

    #[test]
    fn mean_shift_examples() {
        assert!(mean_shift_refine(&[], 0.3).is_empty());
        let one = det(3.0, 4.0, 40.0, 50.0, 2, 0.7);
        assert_eq!(mean_shift_refine(&[one], 0.3), vec![one]);
        let dets = vec![
            det(0.0, 0.0, 40.0, 40.0, 1, 0.9),
            det(2.0, 0.0, 42.0, 40.0, 1, 0.6),
            det(200.0, 200.0, 240.0, 240.0, 1, 0.8),
            det(201.0, 201.0, 241.0, 241.0, 1, 0.8),
        ];
        let out = mean_shift_refine(&dets, 0.3);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].score, 0.9);
        let (cx, _) = out[0].bbox.center();
        assert!((cx - (20.0 * 0.9 + 22.0 * 0.6) / 1.5).abs() < 1e-9);
        let (cx, cy) = out[1].bbox.center();
        assert!((cx - 220.5).abs() < 1e-9 && (cy - 220.5).abs() < 1e-9);
        assert!((out[1].bbox.width() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn evaluation_examples() {
        let gt = GroundTruthBox {
            bbox: BBox::new(0.0, 0.0, 40.0, 40.0),
            label: 1,
        };
        let perfect = ImageResult {
            detections: vec![det(0.0, 0.0, 40.0, 40.0, 1, 0.9)],
            truth: vec![gt],
        };
        let r = evaluate(&[perfect], 10, 0.7, 48, None).unwrap();
        assert_eq!((r.fp, r.fn_, r.er_cla, r.er_loc), (0, 0, 0.0, 0.0));
        let empty = ImageResult {
            detections: vec![],
            truth: vec![gt, gt],
        };
        let r = evaluate(&[empty], 8, 0.7, 48, None).unwrap();
        assert_eq!(r.er_cla, 2.0 / 8.0);
        // IoU 0.9 and IoU ~0.1
        let mixed = ImageResult {
            detections: vec![det(0.0, 0.0, 40.0, 36.0, 1, 0.5), det(30.0, 30.0, 70.0, 70.0, 1, 0.9)],
            truth: vec![gt],
        };
        let r = evaluate(&[mixed], 5, 0.7, 48, None).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (1, 1, 0));
        let wrong_label = ImageResult {
            detections: vec![det(0.0, 0.0, 40.0, 40.0, 2, 0.9)],
            truth: vec![gt],
        };
        let r = evaluate(&[wrong_label], 5, 0.7, 48, None).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (0, 1, 1));
        assert!(evaluate(&[], 0, 0.7, 48, None).is_err());
    }

    #[test]
    fn localization_error_in_window_units() {
        let gt = GroundTruthBox {
            bbox: BBox::new(2.4, 2.4, 45.6, 45.6),
            label: 1,
        };
        let r = ImageResult {
            detections: vec![det(0.0, 0.0, 48.0, 48.0, 1, 0.9)],
            truth: vec![gt],
        };
        let rep = evaluate(&[r], 1, 0.7, 48, None).unwrap();
        assert!((rep.er_loc - 0.0025).abs() < 1e-12);
    }

    #[test]
    fn distance_buckets() {
        let cam = CameraModel::new(800.0, 800.0, 512.0, 384.0, 0.0, 0.0, 0.0).unwrap();
        let bands = DistanceBands {
            camera: &cam,
            d3d: 2.0,
            edges: vec![0.0, 25.0, 1e9],
        };
        // side 80 at the principal point sits at z = 20; side 40 at z = 40
        let near = GroundTruthBox {
            bbox: BBox::new(472.0, 344.0, 552.0, 424.0),
            label: 1,
        };
        let far = GroundTruthBox {
            bbox: BBox::new(100.0, 100.0, 140.0, 140.0),
            label: 1,
        };
        let r = ImageResult {
            detections: vec![Detection {
                bbox: near.bbox,
                label: 1,
                score: 0.9,
                source_window: window(10, 10, 2.0),
            }],
            truth: vec![near, far],
        };
        let rep = evaluate(&[r], 4, 0.7, 48, Some(&bands)).unwrap();
        assert_eq!(rep.buckets[0].tp, 1);
        assert_eq!(rep.buckets[1].fn_, 1);
        assert_eq!(rep.buckets[0].recall(), 1.0);
        assert_eq!(rep.buckets[1].recall(), 0.0);
    }

    #[test]
    fn target_encoding_round_trip() {
        let levels = pyramid_geometry(300, 200, 48, 1.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for l in &levels {
            for w in sliding_windows(l, 48, 0.3) {
                let (x0, y0, x1, y1) = w.footprint(48);
                let b = BBox::new(
                    rng.random_range(x0..x0 + 10.0),
                    rng.random_range(y0..y0 + 10.0),
                    rng.random_range(x1 - 10.0..x1),
                    rng.random_range(y1 - 10.0..y1),
                );
                let back = decode_outputs(&encode_target(&b, &w, 48), &w, 48).unwrap();
                for (a, c) in back.key().iter().zip(b.key().iter()) {
                    assert!((a - c).abs() < 1e-6);
                }
            }
        }
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        prop::collection::vec(
            (0.0f64..200.0, 0.0f64..200.0, 10.0f64..60.0, 10.0f64..60.0, 1usize..3, 0.5f64..1.0),
            0..25,
        )
        .prop_map(|v| v.into_iter().map(|(x, y, w, h, l, s)| det(x, y, x + w, y + h, l, s)).collect())
    }

    proptest! {
        #[test]
        fn nms_leaves_an_antichain(dets in arb_dets(), t in 0.1f64..0.9) {
            let kept = nms(&dets, t);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.label != b.label || iou(&a.bbox, &b.bbox) <= t);
                }
            }
        }

        #[test]
        fn mean_shift_is_a_fixed_point(dets in arb_dets()) {
            let once = mean_shift_refine(&dets, 0.3);
            let twice = mean_shift_refine(&once, 0.3);
            prop_assert_eq!(once.len(), twice.len());
            for (a, b) in once.iter().zip(&twice) {
                for (x, y) in a.bbox.key().iter().zip(b.bbox.key().iter()) {
                    prop_assert!((x - y).abs() <= 1e-9);
                }
                prop_assert_eq!(a.label, b.label);
                prop_assert_eq!(a.score, b.score);
            }
        }

        #[test]
        fn evaluation_ignores_detection_order(dets in arb_dets(), seed in 0u64..1000) {
            let truth: Vec<GroundTruthBox> = dets.iter().step_by(2).map(|d| GroundTruthBox {
                bbox: BBox::new(d.bbox.x1 + 1.0, d.bbox.y1, d.bbox.x2 + 1.0, d.bbox.y2),
                label: d.label,
            }).collect();
            let mut shuffled = dets.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            let a = evaluate(&[ImageResult { detections: dets, truth: truth.clone() }], 50, 0.7, 48, None).unwrap();
            let b = evaluate(&[ImageResult { detections: shuffled, truth }], 50, 0.7, 48, None).unwrap();
            prop_assert_eq!((a.tp, a.fp, a.fn_), (b.tp, b.fp, b.fn_));
            prop_assert!((a.er_loc - b.er_loc).abs() < 1e-12);
        }
    }
}
