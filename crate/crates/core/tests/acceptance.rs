//! End-to-end acceptance checks. Runs as a plain binary so every check prints
//! its own PASS/FAIL line; the process fails if any check does.

use std::time::Instant;

use ghaar::compressed::{
    file_size, haar_conv_step, CompressedModel, KernelRecord, OpCounter, StorageMode, StorageReport, HEADER_BYTES,
    RECORD_BYTES,
};
use ghaar::haar_space::{enumerate_space, nearest_filter, select_top_filters, usage_counts, FilterBank, SignPattern};
use ghaar::nn::{ArchConfig, ModelParams, NetworkSpec, Tensor};
use ghaar::pipeline::{DataSplit, PipelineConfig};
use ghaar::train::{fit, haar_regularizer, project_params, train_step, window_metrics, Constraint, TrainConfig};
use ghaar::windows::{
    all_windows, coverage_verify, inside_boundary_planes, perspective_filter, CameraModel, SceneRanges, WindowConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_vec(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Every +-1 vector of length `n`, sign of the first cell included.
fn all_sign_vectors(n: usize) -> Vec<Vec<f64>> {
    (0..1u32 << n)
        .map(|bits| (0..n).map(|i| if bits >> i & 1 == 1 { -1.0 } else { 1.0 }).collect())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimum over all sign vectors of `min_lambda |w - lambda s|^2`, with the
/// minimizing vector flipped so its first cell is +1.
fn brute_nearest(w: &[f64]) -> (f64, Vec<f64>) {
    let n = w.len() as f64;
    let mut best = (f64::INFINITY, Vec::new());
    for s in all_sign_vectors(w.len()) {
        let lambda = dot(w, &s) / n;
        let r: f64 = w.iter().zip(&s).map(|(a, b)| (a - lambda * b).powi(2)).sum();
        if r < best.0 {
            best = (r, s);
        }
    }
    if best.1[0] < 0.0 {
        best.1.iter_mut().for_each(|v| *v = -*v);
    }
    best
}

fn small_spec() -> NetworkSpec {
    NetworkSpec::new(ArchConfig {
        trunk: [4, 6, 8, 8],
        head: [8, 8, 4],
        ..ArchConfig::default()
    })
    .unwrap()
}

/// Random weights projected onto the filters they use most.
fn projected_model(spec: &NetworkSpec, nr: usize, seed: u64) -> (ModelParams, CompressedModel) {
    let mut params = ModelParams::init(spec, seed);
    let full = enumerate_space(3).unwrap();
    let kernels: Vec<&[f64]> = params
        .layers()
        .iter()
        .zip(spec.convs())
        .filter(|(_, c)| c.constrained())
        .flat_map(|(l, c)| l.weights.chunks_exact(c.kernel_len()))
        .collect();
    let counts = usage_counts(kernels, &full).unwrap();
    let space = select_top_filters(3, &counts, nr).unwrap();
    project_params(spec, &mut params, &space).unwrap();
    let model = CompressedModel::from_params(spec, &params, &space).unwrap();
    (params, model)
}

fn random_window(size: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..3 * size * size).map(|_| r.random_range(0.0..1.0)).collect();
    Tensor::from_vec(3, size, size, data).unwrap()
}

fn one_multiply_per_step() -> Check {
    let start = Instant::now();
    let spec = small_spec();
    let (_, model) = projected_model(&spec, 32, 1);
    let x = random_window(48, 2);
    let mut fast = OpCounter::new();
    model.infer(&x, &mut fast).map_err(err)?;
    let mut dense = OpCounter::new();
    model.infer_dense(&x, &mut dense).map_err(err)?;
    let mut checked = 0;
    for c in spec.convs().into_iter().filter(|c| c.constrained()) {
        // same-padded 3x3 convolutions: trunk layers halve the side after each conv
        let side = match c.name.strip_prefix("conv") {
            Some(i) => 48 >> (i.parse::<usize>().map_err(err)? - 1),
            None => spec.feature_size(),
        };
        let steps = (side * side * c.out_channels * c.in_channels) as u64;
        let f = fast.layer(&c.name).ok_or_else(|| format!("no counter for {}", c.name))?;
        let d = dense.layer(&c.name).ok_or_else(|| format!("no counter for {}", c.name))?;
        ensure(f.steps == steps && d.steps == steps, || {
            format!("{}: {} / {} steps, expected {steps}", c.name, f.steps, d.steps)
        })?;
        ensure(f.multiplies == steps, || format!("{}: {} multiplies fast", c.name, f.multiplies))?;
        ensure(d.multiplies == 9 * steps, || format!("{}: {} multiplies dense", c.name, d.multiplies))?;
        checked += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{checked} constrained layers, 1 vs 9 multiplies per step, {secs:.3}s"))
}

fn five_byte_records() -> Check {
    let mut r = rng(3);
    for _ in 0..100 {
        let rec = KernelRecord {
            filter_ref: r.random_range(0..=255u8),
            factor: r.random_range(-4.0f32..4.0),
        };
        let bytes = rec.to_bytes();
        ensure(bytes.len() == 5, || format!("record of {} bytes", bytes.len()))?;
        ensure(KernelRecord::from_bytes(bytes) == rec, || format!("{rec:?} does not round-trip"))?;
    }
    let spec = small_spec();
    let nr = 32;
    let (_, model) = projected_model(&spec, nr, 4);
    let bytes = model.encode();
    // magic, version, mode, widths, digest | side, count, indices | layers
    let mut expected = 4 + 1 + 1 + 2 * 10 + 8 + 1 + 2 + 4 * nr;
    for c in spec.convs() {
        expected += if c.kernel_size == 3 {
            5 * c.in_channels * c.out_channels
        } else {
            4 * c.in_channels * c.out_channels * c.kernel_size * c.kernel_size
        };
        expected += 4 * c.out_channels;
    }
    ensure(bytes.len() == expected, || format!("file {} bytes, formula {expected}", bytes.len()))?;
    ensure(file_size(&spec, StorageMode::Haar, nr) == expected, || "library size formula disagrees".into())?;
    ensure(HEADER_BYTES == 34 && RECORD_BYTES == 5, || "layout constants changed".into())?;
    let decoded = CompressedModel::decode(&bytes).map_err(err)?;
    ensure(decoded.encode() == bytes, || "decode/encode is not the identity".into())?;

    let report = StorageReport::for_dims(&[(3, 64), (64, 128), (128, 256)], 3);
    ensure(report.ratio() == 7.2, || format!("3x3 payload ratio {}", report.ratio()))?;
    let constrained = StorageReport::for_spec(&spec, true).constrained_ratio();
    ensure(constrained == 36.0 / 5.0, || format!("network ratio {constrained}"))?;
    Ok(format!("5-byte records, {expected}-byte file matches formula, ratio 7.2"))
}

fn fast_path_fidelity() -> Check {
    let mut r = rng(5);
    let mut worst_step = 0.0f64;
    let mut counter = OpCounter::new();
    for _ in 0..1000 {
        let index = r.random_range(0..256u32);
        let pattern = SignPattern::from_index(3, index).map_err(err)?;
        let patch: Vec<f64> = (0..9).map(|_| r.random_range(-10.0..10.0)).collect();
        let k = r.random_range(-2.0..2.0);
        let fast = haar_conv_step(&pattern, &patch, k, &mut counter).map_err(err)?;
        let dense: f64 = pattern.signs().iter().zip(&patch).map(|(s, x)| k * s * x).sum();
        worst_step = worst_step.max((fast - dense).abs());
    }
    ensure(worst_step <= 1e-5, || format!("conv step differs by {worst_step:e}"))?;

    let spec = small_spec();
    let (_, model) = projected_model(&spec, 64, 6);
    let mut worst_out = 0.0f64;
    for i in 0..100 {
        let x = random_window(48, 100 + i);
        let fast = model.infer(&x, &mut OpCounter::new()).map_err(err)?;
        let dense = model.infer_dense(&x, &mut OpCounter::new()).map_err(err)?;
        for (a, b) in fast.loc.iter().chain(&fast.logits).zip(dense.loc.iter().chain(&dense.logits)) {
            worst_out = worst_out.max((a - b).abs());
        }
    }
    ensure(worst_out <= 1e-4, || format!("network output differs by {worst_out:e}"))?;
    Ok(format!("max step error {worst_step:.1e}, max output error {worst_out:.1e}"))
}

fn projection_matches_brute_force() -> Check {
    let space = enumerate_space(3).map_err(err)?;
    ensure(space.len() == 256, || format!("{} filters", space.len()))?;
    let mut r = rng(7);
    let mut worst_lambda = 0.0f64;
    for i in 0..500 {
        let w = random_vec(&mut r, 9);
        let (res, signs) = brute_nearest(&w);
        let got = nearest_filter(&w, &space).map_err(err)?;
        let pattern = SignPattern::from_index(3, got.index).map_err(err)?;
        ensure(pattern.signs() == signs, || format!("kernel {i}: filter {} is not the brute-force minimum", got.index))?;
        ensure((got.residual - res).abs() <= 1e-9, || format!("kernel {i}: residual {} vs {res}", got.residual))?;
        let lambda = dot(&w, &signs) / 9.0;
        worst_lambda = worst_lambda.max((got.lambda - lambda).abs());
    }
    ensure(worst_lambda <= 1e-9, || format!("scale off by {worst_lambda:e}"))?;
    Ok(format!("500/500 kernels agree, max scale error {worst_lambda:.1e}"))
}

/// `-ln(sum z^(q+1) / sum z^q)` with `z = exp(-residual)`, summed directly.
fn smooth_min(w: &[f64], q: f64) -> f64 {
    let n = w.len() as f64;
    let norm2 = dot(w, w);
    let (mut hi, mut lo) = (0.0, 0.0);
    for s in all_sign_vectors(w.len()).into_iter().filter(|s| s[0] > 0.0) {
        let d = dot(w, &s);
        let z = (-(norm2 - d * d / n)).exp();
        hi += z.powf(q + 1.0);
        lo += z.powf(q);
    }
    -(hi / lo).ln()
}

fn regularizer_gradient() -> Check {
    let space = enumerate_space(3).map_err(err)?;
    let mut r = rng(9);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for q in [1.0, 8.0, 32.0] {
        for _ in 0..100 {
            let w: Vec<f64> = random_vec(&mut r, 9).iter().map(|v| v * 0.5).collect();
            let (value, grad) = haar_regularizer(&w, &space, 1.0, q).map_err(err)?;
            let direct = smooth_min(&w, q);
            ensure((value - direct).abs() <= 1e-9 * (1.0 + direct.abs()), || {
                format!("q {q}: value {value} vs direct sum {direct}")
            })?;
            for i in 0..9 {
                let mut up = w.clone();
                up[i] += h;
                let mut down = w.clone();
                down[i] -= h;
                let num = (haar_regularizer(&up, &space, 1.0, q).map_err(err)?.0
                    - haar_regularizer(&down, &space, 1.0, q).map_err(err)?.0)
                    / (2.0 * h);
                let rel = (grad[i] - num).abs() / grad[i].abs().max(num.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
    }
    ensure(worst <= 1e-4, || format!("max relative gradient error {worst:e}"))?;

    let mut gaps = Vec::new();
    for k in 0..20 {
        let w = random_vec(&mut r, 9);
        let (min_res, _) = brute_nearest(&w);
        let mut prev = f64::INFINITY;
        for q in [1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 256.0, 1024.0, 4096.0] {
            let v = haar_regularizer(&w, &space, 1.0, q).map_err(err)?.0;
            ensure(v >= min_res - 1e-12, || format!("kernel {k}: q {q} value {v} below minimum {min_res}"))?;
            ensure(v <= prev + 1e-12, || format!("kernel {k}: value rose to {v} at q {q}"))?;
            prev = v;
        }
        gaps.push(prev - min_res);
    }
    let worst_gap = gaps.iter().copied().fold(0.0, f64::max);
    ensure(worst_gap < 1e-2, || format!("gap to the minimum residual at q 4096 is {worst_gap}"))?;
    Ok(format!(
        "max relative gradient error {worst:.1e}; monotone descent to the minimum residual (gap {worst_gap:.1e} at q 4096)"
    ))
}

fn tiny_pipeline() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.arch.trunk = [4, 6, 8, 8];
    cfg.arch.head = [8, 8, 4];
    cfg.data.train_images = 12;
    cfg.data.held_out_images = 4;
    cfg.train.pretrain_epochs = 1;
    cfg.train.epochs = 1;
    cfg
}

fn constrained_training_contract() -> Check {
    let cfg = tiny_pipeline();
    let spec = cfg.network_spec().map_err(err)?;
    let train = cfg.scenes(DataSplit::Train).map_err(err)?;
    let held = cfg.scenes(DataSplit::HeldOut).map_err(err)?;
    let data = cfg.dataset(&train, &held).map_err(err)?;

    let (mut params, model) = projected_model(&spec, 32, 11);
    let space = model.space().cloned().ok_or("projected model has no space")?;
    let batch: Vec<_> = data.train.iter().take(16).cloned().collect();
    let config = TrainConfig {
        hflip: false,
        ..cfg.train.clone()
    };
    let mut lr = config.lr;
    let mut losses = Vec::new();
    for step in 0..50 {
        let report = train_step(&spec, &mut params, &batch, Constraint::Projected(&space), &config, &mut lr)
            .map_err(err)?;
        losses.push(report.loss.total);
        for (layer, conv) in params.layers().iter().zip(spec.convs()) {
            if !conv.constrained() {
                continue;
            }
            let codes = layer.haar.as_ref().ok_or_else(|| format!("{} lost its codes", conv.name))?;
            for (kernel, code) in layer.weights.chunks_exact(9).zip(codes) {
                ensure(space.position_of(code.index).is_some(), || {
                    format!("step {step}: filter {} outside the reduced space", code.index)
                })?;
                let signs = SignPattern::from_index(3, code.index).map_err(err)?.signs();
                let exact = kernel.iter().zip(&signs).all(|(w, s)| *w == s * code.factor);
                ensure(exact, || format!("step {step}: {} kernel is not pattern * factor", conv.name))?;
            }
        }
    }
    let smooth = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let (first, last) = (smooth(&losses[..10]), smooth(&losses[40..]));
    ensure(last < first, || format!("smoothed loss {first:.4} -> {last:.4}"))?;

    let a = fit(&data, &spec, &cfg.train).map_err(err)?;
    let b = fit(&data, &spec, &cfg.train).map_err(err)?;
    let encode = |f: &ghaar::train::FitResult| {
        CompressedModel::from_params(&spec, &f.params, f.space.as_ref().expect("constrained fit")).map(|m| m.encode())
    };
    let (ea, eb) = (encode(&a).map_err(err)?, encode(&b).map_err(err)?);
    ensure(ea == eb, || "identical seeds gave different models".into())?;
    ensure(a.params.layers() == b.params.layers(), || "identical seeds gave different parameters".into())?;
    let mut other = cfg.train.clone();
    other.seed += 1;
    let c = fit(&data, &spec, &other).map_err(err)?;
    ensure(encode(&c).map_err(err)? != ea, || "seed has no effect".into())?;
    Ok(format!(
        "50 projected steps exact, smoothed loss {first:.4} -> {last:.4}, seeded fits bitwise equal"
    ))
}

fn window_coverage() -> Check {
    let start = Instant::now();
    let cfg = WindowConfig::default();
    let report = coverage_verify(0.5, 0.7, &cfg, 512, 0.25).map_err(err)?;
    let secs = start.elapsed().as_secs_f64();
    ensure(report.pass && report.worst_margin > 0.0, || {
        format!("worst margin {} at {:?}", report.worst_margin, report.worst_object)
    })?;
    ensure(secs < 60.0, || format!("sweep took {secs:.1}s"))?;

    // independent spot check against the concrete window list
    let windows = all_windows(512, 512, &cfg).map_err(err)?;
    let mut r = rng(13);
    // size ratios refer to the nominal scale 1.4^level of each pyramid level
    let nominal = |level: usize| cfg.pyramid_ratio.powi(level as i32);
    let top = nominal(windows.iter().map(|w| w.level).max().unwrap_or(0));
    for _ in 0..2000 {
        let side = r.random_range(0.5 * 48.0..0.7 * 48.0 * top).min(511.0);
        let x = r.random_range(0.0..512.0 - side);
        let y = r.random_range(0.0..512.0 - side);
        let inside = windows.iter().any(|w| {
            let (x0, y0, x1, y1) = w.footprint(48);
            let rs = side / (48.0 * nominal(w.level));
            (0.5..=0.7).contains(&rs) && x0 <= x && y0 <= y && x + side <= x1 && y + side <= y1
        });
        ensure(inside, || format!("object {side:.2} at ({x:.2}, {y:.2}) has no window"))?;
    }
    Ok(format!(
        "{} sizes x {} positions, worst margin {:.3}px, {secs:.1}s; 2000 random objects contained",
        report.sizes_checked, report.positions_checked, report.worst_margin
    ))
}

/// The documented synthetic scene: a 1024x768 camera with the principal
/// point at the image centre, objects 2 units tall.
fn synthetic_scene() -> (CameraModel, SceneRanges, usize, usize) {
    let cam = CameraModel::new(800.0, 800.0, 512.0, 384.0, 0.0, 0.0, 0.0).expect("valid camera");
    let ranges = SceneRanges {
        x3d_min: -8.0,
        x3d_max: 8.0,
        y3d_min: -1.0,
        y3d_max: 3.0,
        d3d: 2.0,
    };
    (cam, ranges, 1024, 768)
}

fn perspective_pruning() -> Check {
    let (cam, ranges, width, height) = synthetic_scene();
    let mut r = rng(17);
    let tilted = CameraModel::new(310.0, 290.0, 150.0, 125.0, 40.0, -25.0, 0.8).map_err(err)?;
    let mut worst = 0.0f64;
    for c in [cam, tilted] {
        for _ in 0..1000 {
            let (x, y, z) = (r.random_range(-8.0..8.0), r.random_range(-3.0..3.0), r.random_range(2.0..60.0));
            let (u, v, d) = c.project(x, y, z, ranges.d3d);
            let (bx, by, bz) = c.implied_3d(u, v, d, ranges.d3d);
            worst = worst.max((bx - x).abs()).max((by - y).abs()).max((bz - z).abs());
        }
    }
    ensure(worst <= 1e-9, || format!("round trip error {worst:e}"))?;

    let all = all_windows(width, height, &WindowConfig::default()).map_err(err)?;
    let kept = perspective_filter(&all, &cam, &ranges);
    let ratio = kept.len() as f64 / all.len() as f64;
    ensure(ratio <= 0.5, || format!("|U_f|/|U_s| = {ratio:.3}"))?;
    let mut wrong = 0;
    for w in &all {
        // world position from the window by hand
        let depth = cam.m11 * ranges.d3d / w.d2d;
        let x = ((w.x2d - cam.m13) * depth + cam.m13 * cam.m34 - cam.m14) / cam.m11;
        let y = ((w.y2d - cam.m23) * depth + cam.m23 * cam.m34 - cam.m24) / cam.m22;
        let in_range = (ranges.x3d_min..=ranges.x3d_max).contains(&x) && (ranges.y3d_min..=ranges.y3d_max).contains(&y);
        let half_space = inside_boundary_planes(w.x2d, w.y2d, w.d2d, &cam, &ranges);
        let is_kept = kept.iter().any(|k| k == w);
        if in_range != is_kept || half_space != is_kept {
            wrong += 1;
        }
    }
    ensure(wrong == 0, || format!("{wrong} windows classified differently"))?;
    Ok(format!(
        "round trip {worst:.1e}; |U_f|/|U_s| = {}/{} = {ratio:.3}; 0 of {} windows disagree",
        kept.len(),
        all.len(),
        all.len()
    ))
}

/// Candidate detection thresholds tried on the held-out scenes.
const THRESHOLDS: [f64; 9] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.97, 0.98, 0.99];

fn end_to_end() -> Check {
    let start = Instant::now();
    let cfg = PipelineConfig::default();
    let spec = cfg.network_spec().map_err(err)?;
    let train = cfg.scenes(DataSplit::Train).map_err(err)?;
    let held = cfg.scenes(DataSplit::HeldOut).map_err(err)?;
    let test = cfg.scenes(DataSplit::Test).map_err(err)?;
    let data = cfg.dataset(&train, &held).map_err(err)?;
    println!(
        "    data: {} train / {} held-out / {} test scenes, {} training windows ({:.0}s)",
        train.len(),
        held.len(),
        test.len(),
        data.train.len(),
        start.elapsed().as_secs_f64()
    );

    let mut results = Vec::new();
    for constrain in [true, false] {
        let t = Instant::now();
        let train_cfg = TrainConfig {
            constrain,
            ..cfg.train.clone()
        };
        let fitted = fit(&data, &spec, &train_cfg).map_err(err)?;
        let train_secs = t.elapsed().as_secs_f64();
        let model = match &fitted.space {
            Some(space) => CompressedModel::from_params(&spec, &fitted.params, space),
            None => CompressedModel::dense_from_params(&spec, &fitted.params),
        }
        .map_err(err)?;
        let windows = window_metrics(&data.held_out, |x| model.infer(x, &mut OpCounter::new())).map_err(err)?;
        let (threshold, _) = cfg.calibrate_threshold(&model, &held, &THRESHOLDS).map_err(err)?;
        let mut test_cfg = cfg.clone();
        test_cfg.detect.score_threshold = threshold;
        let eval = test_cfg.evaluate_model(&model, &test).map_err(err)?;
        let rep = &eval.report;
        println!(
            "    {}: trained {train_secs:.0}s, held-out er_cla {:.4} er_loc {:.5}; test at threshold {threshold}: \
             precision {:.3} recall {:.3} (tp {} fp {} fn {})",
            if constrain { "constrained" } else { "unconstrained" },
            windows.er_cla,
            windows.er_loc,
            rep.precision(),
            rep.recall(),
            rep.tp,
            rep.fp,
            rep.fn_
        );
        for b in &rep.buckets {
            println!(
                "      depth [{:.1}, {:.1}): precision {:.3} recall {:.3}",
                b.z_min,
                b.z_max,
                b.precision(),
                b.recall()
            );
        }
        results.push((windows.er_cla, rep.precision(), rep.recall()));
    }
    let (c_err, p, r) = results[0];
    let u_err = results[1].0;
    let mut failures = Vec::new();
    if c_err > 0.05 {
        failures.push(format!("held-out er_cla {c_err:.4} > 0.05"));
    }
    if p < 0.9 || r < 0.9 {
        failures.push(format!("precision {p:.3} / recall {r:.3} below 0.9"));
    }
    if c_err - u_err > 0.03 {
        failures.push(format!("constrained er_cla {c_err:.4} exceeds unconstrained {u_err:.4} by more than 0.03"));
    }
    let summary = format!(
        "er_cla {c_err:.4} (unconstrained {u_err:.4}), precision {p:.3}, recall {r:.3}, {:.0}s total",
        start.elapsed().as_secs_f64()
    );
    if failures.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{}; {summary}", failures.join("; ")))
    }
}

fn main() {
    let checks: [(&str, fn() -> Check); 9] = [
        ("one multiply per constrained step", one_multiply_per_step),
        ("five-byte kernel records", five_byte_records),
        ("fast path matches dense path", fast_path_fidelity),
        ("projection matches brute force", projection_matches_brute_force),
        ("regularizer gradient and limit", regularizer_gradient),
        ("constrained training contract", constrained_training_contract),
        ("window coverage", window_coverage),
        ("perspective pruning", perspective_pruning),
        ("end-to-end detection", end_to_end),
    ];
    // optional name fragments select a subset of the checks
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in checks {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = check();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance check(s) failed");
        std::process::exit(1);
    }
}
