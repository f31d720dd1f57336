//! Multi-task training with generalized-Haar constrained weights.
//!
//! Training runs in two phases. The pretraining phase keeps dense weights
//! and adds the smooth-min Haar regularizer over the full filter space.
//! A usage census over the pretrained kernels then selects the `Nr` most
//! used filters, every constrained kernel is projected onto them, and the
//! constrained phase follows the per-step procedure:
//!
//! 1. rebuild each constrained kernel as `pattern(p) * k`
//! 2. forward
//! 3. backward through task losses plus regularizer
//! 4. SGD update
//! 5. `p` <- nearest reduced-space filter of the updated kernel
//! 6. `k` <- least-squares factor for that filter
//! 7. learning rate from the schedule

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::haar_space::{enumerate_space, nearest_filter, select_top_filters, usage_counts, FilterBank, ReducedSpace, SignPattern};
use crate::image::Image;
use crate::nn::{self, Gradients, HaarCode, ModelParams, NetworkSpec, Output, OutputGrad, Tensor};

/// Probability floor used by the classification loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Regularization weight.
    pub phi: f64,
    /// Smoothing exponent of the soft maximum, `q >= 1`.
    pub q: f64,
    /// Initial learning rate of the dense (pretraining or unconstrained) epochs.
    pub lr: f64,
    /// Initial learning rate of the constrained epochs; the decay schedule
    /// restarts when they begin.
    pub projected_lr: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    /// Dense, regularized epochs before the filter census.
    pub pretrain_epochs: usize,
    /// Constrained epochs on the reduced space.
    pub epochs: usize,
    pub batch_size: usize,
    /// Size of the reduced filter space.
    pub nr: usize,
    pub loc_weight: f64,
    pub cla_weight: f64,
    pub seed: u64,
    /// Random horizontal flips.
    pub hflip: bool,
    /// When false the whole run is plain SGD without regularizer or projection.
    pub constrain: bool,
    /// Cap on samples per split used for the per-epoch log (0 = all).
    pub eval_limit: usize,
    /// Raise the regularization weight linearly from `phi / pretrain_epochs`
    /// in the first pretraining epoch to `phi` in the last.
    pub phi_ramp: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phi: 0.01,
            q: 1000.0,
            lr: 0.03,
            projected_lr: 0.1,
            lr_decay: 0.5,
            lr_decay_every: 3,
            pretrain_epochs: 3,
            epochs: 6,
            batch_size: 16,
            nr: 128,
            loc_weight: 5.0,
            cla_weight: 1.0,
            seed: 0,
            hflip: true,
            constrain: true,
            eval_limit: 0,
            phi_ramp: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q >= 1.0) {
            return Err(Error::config(format!("q must be >= 1, got {}", self.q)));
        }
        if !(self.phi >= 0.0) {
            return Err(Error::config(format!("phi must be >= 0, got {}", self.phi)));
        }
        if !(self.lr > 0.0) || !(self.projected_lr > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::config("learning rate and decay must be positive"));
        }
        if self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::config("batch size and decay period must be positive"));
        }
        if self.constrain && self.nr == 0 {
            return Err(Error::config("Nr must be positive"));
        }
        if !(self.loc_weight >= 0.0 && self.cla_weight >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        Ok(())
    }

    /// Learning rate of the given (zero-based) epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }

    pub fn total_epochs(&self) -> usize {
        self.pretrain_epochs + self.epochs
    }
}

/// One window-level training example.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub patch: Image,
    /// Class id, 0 = background.
    pub label: usize,
    /// `(dx1, dx2, dy1, dy2)` box edges in window units; `None` for background.
    pub gt_loc: Option<[f64; 4]>,
}

impl TrainSample {
    pub fn hflip(&self) -> TrainSample {
        TrainSample {
            patch: self.patch.hflip(),
            label: self.label,
            gt_loc: self.gt_loc.map(|[x1, x2, y1, y2]| [1.0 - x2, 1.0 - x1, y1, y2]),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<TrainSample>,
    pub held_out: Vec<TrainSample>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub loc: f64,
    pub cla: f64,
    pub reg: f64,
    pub total: f64,
}

/// Squared localization error `|d - d_hat|^2`.
pub fn loc_loss(d: &[f64; 4], d_hat: &[f64; 4]) -> f64 {
    d.iter().zip(d_hat).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Softmax loss `-ln p[label]`, floored at [`PROB_FLOOR`].
pub fn cla_loss(probs: &[f64], label: usize) -> f64 {
    let p = probs[label];
    if p < PROB_FLOOR {
        warn!("class probability {p:e} below floor, clamping");
    }
    -p.max(PROB_FLOOR).ln()
}

/// Scratch space reused across regularizer calls.
#[derive(Default)]
struct RegScratch {
    rho: Vec<f64>,
    lambda: Vec<f64>,
    e: Vec<f64>,
}

/// Dot products of `w` with every filter, for a fixed kernel length.
fn filter_dots<const N: usize>(w: &[f64], signs: &[f64], out: &mut Vec<f64>) {
    let w: &[f64; N] = w.try_into().expect("kernel length matches");
    out.extend(signs.chunks_exact(N).map(|s| {
        let s: &[f64; N] = s.try_into().expect("chunk length");
        let mut d = 0.0;
        for i in 0..N {
            d += w[i] * s[i];
        }
        d
    }));
}

fn regularize_into(
    w: &[f64],
    bank: &dyn FilterBank,
    phi: f64,
    q: f64,
    grad: &mut [f64],
    scratch: &mut RegScratch,
) -> f64 {
    let n = w.len() as f64;
    let norm2: f64 = w.iter().map(|v| v * v).sum();
    scratch.rho.clear();
    scratch.lambda.clear();
    scratch.e.clear();
    let signs = bank.all_signs();
    match w.len() {
        9 => filter_dots::<9>(w, signs, &mut scratch.lambda),
        25 => filter_dots::<25>(w, signs, &mut scratch.lambda),
        len => scratch
            .lambda
            .extend(signs.chunks_exact(len).map(|s| w.iter().zip(s).map(|(a, b)| a * b).sum::<f64>())),
    }
    let mut rho_min = f64::INFINITY;
    for dot in scratch.lambda.iter_mut() {
        let rho = (norm2 - *dot * *dot / n).max(0.0);
        rho_min = rho_min.min(rho);
        scratch.rho.push(rho);
        *dot /= n;
    }
    // Shifted by the minimum residual: e_r = z_r / max z lies in (0, 1].
    let integer_q = q.fract() == 0.0 && q <= 64.0;
    let (mut s_hi, mut s_lo) = (0.0, 0.0);
    // rho slots are overwritten with e^q below
    for rho in scratch.rho.iter_mut() {
        // weights below e^-46 relative to the nearest filter vanish in the sums
        if (*rho - rho_min) * q > 46.0 {
            *rho = 0.0;
            scratch.e.push(0.0);
            continue;
        }
        let e = (rho_min - *rho).exp();
        let eq = if integer_q { e.powi(q as i32) } else { (q * (rho_min - *rho)).exp() };
        s_lo += eq;
        s_hi += eq * e;
        *rho = eq;
        scratch.e.push(e);
    }
    let value = phi * rho_min - phi * (s_hi / s_lo).ln();
    // grad = 2 phi (w - sum_r c_r lambda_r s_r), c_r = (q+1) a_r - q b_r
    let mut pull = vec![0.0f64; w.len()];
    for (pos, s) in signs.chunks_exact(w.len()).enumerate() {
        let (eq, e) = (scratch.rho[pos], scratch.e[pos]);
        if eq == 0.0 {
            continue;
        }
        let c = (q + 1.0) * eq * e / s_hi - q * eq / s_lo;
        let cl = c * scratch.lambda[pos];
        for (p, s) in pull.iter_mut().zip(s) {
            *p += cl * s;
        }
    }
    for (g, (x, p)) in grad.iter_mut().zip(w.iter().zip(pull)) {
        *g += 2.0 * phi * (x - p);
    }
    value
}

/// Smooth-min generalized Haar regularizer and its gradient:
/// `-phi * ln(sum z^(q+1) / sum z^q)` with `z_r = exp(-residual_r)`,
/// evaluated in the log domain.
pub fn haar_regularizer(w: &[f64], bank: &dyn FilterBank, phi: f64, q: f64) -> Result<(f64, Vec<f64>)> {
    if bank.is_empty() {
        return Err(Error::config("regularizer needs a non-empty filter bank"));
    }
    if w.len() != bank.side() * bank.side() || w.len() > 16 {
        return Err(Error::dim(format!("kernel of {} values vs filter side {}", w.len(), bank.side())));
    }
    if !(q >= 1.0) {
        return Err(Error::config(format!("q must be >= 1, got {q}")));
    }
    if !w.iter().all(|v| v.is_finite()) {
        return Err(Error::dim("kernel contains non-finite values"));
    }
    let mut grad = vec![0.0; w.len()];
    let value = regularize_into(w, bank, phi, q, &mut grad, &mut RegScratch::default());
    Ok((value, grad))
}

/// How a training step treats the Haar-constrained layers.
#[derive(Clone, Copy)]
pub enum Constraint<'a> {
    /// Plain SGD.
    Free,
    /// Dense weights plus the smooth-min regularizer over `bank`.
    Regularized(&'a dyn FilterBank),
    /// Rebuild from Haar codes, regularize, update, re-project onto `space`.
    Projected(&'a ReducedSpace),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    /// Learning rate actually applied.
    pub lr: f64,
    /// Mean residual of the projected kernels before projection (`NaN` when not projecting).
    pub mean_residual: f64,
}

fn constrained_layers(spec: &NetworkSpec) -> Vec<bool> {
    spec.convs().iter().map(|c| c.constrained()).collect()
}

/// Sets every constrained kernel to the nearest scaled filter of `space`.
/// Returns the mean residual before projection.
pub fn project_params(spec: &NetworkSpec, params: &mut ModelParams, space: &ReducedSpace) -> Result<f64> {
    let mask = constrained_layers(spec);
    let convs: Vec<_> = spec.convs().into_iter().cloned().collect();
    let mut total = 0.0;
    let mut count = 0usize;
    for ((layer, conv), constrained) in params.layers_mut().iter_mut().zip(&convs).zip(mask) {
        if !constrained {
            continue;
        }
        let n = conv.kernel_len();
        let mut codes = Vec::with_capacity(conv.kernel_count());
        for kernel in layer.weights.chunks_exact_mut(n) {
            let fit = nearest_filter(kernel, space)?;
            total += fit.residual;
            count += 1;
            let pattern = space.pattern_at(fit.position);
            kernel.copy_from_slice(&pattern.scaled(fit.lambda));
            codes.push(HaarCode {
                index: fit.index,
                factor: fit.lambda,
            });
        }
        layer.haar = Some(codes);
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Rebuilds dense constrained kernels from their Haar codes.
pub fn reconstruct(spec: &NetworkSpec, params: &mut ModelParams) -> Result<()> {
    let convs: Vec<_> = spec.convs().into_iter().cloned().collect();
    for (layer, conv) in params.layers_mut().iter_mut().zip(&convs) {
        if !conv.constrained() {
            continue;
        }
        let codes = layer
            .haar
            .as_ref()
            .ok_or_else(|| Error::Usage(format!("{} has no Haar codes", conv.name)))?;
        for (kernel, code) in layer.weights.chunks_exact_mut(conv.kernel_len()).zip(codes) {
            let p = SignPattern::from_index(conv.kernel_size, code.index)?;
            kernel.copy_from_slice(&p.scaled(code.factor));
        }
    }
    Ok(())
}

/// Mean nearest-filter residual over all constrained kernels.
pub fn mean_residual(spec: &NetworkSpec, params: &ModelParams, bank: &dyn FilterBank) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (layer, conv) in params.layers().iter().zip(spec.convs()) {
        if !conv.constrained() || conv.kernel_size != bank.side() {
            continue;
        }
        for kernel in layer.weights.chunks_exact(conv.kernel_len()) {
            total += nearest_filter(kernel, bank)?.residual;
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Task losses and gradients for one batch, without regularizer.
pub fn batch_gradients(
    spec: &NetworkSpec,
    params: &ModelParams,
    batch: &[TrainSample],
    config: &TrainConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let mut grads = Gradients::zeros_like(params);
    let mut loss = LossBreakdown::default();
    let scale = 1.0 / batch.len() as f64;
    for sample in batch {
        let x = sample.patch.to_tensor();
        let (out, cache) = nn::forward(spec, params, &x)?;
        if sample.label >= spec.classes() {
            return Err(Error::data(format!("label {} outside {} classes", sample.label, spec.classes())));
        }
        loss.cla += cla_loss(&out.probs, sample.label) * scale;
        let mut g_cla: Vec<f64> = out.probs.iter().map(|p| config.cla_weight * p * scale).collect();
        g_cla[sample.label] -= config.cla_weight * scale;
        let mut g_loc = [0.0; 4];
        if let (true, Some(target)) = (sample.label != 0, sample.gt_loc) {
            loss.loc += loc_loss(&out.loc, &target) * scale;
            for k in 0..4 {
                g_loc[k] = config.loc_weight * 2.0 * (out.loc[k] - target[k]) * scale;
            }
        }
        nn::backward_into(
            spec,
            params,
            &cache,
            &OutputGrad {
                loc: g_loc,
                cla_logits: g_cla,
            },
            &mut grads,
        )?;
    }
    loss.total = config.loc_weight * loss.loc + config.cla_weight * loss.cla;
    Ok((loss, grads))
}

fn add_regularizer(
    spec: &NetworkSpec,
    params: &ModelParams,
    bank: &dyn FilterBank,
    config: &TrainConfig,
    grads: &mut Gradients,
) -> f64 {
    if config.phi == 0.0 {
        return 0.0;
    }
    let mut scratch = RegScratch::default();
    let mut total = 0.0;
    for ((layer, conv), g) in params.layers().iter().zip(spec.convs()).zip(&mut grads.layers) {
        if !conv.constrained() || conv.kernel_size != bank.side() {
            continue;
        }
        let n = conv.kernel_len();
        for (w, gw) in layer.weights.chunks_exact(n).zip(g.weights.chunks_exact_mut(n)) {
            total += regularize_into(w, bank, config.phi, config.q, gw, &mut scratch);
        }
    }
    total
}

/// One constrained parameter update over a minibatch. A non-finite loss or
/// update aborts the attempt, halves `lr` and retries once.
pub fn train_step(
    spec: &NetworkSpec,
    params: &mut ModelParams,
    batch: &[TrainSample],
    constraint: Constraint<'_>,
    config: &TrainConfig,
    lr: &mut f64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::config("empty batch"));
    }
    if let Constraint::Projected(_) = constraint {
        reconstruct(spec, params)?;
    }
    for attempt in 0..2 {
        let (mut loss, mut grads) = batch_gradients(spec, params, batch, config)?;
        loss.reg = match constraint {
            Constraint::Free => 0.0,
            Constraint::Regularized(bank) => add_regularizer(spec, params, bank, config, &mut grads),
            Constraint::Projected(space) => add_regularizer(spec, params, space, config, &mut grads),
        };
        loss.total += loss.reg;

        let mut updated = params.clone();
        let mut residual = f64::NAN;
        let ok = loss.total.is_finite() && grads.is_finite() && {
            nn::sgd_update(&mut updated, &grads, *lr)?;
            if let Constraint::Projected(space) = constraint {
                if updated.is_finite() {
                    residual = project_params(spec, &mut updated, space)?;
                }
            }
            updated.is_finite()
        };
        if ok {
            *params = updated;
            return Ok(StepReport {
                loss,
                lr: *lr,
                mean_residual: residual,
            });
        }
        warn!("non-finite loss or update at lr {} (attempt {})", *lr, attempt + 1);
        *lr *= 0.5;
    }
    Err(Error::Training(
        "loss or update stayed non-finite after halving the learning rate".into(),
    ))
}

/// Window-level error counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WindowMetrics {
    pub n: usize,
    /// Background samples classified as an object.
    pub fp: usize,
    /// Object samples given the wrong class.
    pub fn_: usize,
    pub er_cla: f64,
    /// Mean squared localization error per coordinate over object samples.
    pub er_loc: f64,
}

/// Classification and localization error of a predictor over labelled windows.
pub fn window_metrics<F>(samples: &[TrainSample], mut predict: F) -> Result<WindowMetrics>
where
    F: FnMut(&Tensor) -> Result<Output>,
{
    let mut m = WindowMetrics {
        n: samples.len(),
        ..Default::default()
    };
    let mut loc_sum = 0.0;
    let mut loc_n = 0usize;
    for s in samples {
        let out = predict(&s.patch.to_tensor())?;
        let (label, _) = out.decision();
        if label != s.label {
            if s.label == 0 {
                m.fp += 1;
            } else {
                m.fn_ += 1;
            }
        }
        if let (true, Some(t)) = (s.label != 0, s.gt_loc) {
            loc_sum += loc_loss(&out.loc, &t);
            loc_n += 1;
        }
    }
    if m.n > 0 {
        m.er_cla = (m.fp + m.fn_) as f64 / m.n as f64;
    }
    if loc_n > 0 {
        m.er_loc = loc_sum / (4 * loc_n) as f64;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    HeldOut,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::HeldOut => "held_out",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: Split,
    pub er_cla: f64,
    pub er_loc: f64,
    pub mean_residual: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,er_cla,er_loc,mean_residual,lr\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6}",
                r.epoch,
                r.split.as_str(),
                r.er_cla,
                r.er_loc,
                r.mean_residual,
                r.lr
            );
        }
        out
    }

    pub fn last(&self, split: Split) -> Option<&LogRow> {
        self.rows.iter().rev().find(|r| r.split == split)
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    /// Reduced space the constrained layers use; `None` for unconstrained runs.
    pub space: Option<ReducedSpace>,
    pub log: TrainLog,
}

fn limited(samples: &[TrainSample], limit: usize) -> &[TrainSample] {
    if limit == 0 || limit >= samples.len() {
        samples
    } else {
        &samples[..limit]
    }
}

struct Trainer<'a> {
    spec: &'a NetworkSpec,
    data: &'a Dataset,
    config: TrainConfig,
    rng: ChaCha8Rng,
    lr_scale: f64,
    log: TrainLog,
}

impl Trainer<'_> {
    /// Runs one epoch; `phase_epoch` counts from the start of the current
    /// phase and drives the learning-rate schedule.
    fn epoch(
        &mut self,
        epoch: usize,
        phase_epoch: usize,
        params: &mut ModelParams,
        constraint: Constraint<'_>,
    ) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let base_lr = self.config.lr_at(phase_epoch);
        let mut residual_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<TrainSample> = chunk
                .iter()
                .map(|&i| {
                    let s = &self.data.train[i];
                    if self.config.hflip && self.rng.random::<bool>() {
                        s.hflip()
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let mut lr = base_lr * self.lr_scale;
            let report = train_step(self.spec, params, &batch, constraint, &self.config, &mut lr)?;
            self.lr_scale = lr / base_lr;
            if report.mean_residual.is_finite() {
                residual_sum += report.mean_residual;
                steps += 1;
            }
        }
        let residual = match constraint {
            Constraint::Projected(_) if steps > 0 => residual_sum / steps as f64,
            Constraint::Projected(_) => 0.0,
            Constraint::Regularized(bank) => mean_residual(self.spec, params, bank)?,
            Constraint::Free => mean_residual(self.spec, params, &enumerate_space(3)?)?,
        };
        let lr = base_lr * self.lr_scale;
        for (split, samples) in [(Split::Train, &self.data.train), (Split::HeldOut, &self.data.held_out)] {
            let samples = limited(samples, self.config.eval_limit);
            if samples.is_empty() {
                continue;
            }
            let m = window_metrics(samples, |x| nn::predict(self.spec, params, x))?;
            self.log.rows.push(LogRow {
                epoch,
                split,
                er_cla: m.er_cla,
                er_loc: m.er_loc,
                mean_residual: residual,
                lr,
            });
        }
        Ok(residual)
    }
}

fn check_dataset(data: &Dataset, spec: &NetworkSpec) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let has_bg = data.train.iter().any(|s| s.label == 0);
    let has_obj = data.train.iter().any(|s| s.label != 0);
    if !has_bg || !has_obj {
        return Err(Error::config("training set needs both background and object samples"));
    }
    let size = spec.arch.input_size;
    if let Some(s) = data
        .train
        .iter()
        .chain(&data.held_out)
        .find(|s| s.patch.width != size || s.patch.height != size || s.label >= spec.classes())
    {
        return Err(Error::data(format!(
            "sample {}x{} label {} does not fit the network",
            s.patch.width, s.patch.height, s.label
        )));
    }
    Ok(())
}

/// Full training run. With `constrain` set: regularized pretraining over the
/// full filter space, usage census, `Nr` selection, projection and
/// constrained training. Otherwise plain SGD for the same number of epochs.
pub fn fit(data: &Dataset, spec: &NetworkSpec, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    check_dataset(data, spec)?;
    let mut params = ModelParams::init(spec, config.seed);
    let mut trainer = Trainer {
        spec,
        data,
        config: config.clone(),
        rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0f_da7a),
        lr_scale: 1.0,
        log: TrainLog::default(),
    };

    if !config.constrain {
        for epoch in 0..config.total_epochs() {
            trainer.epoch(epoch, epoch, &mut params, Constraint::Free)?;
        }
        return Ok(FitResult {
            params,
            space: None,
            log: trainer.log,
        });
    }

    let full = enumerate_space(3)?;
    for epoch in 0..config.pretrain_epochs {
        if config.phi_ramp {
            trainer.config.phi = config.phi * (epoch + 1) as f64 / config.pretrain_epochs as f64;
        }
        trainer.epoch(epoch, epoch, &mut params, Constraint::Regularized(&full))?;
    }

    let kernels: Vec<&[f64]> = params
        .layers()
        .iter()
        .zip(spec.convs())
        .filter(|(_, c)| c.constrained())
        .flat_map(|(l, c)| l.weights.chunks_exact(c.kernel_len()))
        .collect();
    let counts = usage_counts(kernels, &full)?;
    let nr = config.nr.min(full.len());
    let space = select_top_filters(3, &counts, nr)?;
    project_params(spec, &mut params, &space)?;

    trainer.lr_scale = 1.0;
    trainer.config.lr = config.projected_lr;
    for epoch in config.pretrain_epochs..config.total_epochs() {
        trainer.epoch(epoch, epoch - config.pretrain_epochs, &mut params, Constraint::Projected(&space))?;
    }
    Ok(FitResult {
        params,
        space: Some(space),
        log: trainer.log,
    })
}
