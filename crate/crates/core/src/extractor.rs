//! The per-view feature extractor: a small trainable network over per-cell
//! raster statistics, trained with cross-entropy, SGD momentum 0.9, a
//! cosine-annealed learning rate, and early stopping on validation
//! macro-F1. One model is trained per view; its pooled hidden vector is
//! the exported feature, and the two affine heads (diagnosis, density) are
//! the removable classification layer.

use std::io::{Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{FeatureRecord, RowSource};
use crate::labels::{Laterality, ViewKind, ViewTag};
use crate::metrics::{confusion, f1_scores, EvalLevel};
use crate::preprocess::NormalizedRaster;

pub const STATS_PER_CELL: usize = 4;

#[derive(Debug, Error)]
pub enum ExtractorError {
    #[error("invalid extractor config: {0}")]
    Config(String),
    #[error("training set has {0} diagnosis class(es); need at least 2")]
    SingleClass(usize),
    #[error("non-finite gradient at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { epoch: usize, batch: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("class index {target} out of range for {classes} classes")]
    ClassIndex { target: usize, classes: usize },
    #[error("model is for view {expected}, input is {got}")]
    ViewTagMismatch { expected: ViewTag, got: ViewTag },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractorConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Feature dimension C of the pooled hidden vector.
    pub channels: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig {
            grid_h: 16,
            grid_w: 12,
            channels: 64,
            lr_max: 0.01,
            lr_min: 1e-5,
            momentum: 0.9,
            epochs: 50,
            patience: 15,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    /// 512-channel preset mirroring the larger backbone's hidden width.
    pub fn preset_512(self) -> Self {
        ExtractorConfig { channels: 512, ..self }
    }

    pub fn validate(&self) -> Result<(), ExtractorError> {
        if self.channels < 4 {
            return Err(ExtractorError::Config(format!(
                "channels {} below minimum 4",
                self.channels
            )));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return Err(ExtractorError::Config(format!(
                "need 0 < lr_min < lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.epochs == 0 {
            return Err(ExtractorError::Config("epochs must be >= 1".into()));
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(ExtractorError::Config(format!(
                "patience {} must be in 1..={}",
                self.patience, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(ExtractorError::Config("batch_size must be >= 1".into()));
        }
        if self.grid_h == 0 || self.grid_w == 0 {
            return Err(ExtractorError::Config("grid dimensions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-cell statistics: grid_h x grid_w cells, four stats each.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsTensor {
    pub grid_h: usize,
    pub grid_w: usize,
    data: Vec<f64>,
}

impl StatsTensor {
    pub fn from_data(grid_h: usize, grid_w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), grid_h * grid_w * STATS_PER_CELL);
        StatsTensor { grid_h, grid_w, data }
    }

    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn stat(&self, cell: usize, s: usize) -> f64 {
        self.data[cell * STATS_PER_CELL + s]
    }

    fn cell_slice(&self, cell: usize) -> &[f64] {
        &self.data[cell * STATS_PER_CELL..(cell + 1) * STATS_PER_CELL]
    }
}

/// Summarize a raster into grid_h x grid_w cells of four statistics each:
/// mean, standard deviation, mean central-difference gradient magnitude,
/// and the fraction of pixels above the raster's global mean. Cell
/// boundaries partition the raster; ragged remainders widen the last
/// cells.
pub fn cell_statistics(
    raster: &NormalizedRaster,
    grid_h: usize,
    grid_w: usize,
) -> Result<StatsTensor, ExtractorError> {
    let (h, w) = (raster.height, raster.width);
    if h < grid_h || w < grid_w {
        return Err(ExtractorError::Dimension(format!(
            "raster {h}x{w} smaller than grid {grid_h}x{grid_w}"
        )));
    }
    let global_mean = raster.data.iter().sum::<f64>() / raster.data.len() as f64;
    let mut data = Vec::with_capacity(grid_h * grid_w * STATS_PER_CELL);
    for gi in 0..grid_h {
        let y0 = gi * h / grid_h;
        let y1 = (gi + 1) * h / grid_h;
        for gj in 0..grid_w {
            let x0 = gj * w / grid_w;
            let x1 = (gj + 1) * w / grid_w;
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let mut sum = 0.0;
            let mut grad_sum = 0.0;
            let mut above = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = raster.get(x, y);
                    sum += v;
                    // Central differences with clamped borders.
                    let gx = (raster.get((x + 1).min(w - 1), y)
                        - raster.get(x.saturating_sub(1), y))
                        / 2.0;
                    let gy = (raster.get(x, (y + 1).min(h - 1))
                        - raster.get(x, y.saturating_sub(1)))
                        / 2.0;
                    grad_sum += (gx * gx + gy * gy).sqrt();
                    if v > global_mean {
                        above += 1.0;
                    }
                }
            }
            let mean = sum / count;
            // Second pass for the deviation sum: exact zero on constant cells.
            let mut dev_sq = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let d = raster.get(x, y) - mean;
                    dev_sq += d * d;
                }
            }
            data.push(mean);
            data.push((dev_sq / count).sqrt());
            data.push(grad_sum / count);
            data.push(above / count);
        }
    }
    Ok(StatsTensor { grid_h, grid_w, data })
}

/// Loss and gradient of the stabilized softmax cross-entropy:
/// loss = -log softmax(logits)[target], grad = softmax(logits) - onehot.
pub fn softmax_cross_entropy(
    logits: &[f64],
    target: usize,
) -> Result<(f64, Vec<f64>), ExtractorError> {
    let k = logits.len();
    if k < 2 {
        return Err(ExtractorError::Dimension(format!("need >= 2 logits, got {k}")));
    }
    if target >= k {
        return Err(ExtractorError::ClassIndex { target, classes: k });
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(ExtractorError::Dimension("non-finite logit".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_sum = max + sum_exp.ln();
    let loss = log_sum - logits[target];
    let mut grad: Vec<f64> = logits.iter().map(|l| (l - log_sum).exp()).collect();
    grad[target] -= 1.0;
    Ok((loss, grad))
}

/// Cosine-annealed learning rate over one period of `total` epochs:
/// lr_min + (lr_max - lr_min) * (1 + cos(pi * t / total)) / 2.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> Result<f64, ExtractorError> {
    if total == 0 {
        return Err(ExtractorError::Config("cosine schedule needs total epochs >= 1".into()));
    }
    if t > total {
        return Err(ExtractorError::Config(format!("epoch index {t} beyond horizon {total}")));
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + phase.cos()))
}

/// One SGD step with momentum: v <- momentum*v + g; p <- p - lr*v.
/// Velocity accumulates raw gradients; the step scales the velocity by lr.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<(), ExtractorError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(ExtractorError::Dimension(format!(
            "param/grad/velocity lengths {}/{}/{} disagree",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        // Caller attaches epoch/batch context.
        return Err(ExtractorError::NonFiniteGradient { epoch: 0, batch: 0 });
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// Weights of one per-view extractor. `w1` maps the four per-cell stats to
/// C hidden channels (shared across cells); the two heads map the pooled
/// vector to class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorModel {
    pub config: ExtractorConfig,
    pub view_tag: ViewTag,
    pub k_diag: usize,
    pub k_dens: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w_diag: Vec<f64>,
    pub b_diag: Vec<f64>,
    pub w_dens: Vec<f64>,
    pub b_dens: Vec<f64>,
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl ExtractorModel {
    /// Seeded scaled-uniform initialization; biases start at zero.
    pub fn init(
        config: ExtractorConfig,
        view_tag: ViewTag,
        k_diag: usize,
        k_dens: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ExtractorError> {
        config.validate()?;
        if k_diag < 2 || k_dens < 2 {
            return Err(ExtractorError::Config(format!(
                "head class counts ({k_diag}, {k_dens}) must be >= 2"
            )));
        }
        let c = config.channels;
        Ok(ExtractorModel {
            view_tag,
            k_diag,
            k_dens,
            w1: xavier(rng, STATS_PER_CELL, c, STATS_PER_CELL * c),
            b1: vec![0.0; c],
            w_diag: xavier(rng, c, k_diag, c * k_diag),
            b_diag: vec![0.0; k_diag],
            w_dens: xavier(rng, c, k_dens, c * k_dens),
            b_dens: vec![0.0; k_dens],
            config,
        })
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    fn check_grid(&self, stats: &StatsTensor) -> Result<(), ExtractorError> {
        if stats.grid_h != self.config.grid_h || stats.grid_w != self.config.grid_w {
            return Err(ExtractorError::Dimension(format!(
                "stats grid {}x{} does not match model grid {}x{}",
                stats.grid_h, stats.grid_w, self.config.grid_h, self.config.grid_w
            )));
        }
        Ok(())
    }
}

/// Output of a forward pass: the pooled feature and both heads' logits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub feature: Vec<f64>,
    pub logits_diag: Vec<f64>,
    pub logits_dens: Vec<f64>,
}

struct ForwardTrace {
    hidden: Vec<f64>, // cells x C, post-relu
    output: ForwardOutput,
}

fn forward_trace(model: &ExtractorModel, stats: &StatsTensor) -> ForwardTrace {
    let c = model.config.channels;
    let cells = stats.cells();
    let mut hidden = vec![0.0; cells * c];
    let mut pooled = vec![0.0; c];
    for cell in 0..cells {
        let s = stats.cell_slice(cell);
        let h = &mut hidden[cell * c..(cell + 1) * c];
        for (ch, h_val) in h.iter_mut().enumerate() {
            let mut z = model.b1[ch];
            for (stat_idx, &stat) in s.iter().enumerate() {
                z += model.w1[stat_idx * c + ch] * stat;
            }
            let activated = z.max(0.0);
            *h_val = activated;
            pooled[ch] += activated;
        }
    }
    let scale = 1.0 / cells as f64;
    for p in &mut pooled {
        *p *= scale;
    }
    let affine = |w: &[f64], b: &[f64], k: usize| -> Vec<f64> {
        let mut logits = b.to_vec();
        for (ch, &p) in pooled.iter().enumerate() {
            for (k_idx, logit) in logits.iter_mut().enumerate().take(k) {
                *logit += w[ch * k + k_idx] * p;
            }
        }
        logits
    };
    let logits_diag = affine(&model.w_diag, &model.b_diag, model.k_diag);
    let logits_dens = affine(&model.w_dens, &model.b_dens, model.k_dens);
    ForwardTrace {
        hidden,
        output: ForwardOutput { feature: pooled, logits_diag, logits_dens },
    }
}

/// Forward pass: hidden activations per cell, spatial average pooling, and
/// the two affine heads. The pooled vector is the exported feature.
pub fn forward(model: &ExtractorModel, stats: &StatsTensor) -> Result<ForwardOutput, ExtractorError> {
    model.check_grid(stats)?;
    Ok(forward_trace(model, stats).output)
}

/// Argmax class predictions of both heads.
pub fn predict(model: &ExtractorModel, stats: &StatsTensor) -> Result<(usize, usize), ExtractorError> {
    let out = forward(model, stats)?;
    Ok((argmax(&out.logits_diag), argmax(&out.logits_dens)))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (index, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = index;
        }
    }
    best
}

/// One training example: precomputed cell statistics plus class indices.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub stats: StatsTensor,
    pub diag: usize,
    pub dens: usize,
}

/// Gradients for every weight group of the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w_diag: Vec<f64>,
    pub b_diag: Vec<f64>,
    pub w_dens: Vec<f64>,
    pub b_dens: Vec<f64>,
}

impl Gradients {
    fn zeros_like(model: &ExtractorModel) -> Self {
        Gradients {
            w1: vec![0.0; model.w1.len()],
            b1: vec![0.0; model.b1.len()],
            w_diag: vec![0.0; model.w_diag.len()],
            b_diag: vec![0.0; model.b_diag.len()],
            w_dens: vec![0.0; model.w_dens.len()],
            b_dens: vec![0.0; model.b_dens.len()],
        }
    }
}

/// Mean per-sample loss of a batch, where one sample's loss is the summed
/// cross-entropy of both heads.
pub fn batch_loss(model: &ExtractorModel, samples: &[TrainSample]) -> Result<f64, ExtractorError> {
    let mut total = 0.0;
    for sample in samples {
        model.check_grid(&sample.stats)?;
        let out = forward_trace(model, &sample.stats).output;
        total += softmax_cross_entropy(&out.logits_diag, sample.diag)?.0;
        total += softmax_cross_entropy(&out.logits_dens, sample.dens)?.0;
    }
    Ok(total / samples.len() as f64)
}

/// Analytic gradients of [`batch_loss`] with respect to every weight group.
pub fn batch_gradients(
    model: &ExtractorModel,
    samples: &[TrainSample],
) -> Result<(Gradients, f64), ExtractorError> {
    let c = model.config.channels;
    let mut grads = Gradients::zeros_like(model);
    let mut total_loss = 0.0;
    for sample in samples {
        model.check_grid(&sample.stats)?;
        let trace = forward_trace(model, &sample.stats);
        let (loss_diag, d_diag) = softmax_cross_entropy(&trace.output.logits_diag, sample.diag)?;
        let (loss_dens, d_dens) = softmax_cross_entropy(&trace.output.logits_dens, sample.dens)?;
        total_loss += loss_diag + loss_dens;

        let pooled = &trace.output.feature;
        // Head gradients and the pooled-vector gradient.
        let mut d_pooled = vec![0.0; c];
        for ch in 0..c {
            for (k, &d) in d_diag.iter().enumerate() {
                grads.w_diag[ch * model.k_diag + k] += pooled[ch] * d;
                d_pooled[ch] += model.w_diag[ch * model.k_diag + k] * d;
            }
            for (k, &d) in d_dens.iter().enumerate() {
                grads.w_dens[ch * model.k_dens + k] += pooled[ch] * d;
                d_pooled[ch] += model.w_dens[ch * model.k_dens + k] * d;
            }
        }
        for (g, &d) in grads.b_diag.iter_mut().zip(&d_diag) {
            *g += d;
        }
        for (g, &d) in grads.b_dens.iter_mut().zip(&d_dens) {
            *g += d;
        }

        // Through the average pooling and the relu into w1/b1.
        let cells = sample.stats.cells();
        let pool_scale = 1.0 / cells as f64;
        for cell in 0..cells {
            let h = &trace.hidden[cell * c..(cell + 1) * c];
            let s = sample.stats.cell_slice(cell);
            for ch in 0..c {
                if h[ch] > 0.0 {
                    let dz = d_pooled[ch] * pool_scale;
                    for (stat_idx, &stat) in s.iter().enumerate() {
                        grads.w1[stat_idx * c + ch] += stat * dz;
                    }
                    grads.b1[ch] += dz;
                }
            }
        }
    }
    let scale = 1.0 / samples.len() as f64;
    for group in [
        &mut grads.w1,
        &mut grads.b1,
        &mut grads.w_diag,
        &mut grads.b_diag,
        &mut grads.w_dens,
        &mut grads.b_dens,
    ] {
        for g in group.iter_mut() {
            *g *= scale;
        }
    }
    Ok((grads, total_loss * scale))
}

/// Patience-based stopping on a maximized validation score. Improvement is
/// strict; epochs are 1-based.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    pub best_epoch: usize,
    pub best_score: f64,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best_epoch: 0, best_score: f64::NEG_INFINITY }
    }

    /// Record one epoch's score. Returns (improved, stop).
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        let improved = score > self.best_score;
        if improved {
            self.best_score = score;
            self.best_epoch = epoch;
        }
        let stop = epoch - self.best_epoch >= self.patience;
        (improved, stop)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub lr: f64,
    pub train_loss: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

struct Snapshot {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w_diag: Vec<f64>,
    b_diag: Vec<f64>,
    w_dens: Vec<f64>,
    b_dens: Vec<f64>,
}

impl Snapshot {
    fn take(model: &ExtractorModel) -> Self {
        Snapshot {
            w1: model.w1.clone(),
            b1: model.b1.clone(),
            w_diag: model.w_diag.clone(),
            b_diag: model.b_diag.clone(),
            w_dens: model.w_dens.clone(),
            b_dens: model.b_dens.clone(),
        }
    }

    fn restore(self, model: &mut ExtractorModel) {
        model.w1 = self.w1;
        model.b1 = self.b1;
        model.w_diag = self.w_diag;
        model.b_diag = self.b_diag;
        model.w_dens = self.w_dens;
        model.b_dens = self.b_dens;
    }
}

/// Mean of the two heads' validation macro-F1.
fn validation_score(model: &ExtractorModel, val: &[TrainSample]) -> Result<f64, ExtractorError> {
    let mut diag_preds = Vec::with_capacity(val.len());
    let mut diag_truth = Vec::with_capacity(val.len());
    let mut dens_preds = Vec::with_capacity(val.len());
    let mut dens_truth = Vec::with_capacity(val.len());
    for sample in val {
        let (diag, dens) = predict(model, &sample.stats)?;
        diag_preds.push(diag);
        diag_truth.push(sample.diag);
        dens_preds.push(dens);
        dens_truth.push(sample.dens);
    }
    let diag_matrix = confusion(&diag_preds, &diag_truth, model.k_diag)
        .map_err(|e| ExtractorError::Dimension(e.to_string()))?;
    let dens_matrix = confusion(&dens_preds, &dens_truth, model.k_dens)
        .map_err(|e| ExtractorError::Dimension(e.to_string()))?;
    let diag_f1 = f1_scores(&diag_matrix, EvalLevel::Side).macro_f1;
    let dens_f1 = f1_scores(&dens_matrix, EvalLevel::Side).macro_f1;
    Ok(0.5 * (diag_f1 + dens_f1))
}

/// Train one per-view extractor. Minimizes the summed cross-entropy of
/// both heads over seeded mini-batches; epoch learning rates follow
/// [`cosine_lr`]; stops after `patience` epochs without validation
/// improvement and returns the best epoch's weights.
pub fn train_extractor(
    view_tag: ViewTag,
    train: &[TrainSample],
    val: &[TrainSample],
    k_diag: usize,
    k_dens: usize,
    cfg: &ExtractorConfig,
) -> Result<(ExtractorModel, TrainLog), ExtractorError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ExtractorError::Config("empty training set".into()));
    }
    if val.is_empty() {
        return Err(ExtractorError::Config("empty validation set".into()));
    }
    let mut diag_seen = vec![false; k_diag];
    for sample in train.iter().chain(val) {
        if sample.diag >= k_diag {
            return Err(ExtractorError::ClassIndex { target: sample.diag, classes: k_diag });
        }
        if sample.dens >= k_dens {
            return Err(ExtractorError::ClassIndex { target: sample.dens, classes: k_dens });
        }
    }
    for sample in train {
        diag_seen[sample.diag] = true;
    }
    let distinct = diag_seen.iter().filter(|&&b| b).count();
    if distinct < 2 {
        return Err(ExtractorError::SingleClass(distinct));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ExtractorModel::init(cfg.clone(), view_tag, k_diag, k_dens, &mut rng)?;
    let mut velocity = Gradients::zeros_like(&model);
    let mut stopping = EarlyStopping::new(cfg.patience);
    let mut best: Option<Snapshot> = None;
    let mut log = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (grads, batch_mean_loss) = batch_gradients(&model, &batch)?;
            loss_sum += batch_mean_loss * batch.len() as f64;
            let step = |p: &mut Vec<f64>, g: &Vec<f64>, v: &mut Vec<f64>| {
                sgd_momentum_step(p, g, v, lr, cfg.momentum).map_err(|e| match e {
                    ExtractorError::NonFiniteGradient { .. } => {
                        ExtractorError::NonFiniteGradient { epoch, batch: batch_index }
                    }
                    other => other,
                })
            };
            step(&mut model.w1, &grads.w1, &mut velocity.w1)?;
            step(&mut model.b1, &grads.b1, &mut velocity.b1)?;
            step(&mut model.w_diag, &grads.w_diag, &mut velocity.w_diag)?;
            step(&mut model.b_diag, &grads.b_diag, &mut velocity.b_diag)?;
            step(&mut model.w_dens, &grads.w_dens, &mut velocity.w_dens)?;
            step(&mut model.b_dens, &grads.b_dens, &mut velocity.b_dens)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_macro_f1 = validation_score(&model, val)?;
        log.push(EpochRecord { lr, train_loss, val_macro_f1 });
        let (improved, stop) = stopping.observe(epoch, val_macro_f1);
        if improved {
            best = Some(Snapshot::take(&model));
        }
        if stop {
            break;
        }
    }

    let stopped_early = log.len() < cfg.epochs;
    if let Some(snapshot) = best {
        snapshot.restore(&mut model);
    }
    Ok((
        model,
        TrainLog { epochs: log, best_epoch: stopping.best_epoch, stopped_early },
    ))
}

/// Input to feature extraction: source keys, labels, and precomputed
/// statistics for one image.
#[derive(Debug, Clone)]
pub struct ExtractInput {
    pub study_id: String,
    pub laterality: Laterality,
    pub view: ViewKind,
    pub diag: u8,
    pub dens: u8,
    pub stats: StatsTensor,
}

/// One pooled feature vector per input, in input order, labels copied
/// through. Every input must carry the model's view tag.
pub fn extract_features(
    model: &ExtractorModel,
    inputs: &[ExtractInput],
) -> Result<Vec<FeatureRecord>, ExtractorError> {
    let mut records = Vec::with_capacity(inputs.len());
    for input in inputs {
        let tag = ViewTag { laterality: input.laterality, view: input.view };
        if tag != model.view_tag {
            return Err(ExtractorError::ViewTagMismatch { expected: model.view_tag, got: tag });
        }
        let out = forward(model, &input.stats)?;
        records.push(FeatureRecord {
            study_id: input.study_id.clone(),
            laterality: input.laterality,
            source: RowSource::Image(input.view),
            diag: input.diag,
            dens: input.dens,
            values: out.feature.iter().map(|&v| v as f32).collect(),
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Model persistence: key-value + dense-array container
// ---------------------------------------------------------------------------

pub const MODEL_MAGIC: [u8; 4] = *b"MXM1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelFileError {
    #[error("bad magic: not an extractor model file")]
    BadMagic,
    #[error("model format version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

fn write_kv(w: &mut impl Write, key: &str, value: &str) -> std::io::Result<()> {
    w.write_all(&(key.len() as u16).to_le_bytes())?;
    w.write_all(key.as_bytes())?;
    w.write_all(&(value.len() as u16).to_le_bytes())?;
    w.write_all(value.as_bytes())
}

fn write_array(w: &mut impl Write, name: &str, values: &[f64]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(values.len() as u64).to_le_bytes())?;
    for &v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Serialize a model: magic, version, key-value config section, then the
/// six weight arrays as little-endian f64. Loading reproduces predictions
/// bit-identically.
pub fn save_model(model: &ExtractorModel, path: impl AsRef<Path>) -> Result<(), ModelFileError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.write_all(&MODEL_MAGIC)?;
    buf.write_all(&MODEL_VERSION.to_le_bytes())?;
    let cfg = &model.config;
    let kvs: Vec<(&str, String)> = vec![
        ("view", model.view_tag.to_string()),
        ("k_diag", model.k_diag.to_string()),
        ("k_dens", model.k_dens.to_string()),
        ("grid_h", cfg.grid_h.to_string()),
        ("grid_w", cfg.grid_w.to_string()),
        ("channels", cfg.channels.to_string()),
        ("lr_max", cfg.lr_max.to_string()),
        ("lr_min", cfg.lr_min.to_string()),
        ("momentum", cfg.momentum.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("patience", cfg.patience.to_string()),
        ("batch_size", cfg.batch_size.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    buf.write_all(&(kvs.len() as u32).to_le_bytes())?;
    for (key, value) in &kvs {
        write_kv(&mut buf, key, value)?;
    }
    let arrays: [(&str, &Vec<f64>); 6] = [
        ("w1", &model.w1),
        ("b1", &model.b1),
        ("w_diag", &model.w_diag),
        ("b_diag", &model.b_diag),
        ("w_dens", &model.w_dens),
        ("b_dens", &model.b_dens),
    ];
    buf.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, values) in arrays {
        write_array(&mut buf, name, values)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_exact_bytes(r: &mut impl Read, len: usize) -> Result<Vec<u8>, ModelFileError> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_string(r: &mut impl Read) -> Result<String, ModelFileError> {
    let mut len_bytes = [0u8; 2];
    r.read_exact(&mut len_bytes)?;
    let bytes = read_exact_bytes(r, u16::from_le_bytes(len_bytes) as usize)?;
    String::from_utf8(bytes).map_err(|_| ModelFileError::Corrupt("non-UTF-8 string".into()))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ExtractorModel, ModelFileError> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MODEL_MAGIC {
        return Err(ModelFileError::BadMagic);
    }
    let mut version_bytes = [0u8; 4];
    r.read_exact(&mut version_bytes)?;
    let version = u32::from_le_bytes(version_bytes);
    if version != MODEL_VERSION {
        return Err(ModelFileError::Version { found: version, expected: MODEL_VERSION });
    }
    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)?;
    let n_kv = u32::from_le_bytes(count_bytes);
    let mut kvs = std::collections::BTreeMap::new();
    for _ in 0..n_kv {
        let key = read_string(&mut r)?;
        let value = read_string(&mut r)?;
        kvs.insert(key, value);
    }
    let get = |key: &str| -> Result<&String, ModelFileError> {
        kvs.get(key).ok_or_else(|| ModelFileError::Corrupt(format!("missing key `{key}`")))
    };
    let parse_usize = |key: &str| -> Result<usize, ModelFileError> {
        get(key)?
            .parse()
            .map_err(|_| ModelFileError::Corrupt(format!("bad integer for `{key}`")))
    };
    let parse_f64 = |key: &str| -> Result<f64, ModelFileError> {
        get(key)?
            .parse()
            .map_err(|_| ModelFileError::Corrupt(format!("bad float for `{key}`")))
    };
    let view_tag: ViewTag = get("view")?
        .parse()
        .map_err(|_| ModelFileError::Corrupt("bad view tag".into()))?;
    let config = ExtractorConfig {
        grid_h: parse_usize("grid_h")?,
        grid_w: parse_usize("grid_w")?,
        channels: parse_usize("channels")?,
        lr_max: parse_f64("lr_max")?,
        lr_min: parse_f64("lr_min")?,
        momentum: parse_f64("momentum")?,
        epochs: parse_usize("epochs")?,
        patience: parse_usize("patience")?,
        batch_size: parse_usize("batch_size")?,
        seed: parse_usize("seed")? as u64,
    };
    let k_diag = parse_usize("k_diag")?;
    let k_dens = parse_usize("k_dens")?;

    r.read_exact(&mut count_bytes)?;
    let n_arrays = u32::from_le_bytes(count_bytes);
    let mut arrays: std::collections::BTreeMap<String, Vec<f64>> = std::collections::BTreeMap::new();
    for _ in 0..n_arrays {
        let name = read_string(&mut r)?;
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let len = u64::from_le_bytes(len_bytes) as usize;
        let mut values = Vec::with_capacity(len);
        let mut value_bytes = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut value_bytes)?;
            values.push(f64::from_le_bytes(value_bytes));
        }
        arrays.insert(name, values);
    }
    let mut take = |name: &str, expected: usize| -> Result<Vec<f64>, ModelFileError> {
        let values = arrays
            .remove(name)
            .ok_or_else(|| ModelFileError::Corrupt(format!("missing array `{name}`")))?;
        if values.len() != expected {
            return Err(ModelFileError::Corrupt(format!(
                "array `{name}` has {} values, expected {expected}",
                values.len()
            )));
        }
        Ok(values)
    };
    let c = config.channels;
    Ok(ExtractorModel {
        w1: take("w1", STATS_PER_CELL * c)?,
        b1: take("b1", c)?,
        w_diag: take("w_diag", c * k_diag)?,
        b_diag: take("b_diag", k_diag)?,
        w_dens: take("w_dens", c * k_dens)?,
        b_dens: take("b_dens", k_dens)?,
        config,
        view_tag,
        k_diag,
        k_dens,
    })
}
