//! The 3D interpreter: heatmaps in, `(alpha, omega, t, log f)` out.
//!
//! Stage II regresses standardized parameters on synthetic data. Stage III
//! fine-tunes the same network on 2D labels only, back-propagating the
//! reprojection error through the projection layer.

use std::borrow::Cow;

use nalgebra::Vector3;
use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{MlpModel, Normalization, Real};
use super::optim::{clip_grad_norm, Adam};
use super::refiner::RefinerModel;
use super::{mix_seed, split_indices, EpochStats, TrainConfig};
use crate::camera::{camera_points_jacobian, CameraPose, Keypoints2D, DEPTH_EPSILON, POSE_DOF};
use crate::error::{Error, Result};
use crate::heatmap::{corrupt_slice, GridGeometry, HeatmapStack, NoiseConfig};
use crate::skeleton::{SkeletonSpec, StructParams};
use crate::synth::{Dataset, Dataset2D};

const EVAL_BATCH: usize = 256;

/// Anything that can hand out heatmap stacks by index.
pub(crate) trait HeatmapSource: Sync {
    fn stack(&self, i: usize) -> Cow<'_, HeatmapStack>;
}

impl HeatmapSource for Dataset {
    fn stack(&self, i: usize) -> Cow<'_, HeatmapStack> {
        self.heatmaps(i)
    }
}

impl HeatmapSource for Dataset2D {
    fn stack(&self, i: usize) -> Cow<'_, HeatmapStack> {
        self.heatmaps(i)
    }
}

/// Flattened, optionally corrupted and refined heatmaps, one row per index.
pub(crate) fn assemble_batch(
    source: &dyn HeatmapSource,
    indices: &[usize],
    noise: &dyn Fn(usize) -> Option<NoiseConfig>,
    refiner: Option<&RefinerModel>,
) -> Array2<f32> {
    let first = source.stack(indices[0]);
    let width = first.as_slice().len();
    let cells = first.geometry().cells();
    let mut batch = Array2::<f32>::zeros((indices.len(), width));
    for (row, &idx) in indices.iter().enumerate() {
        let hm = source.stack(idx);
        let mut dst = batch.row_mut(row);
        let dst = dst.as_slice_mut().expect("rows are contiguous");
        dst.copy_from_slice(hm.as_slice());
        if let Some(cfg) = noise(idx) {
            corrupt_slice(dst, cells, &cfg);
        }
    }
    match refiner {
        Some(r) => r.refine_batch(batch.view()),
        None => batch,
    }
}

fn cast_batch<F: Real>(batch: Array2<f32>) -> Array2<F> {
    batch.mapv(|v| F::of(v as f64))
}

/// The learned interpreter and the grid it was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpreter<F = f32> {
    pub mlp: MlpModel<F>,
    pub geometry: GridGeometry,
    pub n_bases: usize,
    /// Whether inputs are passed through the refiner first.
    pub refined_inputs: bool,
}

impl<F: Real> Interpreter<F> {
    pub fn new(mlp: MlpModel<F>, geometry: GridGeometry, n_bases: usize, refined_inputs: bool) -> Result<Self> {
        if mlp.output_width() != n_bases + POSE_DOF {
            return Err(Error::argument(format!(
                "output width {} does not match {} structural weights plus pose",
                mlp.output_width(),
                n_bases
            )));
        }
        Ok(Self {
            mlp,
            geometry,
            n_bases,
            refined_inputs,
        })
    }

    pub fn cast<G: Real>(&self) -> Interpreter<G> {
        Interpreter {
            mlp: self.mlp.cast(),
            geometry: self.geometry,
            n_bases: self.n_bases,
            refined_inputs: self.refined_inputs,
        }
    }

    /// Converts one de-normalized output row into parameters.
    pub fn decode_output(&self, row: &[f64]) -> (StructParams, CameraPose) {
        let k = self.n_bases;
        let params = StructParams::new(row[..k].to_vec());
        let pose = CameraPose {
            omega: Vector3::new(row[k], row[k + 1], row[k + 2]),
            t: Vector3::new(row[k + 3], row[k + 4], row[k + 5]),
            // the head predicts log f
            f: row[k + 6].exp(),
        };
        (params, pose)
    }

    /// Predicts parameters for a batch of raw (already refined if required)
    /// flattened heatmaps.
    pub fn predict_rows(&self, rows: ArrayView2<f32>) -> Vec<(StructParams, CameraPose)> {
        let mut out = Vec::with_capacity(rows.nrows());
        let mut start = 0;
        while start < rows.nrows() {
            let end = (start + EVAL_BATCH).min(rows.nrows());
            let mut x: Array2<F> = rows.slice(ndarray::s![start..end, ..]).mapv(|v| F::of(v as f64));
            self.mlp.normalize_inputs(&mut x);
            let raw = self.mlp.forward_normalized(x.view());
            let y = self.mlp.denormalize_outputs(&raw.view());
            out.extend(y.rows().into_iter().map(|r| self.decode_output(r.as_slice().unwrap())));
            start = end;
        }
        out
    }

    /// One forward pass on a heatmap stack.
    pub fn predict_params(&self, hm: &HeatmapStack) -> Result<(StructParams, CameraPose)> {
        if *hm.geometry() != self.geometry {
            return Err(Error::argument("heatmap geometry differs from the training geometry"));
        }
        if hm.as_slice().len() != self.mlp.input_width() {
            return Err(Error::argument("heatmap channel count differs from the training data"));
        }
        let row = ArrayView2::from_shape((1, hm.as_slice().len()), hm.as_slice()).expect("contiguous");
        Ok(self.predict_rows(row).remove(0))
    }
}

/// Predicts parameters for `indices` of a corpus, optionally corrupting
/// each stack first and passing it through a refiner. Results keep the
/// order of `indices`.
pub fn predict_corpus<F: Real>(
    interp: &Interpreter<F>,
    ds: &Dataset,
    indices: &[usize],
    noise: &(dyn Fn(usize) -> Option<NoiseConfig> + Sync),
    refiner: Option<&RefinerModel>,
) -> Result<Vec<(StructParams, CameraPose)>> {
    if ds.render().geometry != interp.geometry {
        return Err(Error::argument("corpus geometry differs from the training geometry"));
    }
    if interp.refined_inputs != refiner.is_some() {
        return Err(Error::argument("the interpreter was trained with a different refiner wiring"));
    }
    use rayon::prelude::*;
    let chunks: Vec<&[usize]> = indices.chunks(EVAL_BATCH).collect();
    let parts: Vec<Vec<(StructParams, CameraPose)>> = chunks
        .par_iter()
        .map(|chunk| {
            let batch = assemble_batch(ds, chunk, &|i| noise(i), refiner);
            interp.predict_rows(batch.view())
        })
        .collect();
    Ok(parts.into_iter().flatten().collect())
}

/// Target vector `[alpha, omega, t, ln f]`.
fn target_row(params: &StructParams, pose: &CameraPose) -> Vec<f64> {
    let mut row = params.alpha.clone();
    row.extend(pose.omega.iter());
    row.extend(pose.t.iter());
    row.push(pose.f.ln());
    row
}

fn output_weights(k: usize, groups: &[f64; 4]) -> Vec<f64> {
    let mut w = vec![groups[0]; k];
    w.extend([groups[1]; 3]);
    w.extend([groups[2]; 3]);
    w.push(groups[3]);
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Per-input mean with one pooled scale, from clean renders.
fn fit_input_norm(source: &dyn HeatmapSource, indices: &[usize], refiner: Option<&RefinerModel>) -> Normalization {
    let take: Vec<usize> = indices.iter().copied().take(2000).collect();
    let batch = assemble_batch(source, &take, &|_| None, refiner);
    let m = batch.nrows() as f64;
    let width = batch.ncols();
    let mut mean = vec![0.0; width];
    for row in batch.rows() {
        for (a, v) in mean.iter_mut().zip(row.iter()) {
            *a += *v as f64;
        }
    }
    mean.iter_mut().for_each(|a| *a /= m);
    let mut var = 0.0;
    for row in batch.rows() {
        for (mu, v) in mean.iter().zip(row.iter()) {
            var += (*v as f64 - mu).powi(2);
        }
    }
    let pooled = (var / (m * width as f64)).sqrt().max(1e-6);
    Normalization {
        mean,
        scale: vec![pooled; width],
    }
}

/// Stage-II output: the best-validation model and its loss trace.
#[derive(Debug, Clone)]
pub struct Stage2Report<F> {
    pub interpreter: Interpreter<F>,
    pub trace: Vec<EpochStats>,
    /// Validation loss of the untrained network.
    pub initial_val_loss: f64,
    pub best_epoch: usize,
}

pub(crate) fn noise_for(levels: &[f64], seed: u64) -> Option<NoiseConfig> {
    if levels.is_empty() {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let level = levels[rng.random_range(0..levels.len())];
    (level > 0.0).then(|| NoiseConfig { level, seed: rng.random() })
}

/// Weighted mean squared error of standardized parameter predictions.
fn parameter_loss<F: Real>(
    model: &MlpModel<F>,
    source: &Dataset,
    indices: &[usize],
    targets: &Array2<F>,
    weights: &[f64],
    noise: &dyn Fn(usize) -> Option<NoiseConfig>,
    refiner: Option<&RefinerModel>,
) -> f64 {
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let mut x: Array2<F> = cast_batch(assemble_batch(source, chunk, noise, refiner));
        model.normalize_inputs(&mut x);
        let out = model.forward_normalized(x.view());
        for (row, &idx) in chunk.iter().enumerate() {
            for (j, w) in weights.iter().enumerate() {
                let d = (out[[row, j]] - targets[[idx, j]]).as_f64();
                total += w * d * d;
            }
        }
    }
    total / indices.len() as f64
}

/// Trains the interpreter on synthetic heatmaps with parameter supervision.
///
/// Each training sample is corrupted with a salt-and-pepper level drawn from
/// `cfg.noise_levels`; validation samples use a fixed draw per index. The
/// returned model is the one with the lowest validation loss.
pub fn train_interpreter_stage2<F: Real>(
    ds: &Dataset,
    spec: &SkeletonSpec,
    refiner: Option<&RefinerModel>,
    cfg: &TrainConfig,
) -> Result<Stage2Report<F>> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::argument("training corpus is empty"));
    }
    if ds.spec.n_keypoints() != spec.n_keypoints() || ds.spec.n_bases() != spec.n_bases() {
        return Err(Error::argument("dataset and skeleton spec disagree on N or K"));
    }
    let k = spec.n_bases();
    let (train_idx, val_idx) = split_indices(ds.len(), cfg.val_fraction);

    let raw_targets: Vec<Vec<f64>> = ds.records.iter().map(|r| target_row(&r.params, &r.pose)).collect();
    let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| raw_targets[i].clone()).collect();
    let target_norm = Normalization::fit(&train_rows);
    let out_width = k + POSE_DOF;
    let targets = Array2::from_shape_fn((ds.len(), out_width), |(i, j)| {
        F::of((raw_targets[i][j] - target_norm.mean[j]) / target_norm.scale[j])
    });

    let input_width = ds.heatmaps(0).as_slice().len();
    let mut widths = vec![input_width];
    widths.extend(&cfg.hidden_widths);
    widths.push(out_width);
    let mut mlp = MlpModel::<F>::new(&widths, mix_seed(&[cfg.seed, 1]))?;
    mlp.input_norm = fit_input_norm(ds, &train_idx, refiner);
    mlp.target_norm = target_norm;

    let weights = output_weights(k, &cfg.group_weights);
    let levels = cfg.noise_levels.clone();
    let val_seed = mix_seed(&[cfg.seed, 2]);
    let val_noise = |idx: usize| noise_for(&levels, mix_seed(&[val_seed, idx as u64]));
    let monitor: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let val_loss = |m: &MlpModel<F>| parameter_loss(m, ds, monitor, &targets, &weights, &val_noise, refiner);

    let initial_val_loss = val_loss(&mlp);
    let mut best = (initial_val_loss, mlp.clone(), 0usize);
    let mut opt = Adam::new(&mlp, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let epoch_seed = mix_seed(&[cfg.seed, 3, epoch as u64]);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let noise = |idx: usize| noise_for(&levels, mix_seed(&[epoch_seed, idx as u64]));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let mut x: Array2<F> = cast_batch(assemble_batch(ds, batch, &noise, refiner));
            mlp.normalize_inputs(&mut x);
            let cache = mlp.forward_cached(x);
            let b = batch.len() as f64;
            let mut d_out = Array2::<F>::zeros((batch.len(), out_width));
            let mut loss = 0.0;
            for (row, &idx) in batch.iter().enumerate() {
                for (j, w) in weights.iter().enumerate() {
                    let d = cache.output[[row, j]] - targets[[idx, j]];
                    loss += w * d.as_f64() * d.as_f64();
                    d_out[[row, j]] = d * F::of(2.0 * w / b);
                }
            }
            loss /= b;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            sum += loss * b;
            let (mut grads, _) = mlp.backward(&cache, d_out, false);
            if !grads.is_finite() {
                return Err(Error::Divergence { step, loss: f64::NAN });
            }
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut mlp, &grads);
        }
        opt.learning_rate *= cfg.lr_decay;
        let train_loss = sum / order.len() as f64;
        let vl = val_loss(&mlp);
        if !vl.is_finite() || !mlp.is_finite() {
            return Err(Error::Divergence { step, loss: vl });
        }
        log::info!("stage2 epoch {epoch}: train {train_loss:.5} val {vl:.5}");
        trace.push(EpochStats {
            epoch,
            train_loss,
            val_loss: vl,
        });
        if vl < best.0 {
            best = (vl, mlp.clone(), epoch);
        }
    }
    Ok(Stage2Report {
        interpreter: Interpreter::new(best.1, ds.render().geometry, k, refiner.is_some())?,
        trace,
        initial_val_loss,
        best_epoch: best.2,
    })
}

/// Fine-tuning settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Weight of the depth hinge for keypoints behind the barrier.
    pub barrier_weight: f64,
    /// Trailing fraction of the corpus used for the before/after report.
    pub holdout_fraction: f64,
    pub noise_levels: Vec<f64>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            barrier_weight: 1.0,
            holdout_fraction: 0.1,
            noise_levels: vec![0.0],
        }
    }
}

/// Mean 2D reprojection error over visible keypoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReprojectionReport {
    /// Mean Euclidean distance in image units, over instances with valid depth.
    pub mean_error: f64,
    pub instances: usize,
    /// Instances whose predicted pose put a keypoint behind the depth barrier.
    pub domain_failures: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport<F> {
    pub interpreter: Interpreter<F>,
    pub before: ReprojectionReport,
    pub after: ReprojectionReport,
    pub trace: Vec<EpochStats>,
}

/// Per-sample reprojection loss and its gradient with respect to
/// `[alpha, omega, t, f]`.
///
/// Visible keypoints in front of the barrier contribute the mean squared 2D
/// distance; any keypoint at depth below [`DEPTH_EPSILON`] contributes
/// `barrier_weight * (DEPTH_EPSILON - z)^2` instead.
fn sample_loss_grad(
    spec: &SkeletonSpec,
    params: &StructParams,
    pose: &CameraPose,
    label: &Keypoints2D,
    visible: &[bool],
    barrier_weight: f64,
) -> (f64, Vec<f64>) {
    let (p, dp) = camera_points_jacobian(spec, params, pose).expect("parameter count matches spec");
    let n_theta = dp.ncols();
    let n_vis = visible.iter().filter(|&&v| v).count().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; n_theta];
    for i in 0..p.ncols() {
        let (px, py, pz) = (p[(0, i)], p[(1, i)], p[(2, i)]);
        if pz < DEPTH_EPSILON {
            let gap = DEPTH_EPSILON - pz;
            loss += barrier_weight * gap * gap;
            for (c, g) in grad.iter_mut().enumerate() {
                *g += -2.0 * barrier_weight * gap * dp[(3 * i + 2, c)];
            }
            continue;
        }
        if !visible[i] {
            continue;
        }
        let inv = 1.0 / pz;
        let x = pose.f * px * inv;
        let y = pose.f * py * inv;
        let ex = x - label.coords[(0, i)];
        let ey = y - label.coords[(1, i)];
        loss += (ex * ex + ey * ey) / n_vis;
        let (cx, cy) = (2.0 * ex / n_vis, 2.0 * ey / n_vis);
        for (c, g) in grad.iter_mut().enumerate().take(n_theta - 1) {
            let d0 = dp[(3 * i, c)];
            let d1 = dp[(3 * i + 1, c)];
            let d2 = dp[(3 * i + 2, c)];
            let dx = pose.f * inv * (d0 - px * inv * d2);
            let dy = pose.f * inv * (d1 - py * inv * d2);
            *g += cx * dx + cy * dy;
        }
        grad[n_theta - 1] += cx * px * inv + cy * py * inv;
    }
    (loss, grad)
}

/// Mean stage-III loss over a batch of raw flattened heatmaps.
pub fn reprojection_loss<F: Real>(
    interp: &Interpreter<F>,
    spec: &SkeletonSpec,
    inputs: &Array2<F>,
    labels: &[(&Keypoints2D, &[bool])],
    barrier_weight: f64,
) -> f64 {
    let mut x = inputs.clone();
    interp.mlp.normalize_inputs(&mut x);
    let raw = interp.mlp.forward_normalized(x.view());
    let y = interp.mlp.denormalize_outputs(&raw.view());
    let mut total = 0.0;
    for (row, (label, vis)) in y.rows().into_iter().zip(labels) {
        let (params, pose) = interp.decode_output(row.as_slice().unwrap());
        total += sample_loss_grad(spec, &params, &pose, label, vis, barrier_weight).0;
    }
    total / labels.len() as f64
}

/// Mean stage-III loss and its gradient with respect to every network
/// parameter, chained through the projection layer.
pub fn reprojection_loss_grad<F: Real>(
    interp: &Interpreter<F>,
    spec: &SkeletonSpec,
    inputs: &Array2<F>,
    labels: &[(&Keypoints2D, &[bool])],
    barrier_weight: f64,
) -> (f64, super::mlp::Gradients<F>) {
    let mlp = &interp.mlp;
    let mut x = inputs.clone();
    mlp.normalize_inputs(&mut x);
    let cache = mlp.forward_cached(x);
    let y = mlp.denormalize_outputs(&cache.output.view());
    let b = labels.len() as f64;
    let width = mlp.output_width();
    let mut d_out = Array2::<F>::zeros((labels.len(), width));
    let mut total = 0.0;
    for (row, (label, vis)) in labels.iter().enumerate() {
        let out = y.row(row);
        let (params, pose) = interp.decode_output(out.as_slice().unwrap());
        let (loss, g) = sample_loss_grad(spec, &params, &pose, label, vis, barrier_weight);
        total += loss;
        for j in 0..width {
            // d theta_j / d raw_j: the scale, times f for the log-focal output
            let mut chain = mlp.target_norm.scale[j];
            if j == width - 1 {
                chain *= pose.f;
            }
            d_out[[row, j]] = F::of(g[j] * chain / b);
        }
    }
    let (grads, _) = mlp.backward(&cache, d_out, false);
    (total / b, grads)
}

/// Mean reprojection error of the interpreter's predictions on a 2D corpus.
pub fn reprojection_error_report<F: Real>(
    interp: &Interpreter<F>,
    spec: &SkeletonSpec,
    data: &Dataset2D,
    indices: &[usize],
    refiner: Option<&RefinerModel>,
) -> ReprojectionReport {
    let mut sum = 0.0;
    let mut ok = 0usize;
    let mut failures = 0usize;
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = assemble_batch(data, chunk, &|_| None, refiner);
        let preds = interp.predict_rows(batch.view());
        for (&idx, (params, pose)) in chunk.iter().zip(preds) {
            let obs = &data.observations[idx];
            match crate::camera::reproject(spec, &params, &pose) {
                Ok(x) => {
                    let mut d = 0.0;
                    let mut n = 0usize;
                    for i in 0..x.n_keypoints() {
                        if obs.visibility[i] {
                            d += (x.coords.column(i) - obs.x.coords.column(i)).norm();
                            n += 1;
                        }
                    }
                    sum += d / n.max(1) as f64;
                    ok += 1;
                }
                Err(_) => failures += 1,
            }
        }
    }
    ReprojectionReport {
        mean_error: if ok > 0 { sum / ok as f64 } else { f64::INFINITY },
        instances: indices.len(),
        domain_failures: failures,
    }
}

/// Fine-tunes the interpreter with 2D supervision through the projection layer.
pub fn finetune_projection_stage3<F: Real>(
    interp: &Interpreter<F>,
    data: &Dataset2D,
    spec: &SkeletonSpec,
    refiner: Option<&RefinerModel>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport<F>> {
    if data.is_empty() {
        return Err(Error::argument("fine-tuning corpus is empty"));
    }
    if data.render.geometry != interp.geometry {
        return Err(Error::argument("fine-tuning heatmap geometry differs from the training geometry"));
    }
    if interp.n_bases != spec.n_bases() {
        return Err(Error::argument("interpreter and spec disagree on K"));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::Config("fine-tuning needs a positive batch size and learning rate".into()));
    }
    let (train_idx, hold_idx) = split_indices(data.len(), cfg.holdout_fraction);
    let report_idx: &[usize] = if hold_idx.is_empty() { &train_idx } else { &hold_idx };
    let before = reprojection_error_report(interp, spec, data, report_idx, refiner);

    let mut model = interp.clone();
    let mut opt = Adam::new(&model.mlp, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut order = train_idx.clone();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let levels = cfg.noise_levels.clone();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = mix_seed(&[cfg.seed, 7, epoch as u64]);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let noise = |idx: usize| noise_for(&levels, mix_seed(&[epoch_seed, idx as u64]));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let x: Array2<F> = cast_batch(assemble_batch(data, batch, &noise, refiner));
            let labels: Vec<(&Keypoints2D, &[bool])> = batch
                .iter()
                .map(|&i| (&data.observations[i].x, data.observations[i].visibility.as_slice()))
                .collect();
            let (loss, mut grads) = reprojection_loss_grad(&model, spec, &x, &labels, cfg.barrier_weight);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            sum += loss * batch.len() as f64;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.mlp, &grads);
        }
        let hold = reprojection_error_report(&model, spec, data, report_idx, refiner);
        log::info!("stage3 epoch {epoch}: train {:.6} held-out error {:.6}", sum / order.len() as f64, hold.mean_error);
        trace.push(EpochStats {
            epoch,
            train_loss: sum / order.len() as f64,
            val_loss: hold.mean_error,
        });
    }
    let after = reprojection_error_report(&model, spec, data, report_idx, refiner);
    Ok(FinetuneReport {
        interpreter: model,
        before,
        after,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, RenderSettings, SamplingRanges};

    fn small_setup(count: usize, seed: u64) -> (SkeletonSpec, Dataset) {
        let spec = SkeletonSpec::tetrapod();
        let render = RenderSettings {
            geometry: GridGeometry::new(16, 12, 0.125).unwrap(),
            sigma: 1.0,
        };
        let ranges = SamplingRanges::for_spec(&spec);
        let ds = generate_dataset(&spec, &ranges, &render, count, seed, false).unwrap();
        (spec, ds)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            hidden_widths: vec![64, 32],
            epochs: 5,
            noise_levels: vec![0.0],
            ..TrainConfig::default()
        }
    }

    #[test]
    fn output_decoding_exponentiates_focal_length() {
        let mlp = MlpModel::<f64>::new(&[4, 2 + POSE_DOF], 0).unwrap();
        let interp = Interpreter::new(mlp, GridGeometry::default(), 2, false).unwrap();
        let (p, pose) = interp.decode_output(&[1.0, 0.2, 0.1, 0.2, 0.3, 0.0, 0.1, 4.0, 0.5f64.ln()]);
        assert_eq!(p.alpha, vec![1.0, 0.2]);
        assert!((pose.f - 0.5).abs() < 1e-15);
        assert_eq!(pose.t.z, 4.0);
    }

    #[test]
    fn wrong_output_width_is_rejected() {
        let mlp = MlpModel::<f64>::new(&[4, 5], 0).unwrap();
        assert!(Interpreter::new(mlp, GridGeometry::default(), 2, false).is_err());
    }

    #[test]
    fn empty_or_mismatched_inputs_are_rejected() {
        let (spec, ds) = small_setup(10, 0);
        let chair = SkeletonSpec::chair();
        assert!(train_interpreter_stage2::<f32>(&ds, &chair, None, &small_cfg()).is_err());
        let report = train_interpreter_stage2::<f32>(&ds, &spec, None, &TrainConfig { epochs: 1, ..small_cfg() }).unwrap();
        let hm = HeatmapStack::zeros(GridGeometry::default(), 4);
        assert!(report.interpreter.predict_params(&hm).is_err());
    }

    #[test]
    fn memorizes_a_single_sample() {
        let (spec, ds) = small_setup(1, 3);
        let mut ds = ds;
        let rec = ds.records[0].clone();
        ds.records = vec![rec; 32];
        let cfg = TrainConfig {
            epochs: 60,
            val_fraction: 0.0,
            lr_decay: 1.0,
            ..small_cfg()
        };
        let report = train_interpreter_stage2::<f32>(&ds, &spec, None, &cfg).unwrap();
        let last = report.trace.last().unwrap();
        assert!(last.train_loss < 1e-3, "{:?}", report.trace);
        let (p, pose) = report.interpreter.predict_params(&ds.heatmaps(0)).unwrap();
        assert!((p.alpha[1] - ds.records[0].params.alpha[1]).abs() < 1e-2);
        assert!((pose.f - ds.records[0].pose.f).abs() < 1e-2);
    }

    #[test]
    fn training_is_deterministic_and_checkpoints_monotone() {
        let (spec, ds) = small_setup(200, 5);
        let cfg = TrainConfig {
            noise_levels: vec![0.0, 0.1],
            ..small_cfg()
        };
        let a = train_interpreter_stage2::<f32>(&ds, &spec, None, &cfg).unwrap();
        let b = train_interpreter_stage2::<f32>(&ds, &spec, None, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.interpreter, b.interpreter);
        // validation loss of the successive best checkpoints never increases
        let mut best = a.initial_val_loss;
        for e in &a.trace {
            best = best.min(e.val_loss);
        }
        let chosen = if a.best_epoch == 0 { a.initial_val_loss } else { a.trace[a.best_epoch - 1].val_loss };
        assert_eq!(chosen, best);
    }

    #[test]
    fn prediction_is_deterministic() {
        let (spec, ds) = small_setup(50, 6);
        let report = train_interpreter_stage2::<f32>(&ds, &spec, None, &TrainConfig { epochs: 1, ..small_cfg() }).unwrap();
        let hm = ds.heatmaps(3);
        assert_eq!(
            report.interpreter.predict_params(&hm).unwrap(),
            report.interpreter.predict_params(&hm).unwrap()
        );
    }

    #[test]
    fn zero_epoch_finetune_is_a_no_op() {
        let (spec, ds) = small_setup(40, 8);
        let report = train_interpreter_stage2::<f32>(&ds, &spec, None, &TrainConfig { epochs: 1, ..small_cfg() }).unwrap();
        let ft = finetune_projection_stage3(
            &report.interpreter,
            &ds.to_2d_only(),
            &spec,
            None,
            &FinetuneConfig {
                epochs: 0,
                ..FinetuneConfig::default()
            },
        )
        .unwrap();
        assert_eq!(ft.interpreter, report.interpreter);
        assert_eq!(ft.before, ft.after);
    }

    #[test]
    fn barrier_penalizes_points_behind_the_camera() {
        let spec = SkeletonSpec::tetrapod();
        let params = StructParams::mean(2);
        let pose = CameraPose {
            omega: Vector3::zeros(),
            t: Vector3::new(0.0, 0.0, -1.0),
            f: 1.0,
        };
        let label = Keypoints2D::new(nalgebra::Matrix2xX::zeros(4));
        let (loss, grad) = sample_loss_grad(&spec, &params, &pose, &label, &[true; 4], 1.0);
        assert!(loss > 0.0 && loss.is_finite());
        // pushing the object away from the camera lowers the penalty
        assert!(grad[2 + 5] < 0.0);
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let spec = SkeletonSpec::chair();
        let params = StructParams::new(vec![1.0, 0.3, -0.2, 0.1]);
        let pose = CameraPose {
            omega: Vector3::new(0.3, -0.5, 0.2),
            t: Vector3::new(0.1, -0.2, 3.0),
            f: 1.7,
        };
        let mut label = crate::camera::reproject(&spec, &params, &pose).unwrap();
        label.coords.add_scalar_mut(0.05);
        let mut vis = vec![true; 10];
        vis[3] = false;
        let (_, g) = sample_loss_grad(&spec, &params, &pose, &label, &vis, 1.0);
        let theta = crate::camera::pack_theta(&params, &pose);
        let h = 1e-6;
        for j in 0..theta.len() {
            let mut tp = theta.clone();
            tp[j] += h;
            let mut tm = theta.clone();
            tm[j] -= h;
            let (ap, pp) = crate::camera::unpack_theta(tp.as_slice(), 4);
            let (am, pm) = crate::camera::unpack_theta(tm.as_slice(), 4);
            let fd = (sample_loss_grad(&spec, &ap, &pp, &label, &vis, 1.0).0
                - sample_loss_grad(&spec, &am, &pm, &label, &vis, 1.0).0)
                / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-6 * fd.abs().max(g[j].abs()).max(1e-3), "j={j} fd={fd} g={}", g[j]);
        }
    }
}
