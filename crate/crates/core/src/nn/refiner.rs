//! Heatmap refiner: a bottleneck network that maps corrupted heatmaps back
//! towards clean ones before they reach the interpreter.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::interpreter::{assemble_batch, noise_for};
use super::mlp::{MlpModel, Normalization};
use super::optim::{clip_grad_norm, Adam};
use super::{mix_seed, split_indices, EpochStats};
use crate::error::{Error, Result};
use crate::heatmap::{GridGeometry, HeatmapStack, NoiseConfig, STANDARD_NOISE_LEVELS};
use crate::synth::Dataset;

/// Refiner architecture and optimization settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Inputs wider than this are first reduced by a fixed random projection.
    pub projection_threshold: usize,
    pub projection_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub val_fraction: f64,
    pub noise_levels: Vec<f64>,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: 0.9,
            clip_norm: 5.0,
            seed: 0,
            projection_threshold: 4096,
            projection_dim: 1024,
            hidden_widths: vec![256, 64, 256],
            val_fraction: 0.05,
            noise_levels: STANDARD_NOISE_LEVELS.to_vec(),
        }
    }
}

impl RefinerConfig {
    /// The full-width `8192 / 4096 / 8192` bottleneck on unprojected heatmaps.
    pub fn large_scale() -> Self {
        Self {
            hidden_widths: vec![8192, 4096, 8192],
            projection_threshold: usize::MAX,
            ..Self::default()
        }
    }

    /// Layer widths for heatmaps of `width` values, and whether the input is
    /// projected first. Fails when no hidden layer is narrower than the input.
    pub fn network_widths(&self, width: usize) -> Result<(Vec<usize>, bool)> {
        let projected = width > self.projection_threshold;
        let in_width = if projected { self.projection_dim } else { width };
        let mut widths = vec![in_width];
        widths.extend(&self.hidden_widths);
        widths.push(width);
        if self.hidden_widths.iter().all(|&h| h >= in_width) {
            return Err(Error::Config("refiner needs a hidden layer narrower than its input".into()));
        }
        Ok((widths, projected))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.projection_dim == 0 || self.hidden_widths.contains(&0) {
            return Err(Error::Config("refiner sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("refiner learning rate, decay and clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        if self.noise_levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("noise levels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Gaussian random projection regenerated from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedProjection {
    pub seed: u64,
    pub in_dim: usize,
    pub out_dim: usize,
    matrix: Array2<f32>,
}

impl FixedProjection {
    pub fn new(seed: u64, in_dim: usize, out_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (out_dim as f64).sqrt();
        let matrix = Array2::from_shape_simple_fn((in_dim, out_dim), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * scale) as f32
        });
        Self {
            seed,
            in_dim,
            out_dim,
            matrix,
        }
    }

    pub fn apply(&self, x: ArrayView2<f32>) -> Array2<f32> {
        x.dot(&self.matrix)
    }
}

/// A trained refiner.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinerModel {
    pub geometry: GridGeometry,
    pub n_channels: usize,
    pub projection: Option<FixedProjection>,
    pub mlp: MlpModel<f32>,
}

impl RefinerModel {
    pub fn new(
        geometry: GridGeometry,
        n_channels: usize,
        projection: Option<FixedProjection>,
        mlp: MlpModel<f32>,
    ) -> Result<Self> {
        let width = geometry.cells() * n_channels;
        let expect_in = projection.as_ref().map_or(width, |p| p.out_dim);
        if projection.as_ref().is_some_and(|p| p.in_dim != width) {
            return Err(Error::argument("projection input width differs from the heatmap size"));
        }
        if mlp.input_width() != expect_in || mlp.output_width() != width {
            return Err(Error::argument("refiner network widths do not match the heatmap size"));
        }
        let narrowest = mlp.widths()[1..mlp.layers.len()].iter().copied().min().unwrap_or(width);
        if narrowest >= expect_in {
            return Err(Error::argument("refiner needs a hidden layer narrower than its input"));
        }
        Ok(Self {
            geometry,
            n_channels,
            projection,
            mlp,
        })
    }

    fn features(&self, batch: ArrayView2<f32>) -> Array2<f32> {
        let mut x = match &self.projection {
            Some(p) => p.apply(batch),
            None => batch.to_owned(),
        };
        self.mlp.normalize_inputs(&mut x);
        x
    }

    /// Refines flattened heatmaps, one per row; outputs lie in `[0, 1]`.
    pub fn refine_batch(&self, batch: ArrayView2<f32>) -> Array2<f32> {
        let mut out = Array2::zeros((batch.nrows(), batch.ncols()));
        for (src, mut dst) in batch
            .axis_chunks_iter(ndarray::Axis(0), 256)
            .zip(out.axis_chunks_iter_mut(ndarray::Axis(0), 256))
        {
            let y = self.mlp.forward_normalized(self.features(src).view());
            // targets are stored unnormalized, so raw outputs are heatmap values
            ndarray::Zip::from(&mut dst).and(&y).for_each(|d, &v| *d = v.clamp(0.0, 1.0));
        }
        out
    }
}

/// Refines a single heatmap stack.
pub fn refine_heatmaps(model: &RefinerModel, hm: &HeatmapStack) -> Result<HeatmapStack> {
    if *hm.geometry() != model.geometry || hm.n_channels() != model.n_channels {
        return Err(Error::argument("heatmap layout differs from the refiner's training data"));
    }
    let row = ArrayView2::from_shape((1, hm.as_slice().len()), hm.as_slice()).expect("contiguous");
    let out = model.refine_batch(row);
    HeatmapStack::from_data(model.geometry, model.n_channels, out.into_raw_vec_and_offset().0)
}

#[derive(Debug, Clone)]
pub struct RefinerReport {
    pub model: RefinerModel,
    pub trace: Vec<EpochStats>,
}

fn refiner_loss(
    model: &RefinerModel,
    ds: &Dataset,
    idx: &[usize],
    noise: &dyn Fn(usize) -> Option<NoiseConfig>,
) -> f64 {
    let mut total = 0.0;
    for chunk in idx.chunks(256) {
        let noisy = assemble_batch(ds, chunk, noise, None);
        let clean = assemble_batch(ds, chunk, &|_| None, None);
        let y = model.mlp.forward_normalized(model.features(noisy.view()).view());
        total += (&y - &clean).mapv(|v| (v as f64).powi(2)).sum() / clean.ncols() as f64;
    }
    total / idx.len() as f64
}

/// Trains the refiner to undo salt-and-pepper corruption on rendered heatmaps.
pub fn train_refiner(ds: &Dataset, cfg: &RefinerConfig) -> Result<RefinerReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::argument("refiner corpus is empty"));
    }
    let geometry = ds.render().geometry;
    let n_channels = ds.spec.n_keypoints();
    let width = geometry.cells() * n_channels;
    let (widths, projected) = cfg.network_widths(width)?;
    let projection = projected.then(|| FixedProjection::new(mix_seed(&[cfg.seed, 11]), width, cfg.projection_dim));
    let mut mlp = MlpModel::<f32>::new(&widths, mix_seed(&[cfg.seed, 12]))?;
    mlp.target_norm = Normalization::identity(width);

    let (train_idx, val_idx) = split_indices(ds.len(), cfg.val_fraction);
    // input standardization from clean, projected heatmaps
    let sample: Vec<usize> = train_idx.iter().copied().take(2000).collect();
    let clean = assemble_batch(ds, &sample, &|_| None, None);
    let feats = match &projection {
        Some(p) => p.apply(clean.view()),
        None => clean,
    };
    let rows: Vec<Vec<f64>> = feats.rows().into_iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
    mlp.input_norm = Normalization::fit(&rows);
    let mut model = RefinerModel::new(geometry, n_channels, projection, mlp)?;

    let levels = cfg.noise_levels.clone();
    let val_seed = mix_seed(&[cfg.seed, 13]);
    let monitor: &[usize] = if val_idx.is_empty() { &train_idx } else { &val_idx };
    let val_noise = |i: usize| noise_for(&levels, mix_seed(&[val_seed, i as u64]));

    let mut opt = Adam::new(&model.mlp, cfg.learning_rate, 0.9, 0.999, 1e-8);
    let mut best = (refiner_loss(&model, ds, monitor, &val_noise), model.mlp.clone());
    let mut trace = Vec::new();
    let mut order = train_idx.clone();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let epoch_seed = mix_seed(&[cfg.seed, 14, epoch as u64]);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let noise = |i: usize| noise_for(&levels, mix_seed(&[epoch_seed, i as u64]));
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let noisy = assemble_batch(ds, batch, &noise, None);
            let clean = assemble_batch(ds, batch, &|_| None, None);
            let cache = model.mlp.forward_cached(model.features(noisy.view()));
            let diff = &cache.output - &clean;
            let norm = (batch.len() * width) as f32;
            let loss = diff.mapv(|v| (v as f64).powi(2)).sum() / norm as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            sum += loss * batch.len() as f64;
            let d_out = diff * (2.0 / norm);
            let (mut grads, _) = model.mlp.backward(&cache, d_out, false);
            clip_grad_norm(&mut grads, cfg.clip_norm);
            opt.step(&mut model.mlp, &grads);
        }
        opt.learning_rate *= cfg.lr_decay;
        let val_loss = refiner_loss(&model, ds, monitor, &val_noise);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { step, loss: val_loss });
        }
        log::info!("refiner epoch {epoch}: val {val_loss:.6}");
        trace.push(EpochStats {
            epoch,
            train_loss: sum / order.len() as f64,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, model.mlp.clone());
        }
    }
    model.mlp = best.1;
    Ok(RefinerReport { model, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::SkeletonSpec;
    use crate::synth::{generate_dataset, RenderSettings, SamplingRanges};

    fn corpus(n: usize) -> Dataset {
        let spec = SkeletonSpec::tetrapod();
        let render = RenderSettings {
            geometry: GridGeometry::new(16, 12, 0.125).unwrap(),
            sigma: 1.0,
        };
        generate_dataset(&spec, &SamplingRanges::for_spec(&spec), &render, n, 1, false).unwrap()
    }

    #[test]
    fn projection_is_reproducible_from_its_seed() {
        assert_eq!(FixedProjection::new(4, 30, 8), FixedProjection::new(4, 30, 8));
        assert_ne!(FixedProjection::new(4, 30, 8), FixedProjection::new(5, 30, 8));
    }

    #[test]
    fn outputs_are_clamped_and_shaped() {
        let ds = corpus(60);
        let cfg = RefinerConfig {
            epochs: 2,
            projection_threshold: 256,
            projection_dim: 128,
            hidden_widths: vec![64, 16, 64],
            ..RefinerConfig::default()
        };
        let report = train_refiner(&ds, &cfg).unwrap();
        assert!(report.model.projection.is_some());
        let out = refine_heatmaps(&report.model, &ds.heatmaps(0)).unwrap();
        assert_eq!(out.as_slice().len(), ds.heatmaps(0).as_slice().len());
        assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        let wrong = HeatmapStack::zeros(GridGeometry::default(), 4);
        assert!(refine_heatmaps(&report.model, &wrong).is_err());
    }

    #[test]
    fn wide_bottleneck_is_rejected() {
        let g = GridGeometry::new(4, 4, 0.5).unwrap();
        let mlp = MlpModel::<f32>::new(&[16, 32, 16], 0).unwrap();
        assert!(RefinerModel::new(g, 1, None, mlp).is_err());
    }

    #[test]
    fn training_reduces_reconstruction_error() {
        let ds = corpus(300);
        let cfg = RefinerConfig {
            epochs: 8,
            hidden_widths: vec![128, 32, 128],
            noise_levels: vec![0.05],
            ..RefinerConfig::default()
        };
        let report = train_refiner(&ds, &cfg).unwrap();
        let first = report.trace.first().unwrap().val_loss;
        let last = report.trace.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert!(last < first, "{:?}", report.trace);
    }
}
