//! Learned components: the 3D interpreter and the heatmap refiner.

mod interpreter;
mod io;
mod mlp;
mod optim;
mod refiner;

use serde::{Deserialize, Serialize};

pub use interpreter::{
    finetune_projection_stage3, predict_corpus, reprojection_error_report, reprojection_loss, reprojection_loss_grad,
    train_interpreter_stage2, FinetuneConfig, FinetuneReport, Interpreter, ReprojectionReport, Stage2Report,
};
pub use io::{load_interpreter, load_refiner, save_interpreter, save_refiner, MODEL_FORMAT};
pub use mlp::{mlp_apply, mlp_grad, ForwardCache, Gradients, Layer, MlpModel, Normalization, Real};
pub use optim::{clip_grad_norm, Adam};
pub use refiner::{refine_heatmaps, train_refiner, FixedProjection, RefinerConfig, RefinerModel, RefinerReport};

use crate::error::{Error, Result};

/// One row of a loss trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Optimization settings shared by the training procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied after every epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Hidden layer widths; the input and output widths are implied.
    pub hidden_widths: Vec<usize>,
    /// Loss weights for the alpha, omega, t and f output groups.
    pub group_weights: [f64; 4],
    /// Trailing fraction of the corpus held out for validation.
    pub val_fraction: f64,
    /// Salt-and-pepper levels drawn uniformly per training sample.
    pub noise_levels: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            lr_decay: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 5.0,
            seed: 0,
            hidden_widths: vec![512, 128, 64],
            group_weights: [1.0; 4],
            val_fraction: 0.05,
            noise_levels: crate::heatmap::STANDARD_NOISE_LEVELS.to_vec(),
        }
    }
}

impl TrainConfig {
    /// The large-scale interpreter widths `2048 / 512 / 128`.
    pub fn large_scale() -> Self {
        Self {
            hidden_widths: vec![2048, 512, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::Config("learning rate and decay must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("gradient clip threshold must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("validation fraction must lie in [0, 1)".into()));
        }
        if self.hidden_widths.contains(&0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        if self.group_weights.iter().any(|w| !(*w >= 0.0)) || self.group_weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("loss weights must be non-negative and not all zero".into()));
        }
        if self.noise_levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("noise levels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Mixes integers into a well-spread 64-bit seed.
pub(crate) fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9e37_79b9_7f4a_7c15u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        // splitmix64 finalizer
        h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Splits `n` items into `(train, validation)` index ranges.
pub(crate) fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_val = if val_fraction > 0.0 {
        ((n as f64 * val_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1))
    } else {
        0
    };
    let n_val = if n <= 1 { 0 } else { n_val };
    ((0..n - n_val).collect(), (n - n_val..n).collect())
}
