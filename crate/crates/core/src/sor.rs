//! Stochastic operator regularization.
//!
//! Each forward pass draws a drop rate `p ~ U[0, p_max)` and a Bernoulli
//! keep-mask with keep probability `1 − p`, then replaces a learnable offset
//! `M` by `mask ⊙ M / (1 − p)`. The identity of `S = I + M` is added by the
//! caller after masking, so a fully dropped offset leaves `S = I`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SorConfig {
    pub enabled: bool,
    pub seed: u64,
    /// Upper clamp on the sampled drop rate; strictly below 1.
    pub p_max: f64,
    /// One drop rate per layer forward pass shared by every offset in it.
    /// When false each offset matrix draws its own rate.
    pub shared_p: bool,
}

impl Default for SorConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            seed: 0,
            p_max: 0.99,
            shared_p: true,
        }
    }
}

impl SorConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_max > 0.0 && self.p_max < 1.0) {
            return Err(Error::Config(format!("p_max must lie in (0, 1), got {}", self.p_max)));
        }
        Ok(())
    }
}

/// A sampled drop for one offset matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetDrop {
    pub p: f64,
    pub mask: Matrix,
}

impl OffsetDrop {
    pub fn apply(&self, offset: &Matrix) -> Result<Matrix> {
        apply(offset, self.p, &self.mask)
    }

    /// Pulls a gradient w.r.t. the masked offset back to the raw offset.
    pub fn backprop(&self, grad_masked: &Matrix) -> Result<Matrix> {
        apply(grad_masked, self.p, &self.mask)
    }
}

#[derive(Debug, Clone)]
pub struct SorState {
    config: SorConfig,
    rng: ChaCha8Rng,
}

impl SorState {
    pub fn new(config: SorConfig) -> Self {
        Self::for_stream(config, 0)
    }

    /// Independent stream derived from the seed, e.g. one per sample index.
    pub fn for_stream(config: SorConfig, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(stream);
        Self { config, rng }
    }

    pub fn disabled() -> Self {
        Self::new(SorConfig::disabled())
    }

    pub fn config(&self) -> &SorConfig {
        &self.config
    }

    pub fn enabled(&self) -> bool {
        self.config.enabled
    }

    /// Drop rate uniform on `[0, p_max)`.
    pub fn sample_rate(&mut self) -> f64 {
        self.rng.random::<f64>() * self.config.p_max
    }

    /// Bernoulli(1 − p) keep-mask.
    pub fn sample_mask_with_rate(&mut self, p: f64, rows: usize, cols: usize) -> Matrix {
        let mut mask = Matrix::zeros(rows, cols);
        for v in mask.data_mut() {
            *v = if self.rng.random::<f64>() >= p { 1.0 } else { 0.0 };
        }
        mask
    }

    pub fn sample_mask(&mut self, rows: usize, cols: usize) -> (f64, Matrix) {
        let p = self.sample_rate();
        let mask = self.sample_mask_with_rate(p, rows, cols);
        (p, mask)
    }

    /// Draws the drop for one offset, or `None` when regularization is off.
    /// `shared_rate` is used instead of a fresh rate when given.
    pub fn draw(&mut self, rows: usize, cols: usize, shared_rate: Option<f64>) -> Option<OffsetDrop> {
        if !self.config.enabled {
            return None;
        }
        let p = shared_rate.unwrap_or_else(|| self.sample_rate());
        let mask = self.sample_mask_with_rate(p, rows, cols);
        Some(OffsetDrop { p, mask })
    }

    /// The rate to share across one layer's offsets, if sharing is on.
    pub fn layer_rate(&mut self) -> Option<f64> {
        (self.config.enabled && self.config.shared_p).then(|| self.sample_rate())
    }
}

/// Inverted-dropout image `mask ⊙ m / (1 − p)`.
pub fn apply(m: &Matrix, p: f64, mask: &Matrix) -> Result<Matrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidDropRate(p));
    }
    let scale = 1.0 / (1.0 - p);
    m.zip_with(mask, "sor::apply", |v, b| v * b * scale)
}
