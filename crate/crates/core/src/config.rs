//! Model hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Every dimension of the policy network. Defaults are the desk-scale
/// configuration (64×64 frames, width 64, chunk of 8).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch: usize,
    /// Channel width of each pyramid level, finest first.
    pub level_dims: Vec<usize>,
    /// Backbone embedding width.
    pub d_model: usize,
    /// Pixel-aware token count.
    pub pixel_tokens: usize,
    /// Fourier feature width of the prompt encoder (even).
    pub d_pe: usize,
    /// Samples taken along a line prompt.
    pub line_samples: usize,
    /// Side of the grid a mask prompt is pooled to.
    pub mask_grid: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub vocab: usize,
    /// Action chunk length.
    pub chunk: usize,
    pub decoder_hidden: usize,
    pub decoder_blocks: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            level_dims: vec![32, 32, 32],
            d_model: 64,
            pixel_tokens: 4,
            d_pe: 128,
            line_samples: 4,
            mask_grid: 16,
            layers: 2,
            heads: 4,
            mlp_hidden: 128,
            vocab: 1024,
            chunk: 8,
            decoder_hidden: 128,
            decoder_blocks: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A much smaller network for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch: 2,
            level_dims: vec![6, 5, 4],
            d_model: 8,
            pixel_tokens: 2,
            d_pe: 8,
            line_samples: 3,
            mask_grid: 4,
            layers: 1,
            heads: 2,
            mlp_hidden: 12,
            vocab: 64,
            chunk: 3,
            decoder_hidden: 10,
            decoder_blocks: 2,
            seed: 0,
        }
    }

    pub fn levels(&self) -> usize {
        self.level_dims.len()
    }

    /// Side length of the feature grid at `level` (0 = finest).
    pub fn grid_side(&self, level: usize) -> usize {
        self.image_size / self.patch >> level
    }

    pub fn visual_tokens(&self) -> usize {
        let s = self.grid_side(self.levels() - 1);
        s * s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.level_dims.is_empty() || self.level_dims.contains(&0) {
            return fail("at least one pyramid level with non-zero width is required".into());
        }
        let unit = self.patch << (self.levels() - 1);
        if self.patch == 0 || self.image_size == 0 || self.image_size % unit != 0 {
            return fail(format!(
                "image size {} is not divisible by patch·2^(L−1) = {unit}",
                self.image_size
            ));
        }
        if self.d_pe == 0 || self.d_pe % 2 != 0 {
            return fail(format!("Fourier width {} must be even and positive", self.d_pe));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("width {} not divisible into {} heads", self.d_model, self.heads));
        }
        if self.decoder_blocks == 0 {
            return fail("the action decoder needs at least one residual block".into());
        }
        if self.chunk == 0 || self.pixel_tokens == 0 || self.line_samples == 0 || self.vocab == 0 {
            return fail("chunk, pixel token count, line samples and vocabulary must be positive".into());
        }
        if self.mask_grid == 0 || self.image_size % self.mask_grid != 0 {
            return fail(format!(
                "mask grid {} must divide image size {}",
                self.mask_grid, self.image_size
            ));
        }
        Ok(())
    }
}
