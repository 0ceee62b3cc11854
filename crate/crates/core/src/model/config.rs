use crate::error::{config_err, Result};

/// Architecture hyperparameters. Everything about the parameter layout is a
/// pure function of this struct.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Side of the square input image.
    pub input_size: usize,
    pub stage_depths: [usize; 4],
    pub stage_channels: [usize; 4],
    /// Number of leading stage-1 blocks that apply the mirror blend.
    pub ssaa_blocks: usize,
    pub heads: usize,
    pub ffn_expansion: usize,
    pub dw_kernel: usize,
    pub dpe_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32x32 inputs, depths [5,2,2,2], widths [16,32,64,128].
    pub fn desk() -> Self {
        Self {
            in_channels: 3,
            input_size: 32,
            stage_depths: [5, 2, 2, 2],
            stage_channels: [16, 32, 64, 128],
            ssaa_blocks: 5,
            heads: 2,
            ffn_expansion: 4,
            dw_kernel: 5,
            dpe_kernel: 3,
            seed: 42,
        }
    }

    /// 224x224 inputs with the deeper [5,4,8,3] layout.
    pub fn full_scale() -> Self {
        Self {
            input_size: 224,
            stage_depths: [5, 4, 8, 3],
            stage_channels: [64, 128, 320, 512],
            heads: 8,
            ..Self::desk()
        }
    }

    /// The smallest layout used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_size: 16,
            stage_depths: [1, 1, 1, 1],
            stage_channels: [4, 4, 8, 8],
            ssaa_blocks: 1,
            heads: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(config_err!("in_channels must be positive"));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(config_err!(
                "input_size {} must be a positive multiple of 16",
                self.input_size
            ));
        }
        if self.stage_depths.iter().any(|&d| d == 0) {
            return Err(config_err!("every stage needs at least one block"));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(config_err!("stage channels must be positive"));
        }
        if self.ssaa_blocks > self.stage_depths[0] {
            return Err(config_err!(
                "ssaa_blocks {} exceeds stage-1 depth {}",
                self.ssaa_blocks,
                self.stage_depths[0]
            ));
        }
        if self.heads == 0 {
            return Err(config_err!("heads must be positive"));
        }
        for &c in &self.stage_channels[2..] {
            if c % self.heads != 0 {
                return Err(config_err!(
                    "attention width {c} is not divisible by {} heads",
                    self.heads
                ));
            }
        }
        if self.ffn_expansion == 0 {
            return Err(config_err!("ffn_expansion must be positive"));
        }
        for (k, what) in [(self.dw_kernel, "dw_kernel"), (self.dpe_kernel, "dpe_kernel")] {
            if k % 2 == 0 {
                return Err(config_err!("{what} must be odd, got {k}"));
            }
        }
        Ok(())
    }

    pub fn embedding_dim(&self) -> usize {
        self.stage_channels[3]
    }

    /// Spatial side after each stage. Each downsampling halves the side,
    /// rounding up once the map becomes odd or 1x1.
    pub fn stage_resolutions(&self) -> [usize; 4] {
        let s1 = self.input_size / 4;
        let s2 = s1.div_ceil(2);
        let s3 = s2.div_ceil(2);
        [s1, s2, s3, s3.div_ceil(2)]
    }

    pub fn total_blocks(&self) -> usize {
        self.stage_depths.iter().sum()
    }
}
