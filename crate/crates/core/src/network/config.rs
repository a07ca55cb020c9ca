use alloc::format;

use crate::error::{Error, Result};

/// How the 2D bottleneck becomes the first 3D tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BottleneckMode {
    /// `[C,h,h] -> [C/h,h,h,h]` channel-to-depth reshape.
    Reshape,
    /// Copies the 2D map along depth, keeping all `C` channels.
    Replicate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub input_size: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub enable_seg_branch: bool,
    pub enable_aec: bool,
    pub enable_ure: bool,
    pub attention_residual_init: f64,
    /// Instance norm + activation after the calibrator's compression conv.
    pub aec_norm: bool,
    pub bottleneck: BottleneckMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input_size: 32,
            levels: 5,
            base_channels: 16,
            enable_seg_branch: true,
            enable_aec: true,
            enable_ure: true,
            attention_residual_init: 0.0,
            aec_norm: true,
            bottleneck: BottleneckMode::Reshape,
        }
    }
}

impl NetworkConfig {
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn paper() -> Self {
        NetworkConfig {
            input_size: 128,
            base_channels: 64,
            ..Self::default()
        }
    }

    /// The four ablation rows: baseline, +seg, +seg+aec, +seg+aec+ure.
    pub fn ablation(&self, row: usize) -> NetworkConfig {
        let (seg, aec, ure) = match row {
            0 => (false, false, false),
            1 => (true, false, false),
            2 => (true, true, false),
            _ => (true, true, true),
        };
        NetworkConfig {
            enable_seg_branch: seg,
            enable_aec: aec,
            enable_ure: ure,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: alloc::string::String| Err(Error::Config(msg));
        if self.levels == 0 || self.levels > 16 {
            return fail(format!("levels must be in 1..=16, got {}", self.levels));
        }
        if self.base_channels == 0 {
            return fail("base_channels must be positive".into());
        }
        let div = 1usize << self.levels;
        if self.input_size == 0 || self.input_size % div != 0 {
            return fail(format!(
                "input_size {} must be divisible by 2^levels = {div}",
                self.input_size
            ));
        }
        let cb = self.encoder_channels(self.levels);
        let h = self.bottleneck_size();
        if self.bottleneck == BottleneckMode::Reshape && cb % h != 0 {
            return fail(format!(
                "bottleneck channels {cb} must be divisible by bottleneck depth {h}"
            ));
        }
        let c0 = self.decoder_channels(0);
        if c0 % div != 0 {
            return fail(format!(
                "lifted bottleneck channels {c0} must be divisible by 2^levels = {div} so every decoder block can halve them"
            ));
        }
        if self.enable_ure && !self.enable_seg_branch {
            return fail("enable_ure requires enable_seg_branch".into());
        }
        if !self.attention_residual_init.is_finite() {
            return fail("attention_residual_init must be finite".into());
        }
        Ok(())
    }

    /// Channels of encoder level `l` (1-based); level 0 is the 1-channel input.
    pub fn encoder_channels(&self, l: usize) -> usize {
        if l == 0 {
            1
        } else {
            self.base_channels << (l - 1)
        }
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> self.levels
    }

    /// Channels entering decoder block `j` (`j = levels` gives the final width).
    pub fn decoder_channels(&self, j: usize) -> usize {
        let cb = self.encoder_channels(self.levels);
        let c0 = match self.bottleneck {
            BottleneckMode::Reshape => cb / self.bottleneck_size(),
            BottleneckMode::Replicate => cb,
        };
        c0 >> j
    }

    /// Spatial size after decoder block `j`.
    pub fn decoder_size(&self, j: usize) -> usize {
        self.bottleneck_size() << (j + 1)
    }

    /// Input channels of the shape-keeping conv in decoder block `j`.
    pub fn decoder_conv_inputs(&self, j: usize) -> usize {
        let c = self.decoder_channels(j + 1);
        if self.enable_aec {
            2 * c
        } else {
            c
        }
    }

    /// Encoder level whose resolution matches decoder block `j` (0 = input).
    pub fn aec_source_level(&self, j: usize) -> usize {
        self.levels - 1 - j
    }

    pub fn aec_source_channels(&self, j: usize) -> usize {
        self.encoder_channels(self.aec_source_level(j))
    }

    /// Instance norm needs at least two spatial elements per channel.
    pub fn norm_at(&self, size: usize) -> bool {
        size * size >= 2
    }
}
