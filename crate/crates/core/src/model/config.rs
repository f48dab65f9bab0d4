use serde::{Deserialize, Serialize};

use crate::error::{config, Result};

/// Architecture description. Field names double as the sidecar config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// (height, width, bands)
    pub input_shape: [usize; 3],
    pub filters_per_block: usize,
    #[serde(default = "default_kernel")]
    pub kernel: [usize; 2],
    #[serde(default = "default_strides")]
    pub block_strides: [usize; 4],
    pub compression_ratio: f64,
    #[serde(default)]
    pub attention_enabled: bool,
    #[serde(default = "default_hidden")]
    pub attention_hidden: usize,
    #[serde(default = "default_power")]
    pub power_constraint: f64,
}

fn default_kernel() -> [usize; 2] {
    [3, 3]
}

fn default_strides() -> [usize; 4] {
    [2, 2, 1, 1]
}

fn default_hidden() -> usize {
    16
}

fn default_power() -> f64 {
    1.0
}

impl ModelConfig {
    /// Small configuration used for desk-scale experiments.
    pub fn toy(input_shape: [usize; 3], compression_ratio: f64, attention_enabled: bool) -> Self {
        Self {
            input_shape,
            filters_per_block: 16,
            kernel: default_kernel(),
            block_strides: default_strides(),
            compression_ratio,
            attention_enabled,
            attention_hidden: 16,
            power_constraint: 1.0,
        }
    }

    /// Full-width configuration: 256 filters per block and a squeeze factor
    /// of 16 in the attention modules.
    pub fn full_scale(input_shape: [usize; 3], compression_ratio: f64, attention_enabled: bool) -> Self {
        Self {
            input_shape,
            filters_per_block: 256,
            kernel: default_kernel(),
            block_strides: default_strides(),
            compression_ratio,
            attention_enabled,
            attention_hidden: 256 / 16,
            power_constraint: 1.0,
        }
    }

    pub fn downsample(&self) -> usize {
        self.block_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let [h, w, bands] = self.input_shape;
        if h == 0 || w == 0 || bands == 0 {
            return Err(config(format!("input_shape must be positive, got {:?}", self.input_shape)));
        }
        if self.filters_per_block == 0 {
            return Err(config("filters_per_block must be positive"));
        }
        if self.kernel.contains(&0) {
            return Err(config(format!("kernel must be positive, got {:?}", self.kernel)));
        }
        if self.block_strides.contains(&0) {
            return Err(config(format!("block_strides must be positive, got {:?}", self.block_strides)));
        }
        let d = self.downsample();
        if h % d != 0 || w % d != 0 {
            return Err(config(format!(
                "input {h}x{w} is not divisible by the total downsampling factor {d}"
            )));
        }
        if !(self.compression_ratio > 0.0 && self.compression_ratio < 1.0) {
            return Err(config(format!("compression_ratio must lie in (0, 1), got {}", self.compression_ratio)));
        }
        if self.attention_enabled && self.attention_hidden == 0 {
            return Err(config("attention_hidden must be positive when attention is enabled"));
        }
        if !(self.power_constraint > 0.0 && self.power_constraint.is_finite()) {
            return Err(config(format!("power_constraint must be positive, got {}", self.power_constraint)));
        }
        Ok(())
    }
}

/// Terminal encoder width and the resulting symbol budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelCount {
    /// Filters in the terminal encoder conv (two reals per complex symbol).
    pub c: usize,
    /// Complex symbols per image.
    pub k: usize,
    /// Real source values per image.
    pub n: usize,
    pub bottleneck: [usize; 2],
    pub realized_ratio: f64,
}

/// Largest tolerated relative gap between requested and realized ratio.
pub const MAX_RATIO_DEVIATION: f64 = 0.2;

pub fn derive_channel_count(cfg: &ModelConfig) -> Result<ChannelCount> {
    cfg.validate()?;
    let [h, w, bands] = cfg.input_shape;
    let d = cfg.downsample();
    let (bh, bw) = (h / d, w / d);
    let n = h * w * bands;
    let positions = bh * bw;
    let raw = (2.0 * cfg.compression_ratio * n as f64 / positions as f64).round() as usize;
    let c = (raw + raw % 2).max(2);
    let k = positions * c / 2;
    let realized_ratio = k as f64 / n as f64;
    let deviation = (realized_ratio - cfg.compression_ratio).abs() / cfg.compression_ratio;
    if deviation > MAX_RATIO_DEVIATION {
        return Err(config(format!(
            "compression ratio {} is not realizable for a {h}x{w}x{bands} input: nearest is {realized_ratio} (c={c}), {:.0}% off",
            cfg.compression_ratio,
            deviation * 100.0
        )));
    }
    Ok(ChannelCount { c, k, n, bottleneck: [bh, bw], realized_ratio })
}
