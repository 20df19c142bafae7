use serde::{Deserialize, Serialize};

use crate::dlm;
use crate::error::{Error, Result};

/// Output distribution the final 1x1 convolution parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Discretized logistic mixture on whole pixels.
    #[default]
    DiscretizedLogistic,
    /// Continuous logistic mixture on uniformly dequantized pixels.
    ContinuousLogistic,
    /// 256-way softmax per sub-pixel with linear dependence on earlier sub-pixels.
    Softmax,
}

/// Values per sub-pixel for the softmax head.
pub const SOFTMAX_LEVELS: usize = 256;

/// Softmax head width: 3 x 256 base logits plus 3 x 256 coupling coefficients.
pub const SOFTMAX_HEAD_CHANNELS: usize = 6 * SOFTMAX_LEVELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Gated residual layers per block.
    pub layers_per_block: usize,
    pub n_filters: usize,
    /// Mixture components `K`.
    pub n_mixtures: usize,
    pub dropout_rate: f64,
    /// Encoder/decoder with stride-2 down- and upsampling (six blocks).
    pub use_downsampling: bool,
    /// Long skip connections from encoder layers to their mirror decoder layers.
    pub use_shortcuts: bool,
    pub n_classes: Option<usize>,
    /// Depth of the plain stack used when downsampling is off.
    pub small_field: Option<usize>,
    #[serde(default)]
    pub head: HeadKind,
}

impl ModelConfig {
    /// 3 encoder + 3 decoder blocks, 5 layers each, 192 filters, dropout 0.5.
    pub fn full_scale() -> Self {
        ModelConfig {
            layers_per_block: 5,
            n_filters: 192,
            n_mixtures: 5,
            dropout_rate: 0.5,
            use_downsampling: true,
            use_shortcuts: true,
            n_classes: None,
            small_field: None,
            head: HeadKind::DiscretizedLogistic,
        }
    }

    /// Desk-scale default used by tests and the CLI (16x16 inputs).
    pub fn desk() -> Self {
        ModelConfig {
            layers_per_block: 2,
            n_filters: 32,
            ..Self::full_scale()
        }
    }

    /// Plain stack of `layers` gated layers, no down/upsampling.
    pub fn small_field(layers: usize) -> Self {
        ModelConfig {
            use_downsampling: false,
            small_field: Some(layers),
            ..Self::desk()
        }
    }

    pub fn n_blocks(&self) -> usize {
        if self.use_downsampling {
            6
        } else {
            1
        }
    }

    pub fn head_channels(&self) -> usize {
        match self.head {
            HeadKind::DiscretizedLogistic | HeadKind::ContinuousLogistic => {
                dlm::head_channels(self.n_mixtures)
            }
            HeadKind::Softmax => SOFTMAX_HEAD_CHANNELS,
        }
    }

    /// Spatial extents must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        if self.use_downsampling {
            4
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_filters == 0 {
            return Err(Error::config("n_filters", "must be positive"));
        }
        if self.n_mixtures == 0 {
            return Err(Error::config("n_mixtures", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("dropout_rate", "must lie in [0, 1)"));
        }
        if self.n_classes == Some(0) {
            return Err(Error::config("n_classes", "must be positive when set"));
        }
        match (self.use_downsampling, self.small_field) {
            (true, Some(_)) => {
                return Err(Error::config("small_field", "requires use_downsampling = false"))
            }
            (false, None) => {
                return Err(Error::config("small_field", "required when use_downsampling = false"))
            }
            (true, None) if self.layers_per_block == 0 => {
                return Err(Error::config("layers_per_block", "must be positive"))
            }
            _ => {}
        }
        Ok(())
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(
                "forward",
                format!("spatial extent {h}x{w} must be a positive multiple of {m}"),
            ));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}
