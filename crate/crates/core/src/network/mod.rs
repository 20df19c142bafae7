//! Causal two-stream convolutional network.

mod config;
mod field;
mod model;
mod probe;

pub use config::{HeadKind, ModelConfig, SOFTMAX_HEAD_CHANNELS, SOFTMAX_LEVELS};
pub use field::{receptive_field, Field, FieldRegion, ReceptiveField};
pub use model::{down_right_shifted_conv, down_shifted_conv, Forward, ForwardOptions, Mode, Model};
pub use probe::{dependency_masks, probe_causality, probe_field, CausalityReport, ProbeTarget};
