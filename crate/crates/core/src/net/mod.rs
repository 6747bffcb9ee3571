//! Feature extractor, classifier and decoder.
//!
//! The extractor maps a `(1, 2, 128)` I/Q frame through a conv/pool stack
//! and two dense layers to a semantic vector `z`. The classifier reads `z`
//! and produces class probabilities; the decoder mirrors the extractor with
//! dense layers, unpooling (driven by the extractor's pool records) and
//! deconvolutions to reconstruct the frame.

mod checkpoint;
mod forward;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::loss::LossError;
use crate::nn::{NnError, PoolMode, PoolRecord, Scalar, Tensor};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{BatchForward, SampleTrace};
pub use params::{init_params, ModelParams, NetworkWeights, ParamGroup};

/// One pool record per conv layer; `None` for layers that do not pool.
pub type PoolRecords = Vec<Option<PoolRecord>>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("pool records do not match the architecture: {0}")]
    RecordMismatch(String),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerConfig {
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub padding: (usize, usize),
    pub pool: Option<PoolMode>,
}

impl ConvLayerConfig {
    fn new(out_channels: usize, kernel: (usize, usize), pool: Option<PoolMode>) -> Self {
        Self {
            out_channels,
            kernel,
            padding: (0, kernel.1 / 2),
            pool,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub conv_layers: Vec<ConvLayerConfig>,
    pub pool_window: (usize, usize),
    /// Hidden widths between the flattened conv output and `z`. The decoder
    /// uses them in reverse.
    pub encoder_hidden: Vec<usize>,
    pub semantic_dim: usize,
    pub classifier_hidden: Vec<usize>,
    /// Known classes in label order.
    pub class_names: Vec<String>,
}

/// Shapes derived from an [`ArchConfig`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    /// `(c, h, w)` entering each conv layer.
    pub conv_in: Vec<[usize; 3]>,
    /// `(c, h, w)` produced by each conv layer, before pooling.
    pub conv_out: Vec<[usize; 3]>,
    /// `(c, h, w)` leaving the conv stack.
    pub stack_out: [usize; 3],
    pub flat_dim: usize,
}

impl ArchConfig {
    /// Default topology for 2 × 128 frames: four conv layers pooling only
    /// along the sample axis, dense 256 → t = 64, classifier 128 → |K|.
    pub fn new(class_names: Vec<String>) -> Self {
        Self {
            input_height: 2,
            input_width: 128,
            conv_layers: vec![
                ConvLayerConfig::new(64, (1, 3), Some(PoolMode::Max)),
                ConvLayerConfig::new(64, (2, 3), None),
                ConvLayerConfig::new(32, (1, 3), Some(PoolMode::Max)),
                ConvLayerConfig::new(32, (1, 3), None),
            ],
            pool_window: (1, 2),
            encoder_hidden: vec![256],
            semantic_dim: 64,
            classifier_hidden: vec![128],
            class_names,
        }
    }

    pub fn known_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [1, self.input_height, self.input_width]
    }

    /// Checks every invariant and returns the derived shapes, including that
    /// the decoder's deconvolutions land back on the input extent.
    pub fn layout(&self) -> Result<Layout, NetError> {
        let bad = |m: String| Err(NetError::InvalidConfig(m));
        if self.semantic_dim == 0 {
            return bad("semantic dimension must be positive".into());
        }
        if self.class_names.is_empty() {
            return bad("at least one known class is required".into());
        }
        for (i, n) in self.class_names.iter().enumerate() {
            if n.is_empty() || self.class_names[..i].contains(n) {
                return bad(format!("class name {n:?} is empty or repeated"));
            }
        }
        if self.input_height == 0 || self.input_width == 0 {
            return bad("input extent must be positive".into());
        }
        if self.conv_layers.is_empty() {
            return bad("at least one conv layer is required".into());
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.classifier_hidden)
            .any(|&w| w == 0)
        {
            return bad("dense widths must be positive".into());
        }
        let (pwh, pww) = self.pool_window;
        let mut shape = self.input_shape();
        let mut conv_in = Vec::new();
        let mut conv_out = Vec::new();
        for (i, layer) in self.conv_layers.iter().enumerate() {
            let [_, h, w] = shape;
            let (kh, kw) = layer.kernel;
            let (ph, pw) = layer.padding;
            if layer.out_channels == 0 || kh == 0 || kw == 0 {
                return bad(format!("conv layer {i} has an empty extent"));
            }
            if ph >= kh || pw >= kw || h + 2 * ph < kh || w + 2 * pw < kw {
                return bad(format!(
                    "conv layer {i}: kernel {:?} with padding {:?} does not fit {h}x{w}",
                    layer.kernel, layer.padding
                ));
            }
            let (oh, ow) = (h + 2 * ph - kh + 1, w + 2 * pw - kw + 1);
            // mirrored deconvolution must land exactly on (h, w)
            if oh + kh - 1 - 2 * ph != h || ow + kw - 1 - 2 * pw != w {
                return bad(format!("conv layer {i} cannot be inverted by its deconvolution"));
            }
            conv_in.push(shape);
            let out = [layer.out_channels, oh, ow];
            conv_out.push(out);
            shape = out;
            if layer.pool.is_some() {
                if pwh == 0 || pww == 0 || oh % pwh != 0 || ow % pww != 0 {
                    return bad(format!(
                        "conv layer {i}: pool window {:?} does not tile {oh}x{ow}",
                        self.pool_window
                    ));
                }
                shape = [layer.out_channels, oh / pwh, ow / pww];
            }
        }
        Ok(Layout {
            conv_in,
            conv_out,
            stack_out: shape,
            flat_dim: shape.iter().product(),
        })
    }
}

/// A point `z` in the semantic space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticVector(pub Vec<f64>);

impl SemanticVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn from_tensor<T: Scalar>(z: &Tensor<T>) -> Self {
        Self(z.to_f64_vec())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}
