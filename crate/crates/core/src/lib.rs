//! Zero-shot modulation recognition in a learned semantic space.

pub mod dataset;
pub mod discriminator;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod synth;
pub mod train;
pub mod zsl;
