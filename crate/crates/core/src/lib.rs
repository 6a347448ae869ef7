//! Fusion of geometric and semantic feature maps through a trainable
//! bridging gate, with temperature-scaled attention at inference.
//!
//! The crate is organized around a small recorded-graph autodiff kernel
//! ([`graph`]), the gate itself ([`gate`]), disparity-space training losses
//! ([`losses`]), zero-shot depth metrics ([`metrics`]), and an end-to-end
//! pipeline with frozen stub encoders/decoder where only the gates train
//! ([`pipeline`]). On-disk formats (DMAP rasters, checkpoints, config files)
//! live in [`io`].

pub mod align;
pub mod config;
pub mod error;
pub mod gate;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use align::{FeatureMap, Raster};
pub use error::{Error, Result};
pub use gate::{AttentionRecord, BlockKind, GateConfig, GateParams};
pub use graph::{Gradients, Graph, NodeId};
pub use config::ModelConfig;
pub use losses::{DisparityMap, LossMode};
pub use metrics::{DepthMap, MetricsReport};
pub use pipeline::StubModel;
pub use rng::Prng;
pub use tensor::Tensor;
