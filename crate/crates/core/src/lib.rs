//! Post-training quantization toolkit.
//!
//! * [`quant`]: uniform affine quantization, error metrics, batch-norm folding.
//! * [`search`]: scale grids, MSE / gradient-weighted search, alternating
//!   operand search for matrix products.
//! * [`drq`]: dual-region quantization for softmax and GeLU outputs.
//! * [`rorq`]: outlier-retaining grouped quantization.
//! * [`toy_net`]: a small attention + fusion + decoder network with hook
//!   points, analytic gradients and the end-to-end calibration pipeline.
//! * [`io`]: dump files, parameter files, synthetic data, mask metrics.

pub mod drq;
pub mod error;
pub mod io;
pub mod quant;
pub mod rorq;
pub mod search;
pub mod tensor;
pub mod toy_net;

pub use drq::{DRQCode, DRQParams, DrqKind, Region};
pub use error::{Error, Result};
pub use quant::{BNParams, ErrorMetrics, Granularity, QuantParams, QuantizedTensor, Scheme};
pub use rorq::{RORQParams, ThresholdStrategy};
pub use search::{GradientDump, SearchSpace};
pub use tensor::{SummaryStats, Tensor};
