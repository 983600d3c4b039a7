//! Rank-aware tiled inference for SVD-compressed transformer encoders.

pub mod attention;
pub mod encoder;
pub mod error;
pub mod factorizer;
pub mod ffn;
pub mod format;
pub mod gemm;
pub mod geometry;
pub mod memtier;
pub mod ops;
pub mod parallel;
pub mod planner;
pub mod scalar;
pub mod svd;
pub mod synth;
pub mod tensor;
pub mod verify;

pub use encoder::{run_layer, run_model, EncoderLayer, ExecMode, LnOrder};
pub use error::{Error, Result};
pub use factorizer::{AttentionFactorSet, DenseAttention, FactorizedLinear, HeadMode};
pub use ffn::{DenseFfn, FfnFactors};
pub use format::ModelConfig;
pub use geometry::{Geometry, Rational};
pub use memtier::{AllocationClass, Formula, MemoryMeter, MeterSnapshot, TilePlan};
pub use ops::Activation;
pub use planner::HardwareModel;
pub use scalar::Scalar;
pub use svd::{svd, truncate_even_split, FactorizedPair, SvdResult};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type FactorizedLinear32 = FactorizedLinear<f32>;
pub type FactorizedLinear64 = FactorizedLinear<f64>;
pub type AttentionFactorSet32 = AttentionFactorSet<f32>;
pub type AttentionFactorSet64 = AttentionFactorSet<f64>;
pub type FfnFactors32 = FfnFactors<f32>;
pub type FfnFactors64 = FfnFactors<f64>;
pub type EncoderLayer32 = EncoderLayer<f32>;
pub type EncoderLayer64 = EncoderLayer<f64>;
