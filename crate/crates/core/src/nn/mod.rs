//! Differentiable building blocks: encoder, projectors, classifier, checkpoints.

mod checkpoint;
mod layers;
mod model;
mod scalar;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, LoadMode, TensorEntry};
pub use layers::{
    AvgPool2, BatchNorm2d, Conv2d, GlobalPool, GlobalPoolKind, L2Normalize, Linear, Mode, Param,
    ParamKind, Relu,
};
pub use model::{
    Encoder, EncoderConfig, ForwardOutput, HeadSet, Model, ModelConfig, OutputGrads, Projector,
    ProjectorConfig,
};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub(crate) use tensor::{gemm_f64_ab, gemm_f64_abt};
