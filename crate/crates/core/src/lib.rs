//! Spatiotemporal video saliency engine: tensors, convolutions, the temporal
//! module with cyclic padding and temporal shuffle, the full encoder/decoder
//! network, a small gradient tape, metrics, image I/O and benchmarks.

pub mod attention;
pub mod bench;
pub mod error;
pub mod media;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod reference;
pub mod rng;
pub mod selftest;
pub mod store;
pub mod temporal;
pub mod tensor;
pub mod trace;
pub mod train;

pub use attention::{attention_forward, attention_inject, AttentionWeights};
pub use bench::BenchReport;
pub use error::{Error, Result};
pub use media::{clip_iter, hflip, read_image, resize_to, write_gray, FrameClip};
pub use metrics::{evaluate_dataset, f_max, mae, s_measure, DatasetEval, EvalRecord};
pub use network::{init_weights, network_forward, Network, NetworkConfig, SaliencyResult};
pub use nn::{conv2d, conv3d_window, Conv2dWeights, Conv3dWeights, UpsampleMode};
pub use rng::SeededRng;
pub use store::{load_weights, save_weights, WeightStore};
pub use temporal::{
    temporal_module_forward, temporal_shuffle, temporal_shuffle_inverse, tm_conv3d_layer,
    PaddingPolicy, TemporalBlock, TemporalConfig, TemporalModuleWeights,
};
pub use tensor::{Scalar, Tensor};
pub use trace::{OpKind, Tracer};
pub use train::{fd_gradcheck, sgd_step, tm_overfit_demo, GradCheckReport, GradTape, SgdState};
