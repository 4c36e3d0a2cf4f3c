//! Graph-CNN mesh regressor, its building blocks, and the fully connected
//! baseline.

mod encoder;
mod layers;
mod model;
mod params;

pub use encoder::{Encoder, EncoderConfig, Pooling};
pub use layers::{
    camera_raw_scale, graph_conv, GraphConvLayer, GraphResidualBlock, GroupNormLayer, Linear, GROUP_NORM_EPS,
    MIN_CAMERA_SCALE,
};
pub use model::{
    Architecture, MeshRegressor, MeshTopology, Prediction, RegressorConfig, RegressorOutput, ENCODER_PREFIX,
};
pub use params::{Bound, ParamId, ParamStore};
