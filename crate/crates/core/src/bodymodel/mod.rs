//! Simplified skinned body model, rotation utilities and the
//! mesh-to-parameters regressor.

mod generate;
mod mlp;
mod model;
mod params;
mod rotation;

pub use generate::{make_mini_model, MAX_JOINTS, MIN_JOINTS};
pub use mlp::{ParamMlpConfig, ParamMlpOutput, ParamRegressorMlp, MLP_PREFIX};
pub use model::MiniBodyModel;
pub use params::{BodyParams, Pose};
pub use rotation::{axis_angle, orthogonality_error, rodrigues, so3_project, so3_project_backward, Projection};
