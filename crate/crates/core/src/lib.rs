//! Motion-emotion feature decoupling for micro-expression recognition:
//! data handling, the two-branch network, training and LOSO evaluation.

pub mod autograd;
pub mod cofm;
pub mod data_model;
pub mod decouple;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod motion_branch;
pub mod nn;
pub mod params;
pub mod preprocess;
pub mod sevit;
pub mod tensor;
pub mod training;

pub use autograd::{Graph, Var};
pub use data_model::{Dataset, DatasetManifest, Dims, TaskScheme};
pub use error::{MednError, Result};
pub use evaluation::{run_loso, EvalReport, LosoOptions};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
pub use training::{train, Checkpoint};
