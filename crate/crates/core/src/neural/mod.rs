pub mod checkpoint;
pub mod decode;
pub mod graph;
mod layers;
pub mod model;
pub mod params;
pub mod tensor;
pub mod vocab;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
pub use decode::{beam_search, DecodeConfig, StepModel};
pub use graph::{Graph, Trainable, Var};
pub use model::{Component, EncoderOutput, ModelConfig, ModelParams};
pub use params::{Adam, AdamConfig, GradBundle, ParamStore};
pub use tensor::Tensor;
pub use vocab::Vocab;
