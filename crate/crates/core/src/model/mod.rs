//! The incremental learner: a three-block CNN feature extractor followed by
//! an expandable cosine-normalized classifier.

mod checkpoint;
mod learner;
mod registry;

pub use checkpoint::{Checkpoint, EvalRecord};
pub use learner::{
    ConvLayer, CosineClassifier, ForwardPass, InputSpec, Learner, ModelConfig, TeacherSnapshot,
};
pub use registry::{ClassEntry, ClassRegistry, Head};
