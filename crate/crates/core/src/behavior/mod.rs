//! Few-shot expert behavior modeling: a context-set encoder produces an
//! expert embedding, a binary head predicts whether the expert labels a
//! query correctly, and the trained model synthesizes expert labels.

mod model;
mod pseudo;
mod train;

pub use model::{ArchitectureConfig, BehaviorModel, EncoderVariant, ExpertEmbedding};
pub(crate) use model::rows_tensor;
pub use pseudo::{
    categorical_label, generate_pseudo_labels, wrong_label, PseudoLabel, PseudoLabelTable,
};
pub use train::{
    binary_accuracy, consistency_loss, meta_objective, meta_step, supervised_loss, train_behavior,
    ExpertTask, MetaBatch, SslConfig, SslData, SslReport,
};
