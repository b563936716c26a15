//! Population-aware learning to defer: a fallible classifier with a deferral
//! logit conditioned on an expert embedding, its surrogate loss, the
//! context-free and fine-tuned baselines, and the test-time rule.

mod model;
mod train;

pub use model::{decide, surrogate_loss, DeferralDecision, DeferralModel, HeadConfig, L2dVariant};
pub use train::{
    classifier_accuracy, decisions_for, finetune, system_accuracy, train_classifier, train_l2d,
    L2dConfig, L2dReport, Tally,
};
