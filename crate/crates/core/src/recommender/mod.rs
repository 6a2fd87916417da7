//! Context-aware recommender: short-term interest GRUs, feedback slots,
//! Transformer fusion, scoring and pretraining.

mod losses;
mod model;
mod pretrain;

pub use losses::{bpr_on_tape, infonce_on_tape, loss_attr, loss_infonce, loss_item, pair_probability, pair_scores, AttrPairs};
pub use model::{
    aggregate_feedback, score, slot_mask, Bound, FeedbackVectors, FrozenRecommender, InterestContext, ModelConfig, RecModel, ScoreTable,
    SlotInputs, SLOTS, SLOT_ATTR_INTEREST, SLOT_ITEM_INTEREST,
};
pub use pretrain::{batch_loss, loss_and_gradient, pretrain_recommender, sample_example, LossValues, LossVars, PretrainReport, TrainingExample};
