//! Metric learning: location-based similarity, batch-hard triplet mining,
//! the multi-head margin loss, dynamic batch sizing, and the training loop.

pub mod controller;
pub mod loss;
pub mod mining;
pub mod similarity;
pub mod trainer;

pub use controller::BatchController;
pub use loss::{hinge_values, multi_head_loss, triplet_margin_loss, LossBreakdown, LossConfig};
pub use mining::{batch_hard_mine, pairwise_distances, Triplet};
pub use similarity::{
    default_similarity_masks, positive_clusters, similarity_masks, SimilarityMasks,
    NEGATIVE_RADIUS_M, POSITIVE_RADIUS_M,
};
pub use trainer::{train, train_with, EpochSummary, TrainOptions, TrainOutcome};
