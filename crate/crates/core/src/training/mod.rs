//! Matching, losses and the optimisation loop.

pub mod boxes;
mod loss;
mod matcher;
mod trainer;

pub use boxes::outer_box;
pub use loss::{
    instance_loss, layer_loss, relation_loss, total_loss, ActionLossScope, GroundTruthHOI, InstanceLoss, LossBreakdown,
    LossNorm, LossVars, LossWeights, RelationLoss,
};
pub use matcher::{hungarian_match, linear_sum_assignment, matching_cost, MatchResult};
pub use trainer::{batch_loss, fit, train_step, FitPaths, FitReport, LearningRates, Sample, Schedule};
