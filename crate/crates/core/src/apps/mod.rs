//! Downstream uses of influence scores: LF mislabel detection, pruning of
//! harmful loss terms, LF removal, retraining oracles and explanations.

mod explain;
mod metrics;
mod mislabel;
mod prune;

pub use explain::{explain, explain_errors, Attribution, ExplainReport};
pub use metrics::{average_precision, average_ranks, pearson, spearman, Spearman};
pub use mislabel::{
    discrepancy_scores, end_model_probs, knn_discrepancy_scores, knn_probs, mislabel_report, mislabel_scores,
    MislabelReport, ScoreGrid,
};
pub use prune::{
    actual_effect_retrain, default_alpha_grid, discard_and_retrain, group_if_lf_removal, holdout_losses,
    move_and_retrain, moved_labels, pruned_labels, select_harmful_terms, sweep_alpha, sweep_data_if, Component,
    GroupIfResult, Losses, PruneResult, SweepEntry, SweepResult, Term,
};
