//! Influence of training-loss components on a holdout loss.
//!
//! Every score follows one convention: `φ = dL_holdout / dε` where `ε`
//! upweights the scored component in the training objective. Removing the
//! component (`ε = −1/N`) therefore changes the holdout loss by `−φ/N`, so a
//! positive score marks a harmful component.

mod engine;
mod solver;
mod tensor;

pub use engine::{
    ordinary_influence, relatif, relatif_scores, rw_influence, rw_influence_exp, self_influence, wm_influence,
    Holdout, HoldoutDirection, InfluenceEngine,
};
pub use solver::{ihvp_exact, ihvp_lissa, spectral_norm_estimate, IhvpSolverConfig, LissaConfig, SolverKind};
pub use tensor::{aggregate_influence, read_tensor_csv, Aggregate, InfluenceTensor, Level, Method, TensorMeta};
