//! Maximum-likelihood training with early stopping, and hyperparameter grid
//! search.

mod fit;
mod grid;

pub use fit::{
    batch_log_density, fit, floor_loss, mean_log_likelihood, mle_loss, train_model, train_step,
    EpochRecord, TrainConfig, TrainReport,
};
pub use grid::{grid_search, GridBase, GridOutcome, GridPoint, GridReport, GridRow, GridSpace};
