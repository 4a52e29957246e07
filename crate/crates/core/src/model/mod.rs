//! Hybrid network: empirical prior, deep feature branches, fusion and
//! training.

mod config;
mod loss;
mod net;
mod optim;
mod train;

pub use config::ModelConfig;
pub use loss::{custom_loss, custom_loss_value};
pub use net::{fit_prior, Prediction, Prepared, SepiTfpNet, SCALAR_FEATURES};
pub use optim::Adam;
pub use train::{grid_search_lambdas, prior_predictions, train, EpochRecord, GridCell, GridSearchResult, TrainHistory};
