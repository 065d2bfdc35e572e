//! Training objective, optimizer and the training loop.

pub mod config;
pub mod losses;
pub mod optim;
pub mod train;

pub use config::{DatasetKind, Regularizer, TrainConfig};
pub use losses::{
    endpoint_loss, endpoint_terms, gaussian_nll, scfm_loss, tc_estimate, tc_estimate_var, vfm_loss, vfm_loss_parts,
    EndpointParts, EndpointTerms, LossBreakdown, LossVars,
};
pub use optim::{adam_step, adam_step_with_rates, ema_update, AdamState, ADAM_EPS};
pub use train::{aggregate_kl_estimate, ema_model, init_model, scfm_train_step, train, MetricsLog, TrainOutcome, TrainState};
