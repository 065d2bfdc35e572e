//! Clustering, disentanglement, distributional and probing metrics.

pub mod cluster;
pub mod disentangle;
pub mod frechet;
pub mod probe;

pub use cluster::{confusion, hungarian, hungarian_acc, nmi};
pub use disentangle::{
    dci_disentanglement, factorvae_score, importance_from_linear, FactorVaeProtocol, FactorVaeReport, ImportanceMatrix,
};
pub use frechet::{frechet_distance, frechet_from_samples, GaussianStats};
pub use probe::{probe_train_eval, probe_with_settings, ProbeKind, ProbeSettings};
