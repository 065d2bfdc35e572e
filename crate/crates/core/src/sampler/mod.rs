//! ODE sampling of the induced velocity field.

pub mod modes;
pub mod ode;

pub use modes::{
    draw_source, per_eval_flops, reconstruct, sample_decoder, sample_full, sample_full_from, sample_refined,
    sample_refined_from, steps_for_density, ModelField, SampleMode,
};
pub use ode::{
    integrate, FnField, SampleTrace, SolverKind, SolverSpec, StepRecord, TraceSummary, VelocityField, DEFAULT_T_START,
    MIN_STEP,
};
