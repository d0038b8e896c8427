//! The online loop: predict, then adapt, one batch at a time.

mod config;
mod optimizer;
mod run;
mod step;

pub use config::{
    EvalModel, IndicatorSource, Method, MethodConfig, OptimizerConfig, RunConfig, LR_REFERENCE_BATCH,
};
pub use optimizer::{ema_update, sgd_momentum_step, OptimizerState};
pub use run::{run_ctta, run_domain_generalization, DomainTrace, GeneralizationTrace, RunTrace};
pub use step::{OnlineLearner, StepOutput};
