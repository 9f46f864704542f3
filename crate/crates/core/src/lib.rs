//! Energy disaggregation from a single mains channel.
//!
//! The pipeline: fit per-appliance hidden Markov models and population
//! summary statistics from submetered training days, then recover each
//! appliance's signal from the aggregate by solving a relaxed MAP problem
//! with a sparse interior QP per outer iteration. Three inference variants
//! share one assembly path: the plain additive factorial model, a
//! soft-penalty regularization toward population means, and full Bayesian
//! melding of the signal model with the summary-statistic model.

pub mod eval;
pub mod hmm;
pub mod inference;
pub mod layout;
pub mod melding;
pub mod stats;
pub mod trace;

pub use eval::{
    compute_metrics, desk_scale_house, desk_scale_plan, full_scale_house, full_scale_plan,
    generate_synthetic, run_experiment, ExperimentPlan, ExperimentReport,
    Metrics, SynthSpec,
};
pub use hmm::{fit_hmm, ApplianceHmm, NoiseState, RelaxedAssignment, PROB_FLOOR};
pub use inference::{
    exhaustive_map, run_map, update_sigma, InferenceError, InferenceResult, InferenceSettings,
};
pub use layout::{build_constraints, ConstraintSpec, VariableLayout};
pub use melding::{
    assemble_objective, assemble_raw_pinned, MethodConfig, MethodVariant, PsdStatus,
    QuadraticObjective, XiMode,
};
pub use stats::{fit_population, PopulationModel, StatisticKind};
