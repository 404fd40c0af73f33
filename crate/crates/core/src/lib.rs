//! Hierarchical minimax decomposition of the weighted supermarket model and
//! Monte-Carlo checks of its dynamics under join-the-least-weighted-queue
//! (JLW) routing.

pub mod decomposition;
pub mod lp;
pub mod model;
pub mod rational;
pub mod sample;
pub mod simulator;
pub mod verify;

pub use decomposition::{
    bonded_components, brute_force_decompose, decompose, harmonic_drift, minimax_value,
    pin_cluster, reduce, restricted_drift, synthesize_witness, Decomposition, DecompositionError,
    DecompositionReport, ReducedSystem,
};
pub use model::{
    policy_graph, static_drift, validate, Cluster, Instance, ModelError, RawInstance,
    StaticPolicy, Violation,
};
pub use rational::Rational;
pub use simulator::{
    coupled_run, jlw_route, properly_clustered, run, shape_statistic, step, CouplingTriple,
    Event, ProcessKind, Routing, ScaledWeights, SimConfig, SimError, SimModel, ThinningSpec,
    Trajectory,
};
pub use verify::{
    agreed_decomposition, check_diffusive_control, check_dispersion, check_separation,
    check_shape_recurrence, check_speeds, check_stability, check_weight_invariance, run_all,
    run_experiment, Batch, Comparison, Experiment, Verdict, VerifyError, VerifyOptions,
};
