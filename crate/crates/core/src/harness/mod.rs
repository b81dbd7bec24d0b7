//! Experiment driver: evaluation of the controller against the static
//! baselines, reward sweeps, seed robustness and overhead timing.

mod config;
mod eval;
mod experiments;
mod output;
mod policy;
mod setup;

pub use config::{ExperimentConfig, SurrogateSource};
pub use eval::{
    ablation_compare, bootstrap_mean_ci, run_eval, Ablation, AblationRow, BootstrapConfig,
    EvalReport, PairedDiff,
};
pub use experiments::{
    band_statistic, beta_monotonicity_violations, overhead_report, seed_robustness,
    sweep_alpha_beta, trailing_mean, train_policy, OverheadReport, Robustness, RobustnessConfig,
    SeedCurve, SweepGrid, SweepRow,
};
pub use output::{save_csv, seed_curves_rows, write_csv};
pub use policy::{rollout, Controller, PolicyKind, PruningTask, RolloutLog};
pub use setup::Setup;
