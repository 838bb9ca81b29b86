//! Predictor training, the downstream inverse problems and their baselines.

mod fit;
pub mod optim;
mod scenario;
mod train;

pub use fit::{
    fit, loss_landscape, Evidence, FitConfig, FitError, FitOutcome, FitProblem, FitStatus, Method, Objective, Unknown,
};
pub use scenario::{NoScenario, RunRecord, Sampling, Scenario, Task, RESULTS_HEADER};
pub use train::{
    baseline_average, baseline_random, default_gamma_max, eval_state_estimation, train_risp, AveragePredictor,
    EpochLog, ErrorStats, Predictor, RandomPredictor, TrainConfig, TrainError, Trainer, EPOCH_LOG_HEADER,
};
