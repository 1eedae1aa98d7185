//! Loss, optimizer, learning-rate schedule, metrics and the training loop.

mod loss;
mod metrics;
mod optim;
mod trainer;

pub use loss::cross_entropy;
pub use metrics::{default_boundary_tol, metrics, MetricAccumulator, MetricReport};
pub use optim::{poly_lr, sgd_nesterov_step, Nesterov};
pub use trainer::{
    argmax_labels, batch_plan, checkpoint_path, checkpoint_stats, evaluate, load_model,
    load_network, predict_all, train_loop, EpochLog, PreparedData, TrainConfig, Trainer,
    LOG_HEADER,
};
