mod common;

use common::pipelines::{distill_pipeline_error, task_pipeline_error};
use kdsrl::heads::Task;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

#[test]
fn distillation_through_student() {
    for seed in 0..SEEDS {
        let err = distill_pipeline_error(seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn keyword_loss_through_encoder() {
    for seed in 0..SEEDS {
        let err = task_pipeline_error(Task::Kws, seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}

#[test]
fn speaker_loss_through_encoder() {
    for seed in 0..SEEDS {
        let err = task_pipeline_error(Task::Sv, seed);
        assert!(err < TOL, "seed {seed}: {err:e}");
    }
}
