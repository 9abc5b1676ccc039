//! End-to-end runs on the synthetic dataset: generate, train, embed, score.

use crate::config::RunConfig;
use crate::error::Result;
use crate::eval::{evaluate, Evaluation};
use crate::model::Model;
use crate::synth::generate_synthetic;
use crate::trainer::{fit, EpochStats, TrainingSet};

#[derive(Clone, Debug)]
pub struct BenchmarkRun {
    pub model: Model<f32>,
    pub steps: u64,
    pub epochs: Vec<EpochStats>,
    pub evaluation: Evaluation,
}

impl BenchmarkRun {
    pub fn auc(&self) -> f64 {
        self.evaluation.curve.auc
    }
}

/// Generates data and trains from `config.seed`, then evaluates the
/// query set against the database with the configured tolerance.
pub fn run_benchmark(config: &RunConfig, n_places: usize, n_conditions: usize) -> Result<BenchmarkRun> {
    let data = generate_synthetic(n_places, n_conditions, config, config.seed)?;
    let set = TrainingSet::from_records(&data.train)?;
    let mut epochs = Vec::with_capacity(config.train.epochs);
    let (model, state) = fit(config, &set, |_, s| epochs.push(s.clone()))?;
    let db = model.embed_records(&data.db)?;
    let query = model.embed_records(&data.query)?;
    let evaluation = evaluate(
        &db,
        &query,
        config.eval.tolerance,
        config.eval.n_thresholds,
        config.eval.ratio_direction,
    )?;
    Ok(BenchmarkRun {
        model,
        steps: state.step,
        epochs,
        evaluation,
    })
}
