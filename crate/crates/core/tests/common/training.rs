//! Small end-to-end training runs shared by the model tests and the acceptance suite.

use facade_core::config::RunConfig;
use facade_core::data::{generate_dataset, LabeledSample, SceneParams};
use facade_core::model::{evaluate, train, FacadeRcnn, TrainReport};

pub fn scenes(count: usize, seed: u64) -> Vec<LabeledSample> {
    let params = SceneParams {
        width: 48,
        height: 48,
        seed,
        ..SceneParams::default()
    };
    generate_dataset(&params, count).unwrap().into_iter().map(|g| g.sample).collect()
}

pub fn small_config(epochs: usize, alpha: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = epochs;
    cfg.train.threads = 1;
    cfg.model.alpha = alpha;
    cfg
}

pub fn fit(cfg: &RunConfig, train_set: &[LabeledSample], eval_set: &[LabeledSample]) -> (FacadeRcnn, TrainReport) {
    let mut model = FacadeRcnn::new(cfg.clone()).unwrap();
    let report = train(&mut model, train_set, Some(eval_set), |_| Ok(())).unwrap();
    (model, report)
}

/// Trains and evaluates, returning the test metrics as JSON.
pub fn metrics_json(cfg: &RunConfig, train_set: &[LabeledSample], eval_set: &[LabeledSample]) -> String {
    let (model, _) = fit(cfg, train_set, eval_set);
    let eval = evaluate(&model, eval_set, &[0.5]).unwrap();
    serde_json::to_string(&eval).unwrap()
}

/// Largest `|total - (semantic + proposal + detection + alpha * cvx)|` over every
/// sample of every step of a short run, and the number of steps checked.
pub fn additivity_worst(alpha: f64) -> (f64, usize) {
    let data = scenes(12, 3);
    let (_, report) = fit(&small_config(2, alpha), &data[..8], &data[8..]);
    let worst = report.steps.iter().map(|s| s.additivity_error(alpha)).fold(0.0, f64::max);
    (worst, report.steps.len())
}
