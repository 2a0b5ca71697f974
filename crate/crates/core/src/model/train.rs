use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::infer::evaluate;
use super::loss::LossReport;
use super::network::{ChannelStats, FacadeRcnn};
use crate::config::{NormUpdate, OptimizerChoice};
use crate::convex::argmax_labels;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, IGNORE_INDEX};
use crate::geometry::LabelMap;
use crate::tensor::{optimizer_step, OptimState, OptimizerKind, Tape};

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub semantic: f64,
    pub proposal: f64,
    pub detection: f64,
    pub cvx: f64,
    pub total: f64,
    pub miou: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every sample of every step, in processing order.
    pub steps: Vec<LossReport>,
}

struct SampleOutcome {
    grads: Vec<Option<Vec<f64>>>,
    report: LossReport,
    stats: Vec<ChannelStats>,
    pred: LabelMap,
}

const CALIBRATION_SAMPLES: usize = 8;
const SHUFFLE_STREAM: u64 = 0x5348_5546;

fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn sample_step(model: &FacadeRcnn, sample: &LabeledSample, rng: &mut ChaCha8Rng) -> Result<SampleOutcome> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape);
    let collect = model.config().train.norm_stats == NormUpdate::Running;
    let fwd = model.forward(&mut tape, &p, &sample.image, collect)?;
    let (total, report) = model.total_loss(&mut tape, &p, &fwd, sample, rng)?;
    let labels = argmax_labels(tape.value(fwd.logits))?.into_iter().map(|c| c as u8).collect();
    let pred = LabelMap::new(fwd.width, fwd.height, labels)?;
    let grads = if report.is_finite() {
        let g = tape.backward(total)?;
        model.params().collect_grads(&tape, &g, &p.bindings(model.params()))
    } else {
        Vec::new()
    };
    Ok(SampleOutcome {
        grads,
        report,
        stats: fwd.norm_stats,
        pred,
    })
}

fn run_batch(model: &FacadeRcnn, samples: &[(&LabeledSample, ChaCha8Rng)], threads: usize) -> Vec<Result<SampleOutcome>> {
    if threads <= 1 || samples.len() <= 1 {
        return samples.iter().map(|(s, r)| sample_step(model, s, &mut r.clone())).collect();
    }
    let per = samples.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(per)
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|(s, r)| sample_step(model, s, &mut r.clone()))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("training worker panicked"))
            .collect()
    })
}

fn mean_report(steps: &[LossReport]) -> LossReport {
    let n = steps.len().max(1) as f64;
    let mut m = LossReport::default();
    for s in steps {
        m.semantic += s.semantic / n;
        m.proposal += s.proposal / n;
        m.detection += s.detection / n;
        m.cvx += s.cvx / n;
        m.total += s.total / n;
    }
    m
}

/// Trains in place with mini-batch gradient descent.
///
/// Each sample is processed on its own tape; gradients are averaged over the batch in
/// sample order, so results do not depend on the worker count. After every epoch the
/// model is scored on `eval_set` (fused at the configured threshold), or on its own
/// training predictions when no evaluation set is given, and `on_epoch` receives the
/// record.
pub fn train(
    model: &mut FacadeRcnn,
    train_set: &[LabeledSample],
    eval_set: Option<&[LabeledSample]>,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainReport> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let cfg = model.config().clone();
    let t = &cfg.train;
    let kind = match t.optimizer {
        OptimizerChoice::Adam => OptimizerKind::adam(),
        OptimizerChoice::Sgd => OptimizerKind::Sgd,
    };
    let mut opt = OptimState::new(kind, t.learning_rate, t.weight_decay)?;
    let threads = cfg.threads();
    let seed = cfg.model.seed;
    let calib: Vec<_> = train_set.iter().take(CALIBRATION_SAMPLES).map(|s| &s.image).collect();
    model.calibrate_norms(&calib)?;
    let mut report = TrainReport::default();
    let mut step = 0;
    let total_steps = t.epochs * train_set.len().div_ceil(t.batch_size);
    for epoch in 1..=t.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle = ChaCha8Rng::seed_from_u64(seed ^ SHUFFLE_STREAM);
        shuffle.set_stream(epoch as u64);
        order.shuffle(&mut shuffle);
        let mut epoch_steps = Vec::with_capacity(train_set.len());
        let mut confusion = ConfusionMatrix::new(model.classes());
        for batch in order.chunks(t.batch_size) {
            let work: Vec<(&LabeledSample, ChaCha8Rng)> = batch
                .iter()
                .map(|&i| (&train_set[i], sample_rng(seed, epoch, i)))
                .collect();
            let outcomes = run_batch(model, &work, threads);
            model.params_mut().zero_grads();
            let mut stats = Vec::with_capacity(batch.len());
            for (outcome, (sample, _)) in outcomes.into_iter().zip(&work) {
                let o = outcome?;
                if !o.report.is_finite() {
                    return Err(Error::Divergence { epoch, step });
                }
                model.params_mut().accumulate(&o.grads)?;
                confusion.add(&o.pred, &sample.semantic, IGNORE_INDEX)?;
                epoch_steps.push(o.report);
                stats.push(o.stats);
            }
            model.params_mut().scale_grads(1.0 / batch.len() as f64);
            opt.learning_rate = t.schedule.rate(t.learning_rate, step, total_steps);
            optimizer_step(model.params_mut(), &mut opt)?;
            if t.norm_stats == NormUpdate::Running {
                model.update_norm_stats(&stats)?;
            }
            if model.params().iter().any(|p| !p.value.is_finite()) {
                return Err(Error::Divergence { epoch, step });
            }
            step += 1;
        }
        let m = mean_report(&epoch_steps);
        let metrics = match eval_set {
            Some(set) if !set.is_empty() => {
                let tf = cfg.model.fuse_threshold;
                let thresholds: &[f64] = if model.has_detection() { &[tf] } else { &[] };
                evaluate(model, set, thresholds)?.at(tf).clone()
            }
            _ => confusion.report(),
        };
        let record = EpochRecord {
            epoch,
            semantic: m.semantic,
            proposal: m.proposal,
            detection: m.detection,
            cvx: m.cvx,
            total: m.total,
            miou: metrics.miou,
            accuracy: metrics.accuracy,
        };
        log::info!(
            "epoch {epoch}: loss {:.4} (sem {:.4} rpn {:.4} det {:.4} cvx {:.4}) mIoU {:.4} acc {:.4}",
            m.total,
            m.semantic,
            m.proposal,
            m.detection,
            m.cvx,
            record.miou,
            record.accuracy
        );
        on_epoch(&record)?;
        report.epochs.push(record);
        report.steps.extend(epoch_steps);
    }
    Ok(report)
}
