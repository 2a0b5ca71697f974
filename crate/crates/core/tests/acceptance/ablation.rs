//! Direction-level ablations on the synthetic deformed-facade set.

use std::time::{Duration, Instant};

use facade_core::config::RunConfig;
use facade_core::data::{generate_dataset, LabeledSample, SceneParams};
use facade_core::experiment::{epochs_to_reach, median, median_curve, run_once, RunResult, TransformVariant};

use crate::Outcome;

const SAMPLES: usize = 250;
const TRAIN: usize = 200;
const SEEDS: [u64; 3] = [0, 1, 2];
pub const EPOCHS: usize = 16;
const BUDGET: Duration = Duration::from_secs(30 * 60);
const THRESHOLDS: [f64; 3] = [0.0, 0.5, 0.9];

pub struct Ablation {
    pub plain: Vec<RunResult>,
    pub shear_flip: Vec<RunResult>,
    pub convex: Vec<RunResult>,
    pub elapsed: Duration,
}

fn base_config(alpha: f64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.epochs = EPOCHS;
    cfg.model.alpha = alpha;
    cfg
}

fn runs(cfg: &RunConfig, train: &[LabeledSample], test: &[LabeledSample], label: &str) -> Vec<RunResult> {
    SEEDS
        .iter()
        .map(|&seed| {
            let t = Instant::now();
            let r = run_once(cfg, seed, train, test, &THRESHOLDS).expect("ablation run");
            let curve: Vec<String> = r.curve.iter().map(|e| format!("{:.4}", e.miou)).collect();
            println!(
                "    {label} seed {seed}: semantic {:.4}, fused T=0 {:.4} T=0.5 {:.4} T=0.9 {:.4}, curve [{}] ({:.0?})",
                r.eval.semantic.miou,
                r.miou_at(0.0),
                r.miou_at(0.5),
                r.miou_at(0.9),
                curve.join(" "),
                t.elapsed()
            );
            r
        })
        .collect()
}

pub fn run() -> Ablation {
    let start = Instant::now();
    let params = SceneParams {
        shear_range: (-40.0, 40.0),
        width: 96,
        height: 96,
        ..SceneParams::default()
    };
    let data: Vec<LabeledSample> = generate_dataset(&params, SAMPLES)
        .expect("synthetic set")
        .into_iter()
        .map(|g| g.sample)
        .collect();
    let (train, test) = data.split_at(TRAIN);

    let plain = base_config(0.0);
    let mut shear_flip = base_config(0.0);
    TransformVariant {
        shear: true,
        flip: true,
        rotate: false,
    }
    .apply(&mut shear_flip);
    let convex = base_config(1.0 / 9.0);

    Ablation {
        plain: runs(&plain, train, test, "plain"),
        shear_flip: runs(&shear_flip, train, test, "shear+flip"),
        convex: runs(&convex, train, test, "alpha=1/9"),
        elapsed: start.elapsed(),
    }
}

fn final_mious(runs: &[RunResult], threshold: f64) -> Vec<f64> {
    runs.iter().map(|r| r.miou_at(threshold)).collect()
}

fn curves(runs: &[RunResult]) -> Vec<Vec<f64>> {
    runs.iter().map(|r| r.curve.iter().map(|e| e.miou).collect()).collect()
}

impl Ablation {
    pub fn budget(&self) -> Outcome {
        Outcome::new(
            self.elapsed < BUDGET,
            format!("{} trainings in {:.0?} (limit {:.0?})", 3 * SEEDS.len(), self.elapsed, BUDGET),
        )
    }

    /// Transform groups, compared on the default output (fused at T = 0.5).
    pub fn transconv(&self) -> Outcome {
        let a = median(&final_mious(&self.shear_flip, 0.5));
        let b = median(&final_mious(&self.plain, 0.5));
        Outcome::new(a >= b, format!("median test mIoU shear+flip {a:.4} vs plain {b:.4}"))
    }

    /// Fusion thresholds, on the α = 1/9 models.
    pub fn threshold(&self) -> Outcome {
        let [t0, t5, t9] = THRESHOLDS.map(|t| median(&final_mious(&self.convex, t)));
        Outcome::new(
            t5 >= t0.max(t9),
            format!("median test mIoU T=0.5 {t5:.4} vs T=0 {t0:.4}, T=0.9 {t9:.4}"),
        )
    }

    /// Convex regularization against the α = 0 baseline.
    pub fn convergence(&self) -> Outcome {
        let base = median_curve(&curves(&self.plain));
        let reg = median_curve(&curves(&self.convex));
        let target = *base.last().expect("non-empty curve");
        let reached = epochs_to_reach(&reg, target);
        let last = *reg.last().expect("non-empty curve");
        let ok = reached.is_some_and(|e| e < base.len()) || last > target;
        Outcome::new(
            ok,
            format!(
                "baseline final mIoU {target:.4} after {} epochs; alpha=1/9 reaches it at epoch {}, final {last:.4}",
                base.len(),
                reached.map_or("never".to_string(), |e| e.to_string())
            ),
        )
    }
}
