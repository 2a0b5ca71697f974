//! Ablation sweeps over kernel transforms, the convex weight and the fusion threshold.

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::model::{evaluate, train, EpochRecord, EvalReport, FacadeRcnn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Transconv,
    Alpha,
    Threshold,
}

impl std::str::FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transconv" => Ok(Sweep::Transconv),
            "alpha" => Ok(Sweep::Alpha),
            "threshold" => Ok(Sweep::Threshold),
            other => Err(Error::InvalidArgument(format!(
                "unknown sweep {other:?}; expected transconv, alpha or threshold"
            ))),
        }
    }
}

/// A named kernel-group choice of the transform sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransformVariant {
    pub shear: bool,
    pub flip: bool,
    pub rotate: bool,
}

impl TransformVariant {
    pub const PLAIN: TransformVariant = TransformVariant {
        shear: false,
        flip: false,
        rotate: false,
    };

    pub fn name(&self) -> String {
        let parts: Vec<&str> = [(self.shear, "shear"), (self.flip, "flip"), (self.rotate, "rotate")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "plain".into()
        } else {
            parts.join("+")
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.transconv.shear = self.shear;
        cfg.transconv.flip = self.flip;
        cfg.transconv.rotate = self.rotate;
    }
}

/// Default rows of the transform sweep.
pub fn transform_variants() -> Vec<TransformVariant> {
    let v = |shear, flip, rotate| TransformVariant { shear, flip, rotate };
    vec![
        TransformVariant::PLAIN,
        v(true, false, false),
        v(false, true, false),
        v(false, false, true),
        v(true, true, false),
    ]
}

pub const DEFAULT_ALPHAS: [f64; 5] = [0.0, 1.0 / 27.0, 1.0 / 9.0, 1.0 / 3.0, 1.0];
pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9];

/// One trained-and-evaluated model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub curve: Vec<EpochRecord>,
    pub eval: EvalReport,
}

impl RunResult {
    /// Test metrics of the model's final output: fused at `threshold`, or semantic only
    /// when the threshold was not evaluated.
    pub fn miou_at(&self, threshold: f64) -> f64 {
        self.eval.at(threshold).miou
    }
}

/// Trains `cfg` with `seed` and evaluates the test set at `thresholds`.
pub fn run_once(
    cfg: &RunConfig,
    seed: u64,
    train_set: &[LabeledSample],
    test_set: &[LabeledSample],
    thresholds: &[f64],
) -> Result<RunResult> {
    let mut cfg = cfg.clone();
    cfg.model.seed = seed;
    let mut model = FacadeRcnn::new(cfg)?;
    let report = train(&mut model, train_set, Some(test_set), |_| Ok(()))?;
    let thresholds: &[f64] = if model.has_detection() { thresholds } else { &[] };
    let eval = evaluate(&model, test_set, thresholds)?;
    Ok(RunResult {
        seed,
        curve: report.epochs,
        eval,
    })
}

/// One CSV row: medians over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: String,
    pub miou: f64,
    pub accuracy: f64,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn row(setting: String, metrics: impl Iterator<Item = (f64, f64)>) -> SweepRow {
    let (m, a): (Vec<f64>, Vec<f64>) = metrics.unzip();
    SweepRow {
        setting,
        miou: median(&m),
        accuracy: median(&a),
    }
}

/// Data and seeds shared by every sweep.
pub struct SweepSetup<'a> {
    pub base: RunConfig,
    pub seeds: Vec<u64>,
    pub train: &'a [LabeledSample],
    pub test: &'a [LabeledSample],
}

impl SweepSetup<'_> {
    fn check(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("a sweep needs at least one seed".into()));
        }
        if self.train.is_empty() || self.test.is_empty() {
            return Err(Error::InvalidArgument("a sweep needs non-empty train and test sets".into()));
        }
        Ok(())
    }

    fn runs(&self, cfg: &RunConfig, thresholds: &[f64]) -> Result<Vec<RunResult>> {
        self.seeds
            .iter()
            .map(|&seed| {
                log::info!("run seed {seed}");
                run_once(cfg, seed, self.train, self.test, thresholds)
            })
            .collect()
    }

    fn final_row(&self, setting: String, cfg: &RunConfig) -> Result<SweepRow> {
        let t = cfg.model.fuse_threshold;
        let runs = self.runs(cfg, &[t])?;
        Ok(row(setting, runs.iter().map(|r| (r.eval.at(t).miou, r.eval.at(t).accuracy))))
    }

    pub fn transconv(&self, variants: &[TransformVariant]) -> Result<Vec<SweepRow>> {
        self.check()?;
        variants
            .iter()
            .map(|v| {
                let mut cfg = self.base.clone();
                v.apply(&mut cfg);
                cfg.validate()?;
                log::info!("transform setting {}", v.name());
                self.final_row(v.name(), &cfg)
            })
            .collect()
    }

    pub fn alpha(&self, alphas: &[f64]) -> Result<Vec<SweepRow>> {
        self.check()?;
        alphas
            .iter()
            .map(|&a| {
                let mut cfg = self.base.clone();
                cfg.model.alpha = a;
                cfg.validate()?;
                log::info!("alpha setting {a}");
                self.final_row(format!("{a}"), &cfg)
            })
            .collect()
    }

    /// Trains once per seed and evaluates every threshold from the same models.
    pub fn threshold(&self, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
        self.check()?;
        if !self.base.model.detection {
            return Err(Error::InvalidArgument("the threshold sweep needs the detection branch".into()));
        }
        let runs = self.runs(&self.base, thresholds)?;
        Ok(thresholds
            .iter()
            .map(|&t| row(format!("{t}"), runs.iter().map(|r| (r.eval.at(t).miou, r.eval.at(t).accuracy))))
            .collect())
    }

    pub fn run(&self, sweep: Sweep) -> Result<Vec<SweepRow>> {
        match sweep {
            Sweep::Transconv => self.transconv(&transform_variants()),
            Sweep::Alpha => self.alpha(&DEFAULT_ALPHAS),
            Sweep::Threshold => self.threshold(&DEFAULT_THRESHOLDS),
        }
    }
}

/// `setting,miou,accuracy` with a header line.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("setting,miou,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.setting, r.miou, r.accuracy));
    }
    out
}

/// First epoch (1-based) at which `curve` reaches `target` mIoU.
pub fn epochs_to_reach(curve: &[f64], target: f64) -> Option<usize> {
    curve.iter().position(|&m| m >= target).map(|i| i + 1)
}

/// Per-epoch median of several mIoU curves of equal length.
pub fn median_curve(curves: &[Vec<f64>]) -> Vec<f64> {
    let n = curves.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|e| median(&curves.iter().map(|c| c[e]).collect::<Vec<_>>()))
        .collect()
}
