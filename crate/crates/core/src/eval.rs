//! Score-threshold fusion of detections into semantic label maps, and segmentation
//! metrics.

use crate::error::{shape_err, Error, Result};
use crate::geometry::{GeneralizedBBox, LabelMap, IGNORE_LABEL};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Semantic,
    Detection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPrediction {
    pub labels: LabelMap,
    /// Row-major, one entry per pixel.
    pub provenance: Vec<Provenance>,
}

impl FusedPrediction {
    pub fn detection_pixels(&self) -> usize {
        self.provenance.iter().filter(|&&p| p == Provenance::Detection).count()
    }
}

/// Overrides the semantic label of every pixel covered by a detection scoring strictly
/// above `threshold`. Where detections overlap, the highest score wins (the earliest
/// detection on exact ties). Crossed or degenerate quads are skipped.
pub fn fuse(semantic: &LabelMap, detections: &[GeneralizedBBox], threshold: f64) -> Result<FusedPrediction> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!("fusion threshold {threshold} outside [0, 1]")));
    }
    let (w, h) = (semantic.width, semantic.height);
    let mut labels = semantic.clone();
    let mut provenance = vec![Provenance::Semantic; w * h];
    let mut best = vec![f64::NEG_INFINITY; w * h];
    for det in detections.iter().filter(|d| d.score > threshold) {
        let Ok(mask) = det.corners().rasterize(w, h) else { continue };
        let class = u8::try_from(det.class())
            .map_err(|_| Error::InvalidArgument(format!("detection class {} does not fit a label", det.class())))?;
        for (i, &on) in mask.bits().iter().enumerate() {
            if on && det.score > best[i] {
                best[i] = det.score;
                labels.labels[i] = class;
                provenance[i] = Provenance::Detection;
            }
        }
    }
    Ok(FusedPrediction { labels, provenance })
}

/// `C x C` pixel counts, rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Accumulates one label pair, skipping pixels whose ground truth is `ignore_index`.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: u8) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height {
            return Err(shape_err!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.width,
                pred.height,
                gt.width,
                gt.height
            ));
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.classes || g >= self.classes {
                return Err(Error::InvalidArgument(format!(
                    "label pair ({g}, {p}) outside {} classes",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging matrices of different size");
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from the ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let gt: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let pred: u64 = (0..c).map(|j| self.get(j, k)).sum();
                (gt > 0).then(|| tp as f64 / (gt + pred - tp) as f64)
            })
            .collect()
    }

    /// Mean IoU over classes present in the ground truth; 0 for an empty matrix.
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        trace as f64 / total as f64
    }

    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            per_class_iou: self.iou_per_class(),
            miou: self.miou(),
            accuracy: self.pixel_accuracy(),
            pixels: self.total(),
        }
    }
}

pub fn confusion_matrix(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore_index: u8) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes);
    m.add(pred, gt, ignore_index)?;
    Ok(m)
}

/// Metrics of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// `null` for classes without ground-truth pixels.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
    pub pixels: u64,
}

/// Default ignore value for [`confusion_matrix`].
pub const IGNORE_INDEX: u8 = IGNORE_LABEL;
