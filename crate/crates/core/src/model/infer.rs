use serde::{Deserialize, Serialize};

use super::network::FacadeRcnn;
use crate::convex::argmax_labels;
use crate::data::LabeledSample;
use crate::detect::{decode_detections, select_proposals, DecodeConfig, ProposalConfig};
use crate::error::{Error, Result};
use crate::eval::{fuse, ConfusionMatrix, FusedPrediction, MetricsReport, IGNORE_INDEX};
use crate::geometry::{GeneralizedBBox, LabelMap, Rect};
use crate::tensor::{Tape, Tensor};

/// Inference output for one image.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[1,C,H,W]`.
    pub logits: Tensor,
    pub semantic: LabelMap,
    /// Sorted by descending score.
    pub detections: Vec<GeneralizedBBox>,
}

impl Prediction {
    pub fn fused(&self, threshold: f64) -> Result<FusedPrediction> {
        fuse(&self.semantic, &self.detections, threshold)
    }
}

impl FacadeRcnn {
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape);
        let fwd = self.forward(&mut tape, &p, image, false)?;
        let logits = tape.value(fwd.logits).clone();
        let labels = argmax_labels(&logits)?.into_iter().map(|c| c as u8).collect();
        let semantic = LabelMap::new(fwd.width, fwd.height, labels)?;
        let mut detections = Vec::new();
        if let (Some(obj), Some(del)) = (fwd.objectness, fwd.rpn_deltas) {
            let det = &self.config().detect;
            let proposals = select_proposals(
                tape.value(obj).data(),
                tape.value(del).data(),
                &fwd.anchors,
                fwd.width,
                fwd.height,
                ProposalConfig {
                    pre_nms_top_n: det.pre_nms_top_n,
                    post_nms_top_n: det.post_nms_top_n,
                    ..ProposalConfig::default()
                },
            );
            if !proposals.is_empty() {
                let rois: Vec<Rect> = proposals.iter().map(|p| p.rect).collect();
                let (cls, reg) = self.head(&mut tape, &p, fwd.feature, &rois)?;
                let cfg = DecodeConfig {
                    score_threshold: det.score_threshold,
                    iou_threshold: det.nms_iou,
                    ..DecodeConfig::default()
                };
                let allowed = self.config().detection_classes();
                detections = decode_detections(tape.value(cls), tape.value(reg), &rois, cfg)
                    .into_iter()
                    .filter(|d| allowed.contains(&d.class()))
                    .collect();
            }
        }
        Ok(Prediction {
            logits,
            semantic,
            detections,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdMetrics {
    pub threshold: f64,
    pub metrics: MetricsReport,
}

/// Metrics of the semantic branch alone and of the fused output at each threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub semantic: MetricsReport,
    pub fused: Vec<ThresholdMetrics>,
}

impl EvalReport {
    /// Fused metrics at `threshold`, or the semantic metrics when it was not evaluated.
    pub fn at(&self, threshold: f64) -> &MetricsReport {
        self.fused
            .iter()
            .find(|t| t.threshold == threshold)
            .map_or(&self.semantic, |t| &t.metrics)
    }
}

/// Evaluates `samples`, fusing detections at every threshold from one forward pass.
/// `visit` sees each sample with its prediction, in order.
pub fn evaluate_with(
    model: &FacadeRcnn,
    samples: &[LabeledSample],
    thresholds: &[f64],
    mut visit: impl FnMut(&LabeledSample, &Prediction) -> Result<()>,
) -> Result<EvalReport> {
    if let Some(t) = thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("fusion threshold {t} outside [0, 1]")));
    }
    let c = model.classes();
    let mut semantic = ConfusionMatrix::new(c);
    let mut fused = vec![ConfusionMatrix::new(c); thresholds.len()];
    for s in samples {
        let pred = model.predict(&s.image)?;
        semantic.add(&pred.semantic, &s.semantic, IGNORE_INDEX)?;
        for (m, &t) in fused.iter_mut().zip(thresholds) {
            m.add(&pred.fused(t)?.labels, &s.semantic, IGNORE_INDEX)?;
        }
        visit(s, &pred)?;
    }
    Ok(EvalReport {
        samples: samples.len(),
        semantic: semantic.report(),
        fused: thresholds
            .iter()
            .zip(&fused)
            .map(|(&threshold, m)| ThresholdMetrics {
                threshold,
                metrics: m.report(),
            })
            .collect(),
    })
}

pub fn evaluate(model: &FacadeRcnn, samples: &[LabeledSample], thresholds: &[f64]) -> Result<EvalReport> {
    evaluate_with(model, samples, thresholds, |_, _| Ok(()))
}
