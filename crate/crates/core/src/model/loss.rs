use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{Bound, FacadeRcnn, Forward};
use crate::convex::{argmax_labels, convex_loss_from_targets, convex_targets, ConvexTargetSet};
use crate::data::LabeledSample;
use crate::detect::{
    assign_roi_targets, detection_loss, match_anchors, proposal_loss, sample_anchors, select_proposals,
    AnchorLabel, DetectionTarget, ProposalConfig, RoiSampling,
};
use crate::error::Result;
use crate::geometry::{Rect, IGNORE_LABEL};
use crate::tensor::{Tape, Tensor, Var};

const RPN_POS_IOU: f64 = 0.7;
const RPN_NEG_IOU: f64 = 0.3;
const TRAIN_PROPOSAL_NMS: f64 = 0.7;

/// The four loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub semantic: f64,
    pub proposal: f64,
    pub detection: f64,
    pub cvx: f64,
    pub total: f64,
}

impl LossReport {
    /// `|total - (semantic + proposal + detection + alpha * cvx)|`.
    pub fn additivity_error(&self, alpha: f64) -> f64 {
        (self.total - (self.semantic + self.proposal + self.detection + alpha * self.cvx)).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.semantic, self.proposal, self.detection, self.cvx, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Scalar loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub semantic: Var,
    pub proposal: Var,
    pub detection: Var,
    pub cvx: Var,
}

/// `total = semantic + proposal + detection + alpha * cvx`, with its report.
pub fn combine_losses(tape: &mut Tape, terms: LossTerms, alpha: f64) -> Result<(Var, LossReport)> {
    let weighted = tape.scale(terms.cvx, alpha);
    let total = tape.add_all(&[terms.semantic, terms.proposal, terms.detection, weighted])?;
    let item = |v: Var| tape.value(v).item();
    let report = LossReport {
        semantic: item(terms.semantic)?,
        proposal: item(terms.proposal)?,
        detection: item(terms.detection)?,
        cvx: item(terms.cvx)?,
        total: item(total)?,
    };
    Ok((total, report))
}

/// Supervision derived for one sample from the current prediction. Targets are constants
/// within a step: the convex masks depend on the argmax and the regions on the proposals.
#[derive(Clone, Debug)]
pub struct LossTargets {
    pub semantic: Vec<Option<usize>>,
    pub convex: ConvexTargetSet,
    pub gt_rects: Vec<Rect>,
    pub anchor_labels: Vec<AnchorLabel>,
    pub rois: Vec<Rect>,
    pub roi_targets: Vec<DetectionTarget>,
}

/// Semantic targets with the ignore label mapped to `None`.
pub fn semantic_targets(sample: &LabeledSample) -> Vec<Option<usize>> {
    sample
        .semantic
        .labels
        .iter()
        .map(|&l| (l != IGNORE_LABEL).then_some(l as usize))
        .collect()
}

impl FacadeRcnn {
    pub fn prepare_targets(
        &self,
        tape: &Tape,
        fwd: &Forward,
        sample: &LabeledSample,
        rng: &mut impl Rng,
    ) -> Result<LossTargets> {
        let cfg = self.config();
        let pred = argmax_labels(tape.value(fwd.logits))?;
        let convex = convex_targets(&pred, fwd.width, fwd.height, &sample.instance_masks(), &cfg.convex_config())?;
        let mut targets = LossTargets {
            semantic: semantic_targets(sample),
            convex,
            gt_rects: Vec::new(),
            anchor_labels: Vec::new(),
            rois: Vec::new(),
            roi_targets: Vec::new(),
        };
        let (Some(obj), Some(del)) = (fwd.objectness, fwd.rpn_deltas) else {
            return Ok(targets);
        };
        let gts = sample.gt_boxes(&cfg.detection_classes());
        targets.gt_rects = gts.iter().map(|g| g.envelope()).collect();
        let anchor_rects: Vec<Rect> = fwd.anchors.iter().map(|a| a.rect()).collect();
        let labels = match_anchors(&anchor_rects, &targets.gt_rects, RPN_POS_IOU, RPN_NEG_IOU);
        targets.anchor_labels = sample_anchors(&labels, cfg.detect.rpn_batch, rng);
        let proposals = select_proposals(
            tape.value(obj).data(),
            tape.value(del).data(),
            &fwd.anchors,
            fwd.width,
            fwd.height,
            ProposalConfig {
                pre_nms_top_n: cfg.detect.pre_nms_top_n,
                post_nms_top_n: cfg.detect.post_nms_top_n,
                nms_iou: TRAIN_PROPOSAL_NMS,
                ..ProposalConfig::default()
            },
        );
        let rects: Vec<Rect> = proposals.iter().map(|p| p.rect).collect();
        let sampling = RoiSampling {
            batch: cfg.detect.roi_batch,
            ..RoiSampling::default()
        };
        let (rois, roi_targets) = assign_roi_targets(&rects, &gts, sampling, rng);
        targets.rois = rois;
        targets.roi_targets = roi_targets;
        Ok(targets)
    }

    /// Loss terms for prepared targets; the detection terms are zero constants when the
    /// branch is disabled or nothing was sampled.
    pub fn loss_terms(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fwd: &Forward,
        sample: &LabeledSample,
        targets: &LossTargets,
    ) -> Result<LossTerms> {
        let semantic = tape.cross_entropy(fwd.logits, &targets.semantic)?;
        let cvx = convex_loss_from_targets(tape, fwd.logits, &sample.semantic, &targets.convex, self.config().convex.label)?;
        let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
        let proposal = match (fwd.objectness, fwd.rpn_deltas) {
            (Some(obj), Some(del)) => proposal_loss(tape, obj, del, &fwd.anchors, &targets.gt_rects, &targets.anchor_labels)?,
            _ => zero(tape),
        };
        let detection = if self.has_detection() && !targets.rois.is_empty() {
            let (cls, reg) = self.head(tape, p, fwd.feature, &targets.rois)?;
            detection_loss(tape, cls, reg, &targets.roi_targets)?
        } else {
            zero(tape)
        };
        Ok(LossTerms {
            semantic,
            proposal,
            detection,
            cvx,
        })
    }

    /// Full combined loss of one sample from its forward pass.
    pub fn total_loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        fwd: &Forward,
        sample: &LabeledSample,
        rng: &mut impl Rng,
    ) -> Result<(Var, LossReport)> {
        let targets = self.prepare_targets(tape, fwd, sample, rng)?;
        let terms = self.loss_terms(tape, p, fwd, sample, &targets)?;
        combine_losses(tape, terms, self.config().model.alpha)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combine_is_weighted_sum() {
        let mut tape = Tape::new();
        let v = |tape: &mut Tape, x: f64| tape.leaf(Tensor::scalar(x), true);
        let terms = LossTerms {
            semantic: v(&mut tape, 1.25),
            proposal: v(&mut tape, 0.5),
            detection: v(&mut tape, 2.0),
            cvx: v(&mut tape, 0.9),
        };
        let (total, r) = combine_losses(&mut tape, terms, 1.0 / 9.0).unwrap();
        assert!((r.total - 3.85).abs() < 1e-12);
        assert!(r.additivity_error(1.0 / 9.0) < 1e-12);
        let g = tape.backward(total).unwrap();
        assert!((g.get(&tape, terms.cvx).item().unwrap() - 1.0 / 9.0).abs() < 1e-15);
        let (_, r0) = combine_losses(&mut tape, terms, 0.0).unwrap();
        assert_eq!(r0.total, 1.25 + 0.5 + 2.0);
    }
}
