use super::anchors::{encode_box, encode_head_box, Anchor, AnchorLabel};
use crate::error::{shape_err, Result};
use crate::geometry::Rect;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;

/// Regression and classification target of one sampled region.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionTarget {
    pub cls_index: usize,
    /// Deltas for the TL-BR and TR-BL rectangles; `None` for background regions.
    pub deltas: Option<[[f64; 4]; 2]>,
}

/// A ground-truth generalized box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GtBox {
    pub tlbr: Rect,
    pub trbl: Rect,
    pub class: usize,
}

impl GtBox {
    /// Axis-aligned envelope of the quadrilateral.
    pub fn envelope(&self) -> Rect {
        Rect {
            x_min: self.tlbr.x_min.min(self.trbl.x_min),
            y_min: self.tlbr.y_min.min(self.trbl.y_min),
            x_max: self.tlbr.x_max.max(self.trbl.x_max),
            y_max: self.tlbr.y_max.max(self.trbl.y_max),
        }
    }
}

/// Binary cross-entropy over sampled anchors plus smooth-L1 over the deltas of positive
/// anchors, both divided by the number of sampled anchors.
///
/// `objectness` holds one logit per anchor, `deltas` is `[A,4]`. Anchors labelled
/// [`AnchorLabel::Ignore`] do not contribute; with nothing sampled the loss is zero.
pub fn proposal_loss(
    tape: &mut Tape,
    objectness: Var,
    deltas: Var,
    anchors: &[Anchor],
    gts: &[Rect],
    labels: &[AnchorLabel],
) -> Result<Var> {
    let a = anchors.len();
    if tape.value(objectness).numel() != a || labels.len() != a {
        return Err(shape_err!(
            "proposal_loss: {} objectness logits and {} labels for {a} anchors",
            tape.value(objectness).numel(),
            labels.len()
        ));
    }
    if tape.shape(deltas) != [a, 4] {
        return Err(shape_err!("proposal_loss: deltas {:?}, expected [{a}, 4]", tape.shape(deltas)));
    }
    let sampled = labels.iter().filter(|l| **l != AnchorLabel::Ignore).count();
    if sampled == 0 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let inv = 1.0 / sampled as f64;
    let shape = tape.shape(objectness).to_vec();
    let mut targets = Tensor::zeros(&shape);
    let mut weights = Tensor::zeros(&shape);
    let mut reg_target = Tensor::zeros(&[a, 4]);
    let mut reg_mask = Tensor::zeros(&[a, 4]);
    for (i, label) in labels.iter().enumerate() {
        match *label {
            AnchorLabel::Positive(j) => {
                targets.data_mut()[i] = 1.0;
                weights.data_mut()[i] = inv;
                let d = encode_box(&anchors[i].rect(), &gts[j]);
                reg_target.data_mut()[i * 4..i * 4 + 4].copy_from_slice(&d);
                reg_mask.data_mut()[i * 4..i * 4 + 4].fill(1.0);
            }
            AnchorLabel::Negative => weights.data_mut()[i] = inv,
            AnchorLabel::Ignore => {}
        }
    }
    let cls = tape.bce_with_logits(objectness, &targets, &weights)?;
    let reg = masked_smooth_l1_sum(tape, deltas, &reg_target, &reg_mask)?;
    let reg = tape.scale(reg, inv);
    tape.add(cls, reg)
}

/// `Σ smoothL1(mask ⊙ (x − target))`.
fn masked_smooth_l1_sum(tape: &mut Tape, x: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
    let diff = tape.add_const(x, &target.scaled(-1.0))?;
    let masked = tape.mul_const(diff, mask)?;
    let l = tape.smooth_l1(masked);
    Ok(tape.sum(l))
}

/// Mean over the `K` regions of cross-entropy plus the smooth-L1 sum over all eight
/// rectangle deltas (background regions carry no regression term).
///
/// `cls_logits` is `[K,C]` and `deltas` is `[K,8]`: TL-BR deltas then TR-BL deltas.
pub fn detection_loss(
    tape: &mut Tape,
    cls_logits: Var,
    deltas: Var,
    targets: &[DetectionTarget],
) -> Result<Var> {
    let k = targets.len();
    let &[kl, _] = tape.shape(cls_logits) else {
        return Err(shape_err!("detection_loss: class logits must be [K,C], got {:?}", tape.shape(cls_logits)));
    };
    if kl != k || tape.shape(deltas) != [k, 8] {
        return Err(shape_err!(
            "detection_loss: {k} targets for class logits {:?} and deltas {:?}",
            tape.shape(cls_logits),
            tape.shape(deltas)
        ));
    }
    let classes: Vec<Option<usize>> = targets.iter().map(|t| Some(t.cls_index)).collect();
    let ce = tape.cross_entropy(cls_logits, &classes)?;
    let mut reg_target = Tensor::zeros(&[k, 8]);
    let mut reg_mask = Tensor::zeros(&[k, 8]);
    for (i, t) in targets.iter().enumerate() {
        if let Some([a, b]) = t.deltas {
            reg_target.data_mut()[i * 8..i * 8 + 4].copy_from_slice(&a);
            reg_target.data_mut()[i * 8 + 4..i * 8 + 8].copy_from_slice(&b);
            reg_mask.data_mut()[i * 8..i * 8 + 8].fill(1.0);
        }
    }
    let reg = masked_smooth_l1_sum(tape, deltas, &reg_target, &reg_mask)?;
    let reg = tape.scale(reg, 1.0 / k as f64);
    tape.add(ce, reg)
}

/// Region sampling for the detection head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSampling {
    pub batch: usize,
    pub fg_fraction: f64,
    /// Envelope IoU at which a region counts as foreground.
    pub fg_iou: f64,
}

impl Default for RoiSampling {
    fn default() -> Self {
        RoiSampling {
            batch: 32,
            fg_fraction: 0.5,
            fg_iou: 0.5,
        }
    }
}

/// Samples regions from `proposals` plus the ground-truth envelopes and builds their
/// targets. Matching uses IoU against each ground truth's axis-aligned envelope.
/// Foreground regions come first, each group in candidate order.
pub fn assign_roi_targets(
    proposals: &[Rect],
    gts: &[GtBox],
    cfg: RoiSampling,
    rng: &mut impl Rng,
) -> (Vec<Rect>, Vec<DetectionTarget>) {
    let mut candidates: Vec<Rect> = proposals.to_vec();
    candidates.extend(gts.iter().map(GtBox::envelope));
    let envelopes: Vec<Rect> = gts.iter().map(GtBox::envelope).collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        let best = envelopes
            .iter()
            .enumerate()
            .map(|(j, e)| (j, c.iou(e)))
            .fold(None, |acc: Option<(usize, f64)>, (j, v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((j, v)),
            });
        match best {
            Some((j, v)) if v >= cfg.fg_iou => fg.push((i, j)),
            _ => bg.push(i),
        }
    }
    let n_fg = fg.len().min((cfg.batch as f64 * cfg.fg_fraction) as usize);
    let n_bg = bg.len().min(cfg.batch - n_fg);
    let mut fg_pick: Vec<usize> = sample(rng, fg.len(), n_fg).into_vec();
    let mut bg_pick: Vec<usize> = sample(rng, bg.len(), n_bg).into_vec();
    fg_pick.sort_unstable();
    bg_pick.sort_unstable();
    let mut rois = Vec::with_capacity(n_fg + n_bg);
    let mut targets = Vec::with_capacity(n_fg + n_bg);
    for k in fg_pick {
        let (i, j) = fg[k];
        let r = candidates[i];
        rois.push(r);
        targets.push(DetectionTarget {
            cls_index: gts[j].class,
            deltas: Some([encode_head_box(&r, &gts[j].tlbr), encode_head_box(&r, &gts[j].trbl)]),
        });
    }
    for k in bg_pick {
        rois.push(candidates[bg[k]]);
        targets.push(DetectionTarget {
            cls_index: 0,
            deltas: None,
        });
    }
    (rois, targets)
}
