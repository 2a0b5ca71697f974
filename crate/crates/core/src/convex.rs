//! Convex regularization: targets built from the hulls of predicted instance fragments,
//! and the cross-entropy that pulls predictions toward them.

use crate::error::{shape_err, Error, Result};
use crate::geometry::{convex_hull_of_pixels, LabelMap, PixelMask, IGNORE_LABEL};
use crate::tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

/// Where the regularization target comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Hull of prediction ∩ ground-truth instance, recomputed from every prediction.
    Hull,
    /// The ground-truth instances themselves (an extra loss weight on instance pixels).
    GroundTruth,
}

/// Label supervised on target pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The regularized class, even where the ground truth says otherwise.
    Class,
    /// The ground-truth label of each target pixel; ignored pixels are skipped.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexConfig {
    /// Classes with convex instance shapes; must be non-empty.
    pub classes: Vec<usize>,
    pub target: TargetMode,
    pub label: LabelMode,
}

/// Window, door and shop in the default label set.
pub const DEFAULT_CONVEX_CLASSES: [usize; 3] = [2, 3, 5];

impl Default for ConvexConfig {
    fn default() -> Self {
        ConvexConfig {
            classes: DEFAULT_CONVEX_CLASSES.to_vec(),
            target: TargetMode::Hull,
            label: LabelMode::Class,
        }
    }
}

/// Union over instances of the rasterized hull of `pred ∩ instance`.
pub fn convex_target(pred: &PixelMask, instances: &[&PixelMask]) -> Result<PixelMask> {
    let (w, h) = (pred.width(), pred.height());
    let mut out = PixelMask::new(w, h);
    for inst in instances {
        let part = pred.intersection(inst)?;
        if part.is_empty() {
            continue;
        }
        let hull = convex_hull_of_pixels(part.iter_set())?;
        out.union_with(&hull.rasterize(w, h))?;
    }
    Ok(out)
}

/// Target masks for every configured class, in `cfg.classes` order.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvexTargetSet {
    pub classes: Vec<usize>,
    pub masks: Vec<PixelMask>,
}

/// Per-pixel argmax over axis 1 of `[1,C,H,W]` logits; ties go to the lower class.
pub fn argmax_labels(logits: &Tensor) -> Result<Vec<usize>> {
    let &[1, c, h, w] = logits.shape() else {
        return Err(shape_err!("argmax_labels needs [1,C,H,W], got {:?}", logits.shape()));
    };
    let plane = h * w;
    let x = logits.data();
    Ok((0..plane)
        .map(|p| {
            (1..c).fold(0, |best, k| if x[k * plane + p] > x[best * plane + p] { k } else { best })
        })
        .collect())
}

pub fn convex_targets(
    pred: &[usize],
    width: usize,
    height: usize,
    instances: &[(usize, &PixelMask)],
    cfg: &ConvexConfig,
) -> Result<ConvexTargetSet> {
    if pred.len() != width * height {
        return Err(shape_err!("prediction has {} pixels, expected {}", pred.len(), width * height));
    }
    let mut masks = Vec::with_capacity(cfg.classes.len());
    for &class in &cfg.classes {
        let insts: Vec<&PixelMask> = instances.iter().filter(|(c, _)| *c == class).map(|(_, m)| *m).collect();
        let mask = match cfg.target {
            TargetMode::Hull => {
                let s = PixelMask::from_bits(width, height, pred.iter().map(|&p| p == class).collect())?;
                convex_target(&s, &insts)?
            }
            TargetMode::GroundTruth => {
                let mut m = PixelMask::new(width, height);
                for inst in insts {
                    m.union_with(inst)?;
                }
                m
            }
        };
        masks.push(mask);
    }
    Ok(ConvexTargetSet {
        classes: cfg.classes.clone(),
        masks,
    })
}

/// `(1/|C_cls|) Σ_i` mean cross-entropy over the pixels of class `i`'s target. Empty
/// targets contribute zero but still count in the denominator.
///
/// `logits` is `[1,C,H,W]`; targets are derived from its argmax and held constant.
pub fn convex_loss(
    tape: &mut Tape,
    logits: Var,
    gt: &LabelMap,
    instances: &[(usize, &PixelMask)],
    cfg: &ConvexConfig,
) -> Result<Var> {
    if cfg.classes.is_empty() {
        return Err(Error::InvalidArgument("convex regularization needs at least one class".into()));
    }
    let &[1, c, h, w] = tape.shape(logits) else {
        return Err(shape_err!("convex_loss needs [1,C,H,W] logits, got {:?}", tape.shape(logits)));
    };
    if gt.width != w || gt.height != h {
        return Err(shape_err!("convex_loss: labels {}x{} vs logits {w}x{h}", gt.width, gt.height));
    }
    if let Some(bad) = cfg.classes.iter().find(|&&k| k >= c) {
        return Err(Error::InvalidArgument(format!("convex class {bad} out of range for {c} classes")));
    }
    let pred = argmax_labels(tape.value(logits))?;
    let set = convex_targets(&pred, w, h, instances, cfg)?;
    convex_loss_from_targets(tape, logits, gt, &set, cfg.label)
}

/// [`convex_loss`] with precomputed targets.
pub fn convex_loss_from_targets(
    tape: &mut Tape,
    logits: Var,
    gt: &LabelMap,
    set: &ConvexTargetSet,
    label: LabelMode,
) -> Result<Var> {
    if set.classes.is_empty() {
        return Err(Error::InvalidArgument("convex regularization needs at least one class".into()));
    }
    let mut terms = Vec::new();
    for (&class, mask) in set.classes.iter().zip(&set.masks) {
        if mask.bits().len() != gt.labels.len() {
            return Err(shape_err!("convex target extent differs from the label map"));
        }
        let targets: Vec<Option<usize>> = mask
            .bits()
            .iter()
            .zip(&gt.labels)
            .map(|(&on, &l)| match (on, label) {
                (false, _) => None,
                (true, LabelMode::Class) => Some(class),
                (true, LabelMode::GroundTruth) => (l != IGNORE_LABEL).then_some(l as usize),
            })
            .collect();
        if targets.iter().any(Option::is_some) {
            terms.push(tape.cross_entropy(logits, &targets)?);
        }
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let total = tape.add_all(&terms)?;
    Ok(tape.scale(total, 1.0 / set.classes.len() as f64))
}
