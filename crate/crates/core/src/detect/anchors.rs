use crate::geometry::Rect;
use rand::seq::index::sample;
use rand::Rng;

/// Upper bound on log-scale deltas when decoding, keeping `exp` finite.
pub const DELTA_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Multipliers applied to region-head deltas `(dx, dy, dw, dh)` so that typical
/// residuals fall in the linear part of smooth-L1.
pub const HEAD_DELTA_SCALE: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Axis-aligned anchor box in image pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// One anchor per (cell, scale, ratio), ordered by row, column, scale, ratio. `ratio` is
/// height over width and preserves the area `scale²`.
pub fn generate_anchors(
    feat_h: usize,
    feat_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Vec<Anchor> {
    assert!(
        stride > 0.0 && scales.iter().chain(ratios).all(|&v| v > 0.0),
        "anchor strides, scales and ratios must be positive"
    );
    let mut out = Vec::with_capacity(feat_h * feat_w * scales.len() * ratios.len());
    for y in 0..feat_h {
        for x in 0..feat_w {
            for &s in scales {
                for &r in ratios {
                    out.push(Anchor {
                        cx: (x as f64 + 0.5) * stride,
                        cy: (y as f64 + 0.5) * stride,
                        w: s / r.sqrt(),
                        h: s * r.sqrt(),
                    });
                }
            }
        }
    }
    out
}

/// `(dx, dy, dw, dh)` taking `reference` to `target`; extents below one pixel are
/// treated as one pixel.
pub fn encode_box(reference: &Rect, target: &Rect) -> [f64; 4] {
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width().max(1.0), reference.height().max(1.0));
    let (tx, ty) = target.center();
    let (tw, th) = (target.width().max(1.0), target.height().max(1.0));
    [(tx - rx) / rw, (ty - ry) / rh, (tw / rw).ln(), (th / rh).ln()]
}

/// Inverse of [`encode_box`] with log-scale deltas clamped to [`DELTA_CLAMP`]. Zero
/// deltas return `reference` itself, bit for bit.
pub fn decode_box(reference: &Rect, d: &[f64]) -> Rect {
    if reference.width() >= 1.0 && reference.height() >= 1.0 && d.iter().all(|&v| v == 0.0) {
        return *reference;
    }
    let (rx, ry) = reference.center();
    let (rw, rh) = (reference.width().max(1.0), reference.height().max(1.0));
    let w = rw * d[2].min(DELTA_CLAMP).exp();
    let h = rh * d[3].min(DELTA_CLAMP).exp();
    let (cx, cy) = (rx + d[0] * rw, ry + d[1] * rh);
    Rect::from_center(cx, cy, w, h)
}

/// [`encode_box`] multiplied by [`HEAD_DELTA_SCALE`].
pub fn encode_head_box(reference: &Rect, target: &Rect) -> [f64; 4] {
    let d = encode_box(reference, target);
    std::array::from_fn(|i| d[i] * HEAD_DELTA_SCALE[i])
}

/// Inverse of [`encode_head_box`].
pub fn decode_head_box(reference: &Rect, d: &[f64]) -> Rect {
    let raw: [f64; 4] = std::array::from_fn(|i| d[i] / HEAD_DELTA_SCALE[i]);
    decode_box(reference, &raw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    /// Matched to the ground-truth box with this index.
    Positive(usize),
    Negative,
    Ignore,
}

/// Positive at IoU ≥ `pos_iou` or when an anchor is the best match of some ground truth,
/// negative below `neg_iou`, ignored otherwise.
pub fn match_anchors(anchors: &[Rect], gts: &[Rect], pos_iou: f64, neg_iou: f64) -> Vec<AnchorLabel> {
    let mut labels = Vec::with_capacity(anchors.len());
    let mut best_for_gt = vec![0.0f64; gts.len()];
    let ious: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| gts.iter().map(|g| a.iou(g)).collect())
        .collect();
    for row in &ious {
        for (j, &v) in row.iter().enumerate() {
            best_for_gt[j] = best_for_gt[j].max(v);
        }
    }
    for row in &ious {
        let best = row
            .iter()
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (j, &v)| match acc {
                Some((_, b)) if b >= v => acc,
                _ => Some((j, v)),
            });
        let label = match best {
            Some((j, v)) if v >= pos_iou => AnchorLabel::Positive(j),
            _ => {
                let forced = row
                    .iter()
                    .enumerate()
                    .find(|&(j, &v)| v > 0.0 && v == best_for_gt[j]);
                match (forced, best) {
                    (Some((j, _)), _) => AnchorLabel::Positive(j),
                    (None, Some((_, v))) if v >= neg_iou => AnchorLabel::Ignore,
                    _ => AnchorLabel::Negative,
                }
            }
        };
        labels.push(label);
    }
    labels
}

/// Keeps at most `batch / 2` positives and as many negatives (`batch / 2` negatives when
/// there is no positive); everything else becomes [`AnchorLabel::Ignore`].
pub fn sample_anchors(labels: &[AnchorLabel], batch: usize, rng: &mut impl Rng) -> Vec<AnchorLabel> {
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive(_)))
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let n_pos = pos.len().min(batch / 2);
    let n_neg = neg.len().min(if n_pos > 0 { n_pos } else { batch / 2 });
    let mut out = vec![AnchorLabel::Ignore; labels.len()];
    for k in sample(rng, pos.len(), n_pos) {
        out[pos[k]] = labels[pos[k]];
    }
    for k in sample(rng, neg.len(), n_neg) {
        out[neg[k]] = AnchorLabel::Negative;
    }
    out
}
