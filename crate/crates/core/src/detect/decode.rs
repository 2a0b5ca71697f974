use super::anchors::{decode_box, decode_head_box, Anchor};
use crate::geometry::{quad_iou, GeneralizedBBox, Quad, Rect};
use crate::tensor::{softmax_rows, Tensor};
use serde::Serialize;

/// A decoded region proposal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub rect: Rect,
    /// Objectness logit.
    pub score: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalConfig {
    pub pre_nms_top_n: usize,
    pub post_nms_top_n: usize,
    pub nms_iou: f64,
    /// Proposals narrower or shorter than this many pixels are dropped.
    pub min_size: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms_top_n: 200,
            post_nms_top_n: 48,
            nms_iou: 0.7,
            min_size: 2.0,
        }
    }
}

/// Greedy non-maximum suppression: visits items by descending score (ties by index) and
/// drops any item whose IoU with an already kept item exceeds `iou_threshold`. Returns
/// kept indices in visiting order.
fn greedy_nms(scores: &[f64], iou_threshold: f64, iou: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(k, i) <= iou_threshold) {
            keep.push(i);
        }
    }
    keep
}

/// NMS over axis-aligned rectangles with continuous IoU.
pub fn nms_rects(rects: &[Rect], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    greedy_nms(scores, iou_threshold, |a, b| rects[a].iou(&rects[b]))
}

/// NMS over quadrilaterals with [`quad_iou`] at `resolution` cells per pixel.
pub fn nms(quads: &[Quad], scores: &[f64], iou_threshold: f64, resolution: f64) -> Vec<usize> {
    greedy_nms(scores, iou_threshold, |a, b| quad_iou(&quads[a], &quads[b], resolution))
}

/// Applies proposal deltas (`[A,4]`) to the anchors, clips to the image, drops tiny
/// boxes, keeps the `pre_nms_top_n` best logits and returns the NMS survivors.
pub fn select_proposals(
    objectness: &[f64],
    deltas: &[f64],
    anchors: &[Anchor],
    image_w: usize,
    image_h: usize,
    cfg: ProposalConfig,
) -> Vec<Proposal> {
    let mut cands: Vec<Proposal> = anchors
        .iter()
        .enumerate()
        .map(|(i, a)| Proposal {
            rect: decode_box(&a.rect(), &deltas[i * 4..i * 4 + 4]).clamped(image_w as f64, image_h as f64),
            score: objectness[i],
        })
        .filter(|p| p.rect.width() >= cfg.min_size && p.rect.height() >= cfg.min_size && p.score.is_finite())
        .collect();
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands.truncate(cfg.pre_nms_top_n);
    let rects: Vec<Rect> = cands.iter().map(|p| p.rect).collect();
    let scores: Vec<f64> = cands.iter().map(|p| p.score).collect();
    let mut keep = nms_rects(&rects, &scores, cfg.nms_iou);
    keep.truncate(cfg.post_nms_top_n);
    keep.into_iter().map(|i| cands[i]).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeConfig {
    /// Minimum score for a detection to enter NMS.
    pub score_threshold: f64,
    pub iou_threshold: f64,
    /// Raster cells per pixel used by [`quad_iou`].
    pub iou_resolution: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            score_threshold: 0.05,
            iou_threshold: 0.5,
            iou_resolution: 1.0,
        }
    }
}

/// Turns head outputs into generalized boxes.
///
/// `cls_logits` is `[R,C]` and `deltas` is `[R,8]` for `R` regions. Regions whose most
/// likely class is background (index 0), whose score falls below the threshold, or whose
/// quadrilateral is crossed or degenerate are dropped; the rest go through per-class NMS.
/// The result is sorted by descending score.
pub fn decode_detections(
    cls_logits: &Tensor,
    deltas: &Tensor,
    regions: &[Rect],
    cfg: DecodeConfig,
) -> Vec<GeneralizedBBox> {
    let r = regions.len();
    assert_eq!(cls_logits.shape()[0], r, "one logit row per region");
    assert_eq!(deltas.shape(), [r, 8], "eight deltas per region");
    let classes = cls_logits.shape()[1];
    let probs = softmax_rows(cls_logits.data(), classes);
    let mut boxes: Vec<GeneralizedBBox> = Vec::new();
    for (i, region) in regions.iter().enumerate() {
        let p = probs[i * classes..(i + 1) * classes].to_vec();
        let d = &deltas.data()[i * 8..i * 8 + 8];
        let tlbr = decode_head_box(region, &d[..4]);
        let trbl = decode_head_box(region, &d[4..]);
        let Ok(g) = GeneralizedBBox::new(tlbr, trbl, p) else { continue };
        if g.class() == 0 || g.score < cfg.score_threshold || !g.corners().is_valid() {
            continue;
        }
        boxes.push(g);
    }
    let mut out = Vec::new();
    for c in 1..classes {
        let members: Vec<&GeneralizedBBox> = boxes.iter().filter(|g| g.class() == c).collect();
        let quads: Vec<Quad> = members.iter().map(|g| g.corners()).collect();
        let scores: Vec<f64> = members.iter().map(|g| g.score).collect();
        for k in nms(&quads, &scores, cfg.iou_threshold, cfg.iou_resolution) {
            out.push(members[k].clone());
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

#[derive(Serialize)]
struct DetectionRecord {
    corners: [f64; 8],
    class: usize,
    score: f64,
}

#[derive(Serialize)]
struct ImageRecord<'a> {
    image_id: &'a str,
    detections: Vec<DetectionRecord>,
}

/// One JSON-lines record: image id plus corners (TL, TR, BR, BL), class and score of
/// every detection. No trailing newline.
pub fn detections_to_jsonl(image_id: &str, detections: &[GeneralizedBBox]) -> String {
    let rec = ImageRecord {
        image_id,
        detections: detections
            .iter()
            .map(|g| DetectionRecord {
                corners: g.corners().to_array(),
                class: g.class(),
                score: g.score,
            })
            .collect(),
    };
    serde_json::to_string(&rec).expect("detection records serialize")
}
