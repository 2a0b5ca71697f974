//! Anchor-based proposals and the two-rectangle detection head: target assignment,
//! losses, decoding and non-maximum suppression.
//!
//! Class index 0 is background throughout; the remaining indices share the semantic
//! label space so that decoded boxes can be fused into a label map directly.

mod anchors;
mod decode;
mod loss;

pub use anchors::{
    decode_box, decode_head_box, encode_box, encode_head_box, generate_anchors, match_anchors, sample_anchors, Anchor, AnchorLabel,
    DELTA_CLAMP, HEAD_DELTA_SCALE,
};
pub use decode::{
    decode_detections, detections_to_jsonl, nms, nms_rects, select_proposals, DecodeConfig,
    Proposal, ProposalConfig,
};
pub use loss::{assign_roi_targets, detection_loss, proposal_loss, DetectionTarget, GtBox, RoiSampling};
