//! Loss and suppression fixtures shared by the detection tests and the acceptance suite.

use facade_core::detect::{detection_loss, nms, nms_rects, DetectionTarget};
use facade_core::geometry::{Quad, Rect};
use facade_core::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{nms_oracle, rect};

pub fn region_loss(logits: &[Vec<f64>], deltas: &[[f64; 8]], targets: &[DetectionTarget]) -> f64 {
    let (k, c) = (logits.len(), logits[0].len());
    let mut tape = Tape::new();
    let l = tape.leaf(Tensor::from_vec(&[k, c], logits.concat()), true);
    let d = tape.leaf(Tensor::from_vec(&[k, 8], deltas.concat()), true);
    let loss = detection_loss(&mut tape, l, d, targets).unwrap();
    tape.value(loss).item().unwrap()
}

/// Two regions, uniform scores over three classes.
///
/// Region 1: class 1, TL-BR dx off by 0.5 → smooth-L1 0.125.
/// Region 2: class 2, TR-BL dw off by 2.0 → 1.5, TL-BR dy off by -0.3 → 0.045.
/// Loss = ((ln 3 + 0.125) + (ln 3 + 1.545)) / 2 = ln 3 + 0.835.
pub fn two_region_fixture() -> (f64, f64) {
    let zero = [[0.0; 4]; 2];
    let targets = vec![
        DetectionTarget {
            cls_index: 1,
            deltas: Some(zero),
        },
        DetectionTarget {
            cls_index: 2,
            deltas: Some([[0.1, 0.2, 0.3, 0.4], [0.0, 0.0, -0.5, 0.0]]),
        },
    ];
    let logits = vec![vec![0.0; 3], vec![0.7; 3]];
    let deltas = [
        [0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.1, 0.2 - 0.3, 0.3, 0.4, 0.0, 0.0, 1.5, 0.0],
    ];
    (region_loss(&logits, &deltas, &targets), 3f64.ln() + 0.835)
}

fn random_rects(rng: &mut impl Rng, n: usize) -> Vec<Rect> {
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0));
            rect(x, y, x + rng.gen_range(1.0..8.0), y + rng.gen_range(1.0..8.0))
        })
        .collect()
}

/// Random fixtures on which library NMS disagrees with the quadratic oracle.
pub fn nms_mismatches(cases: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    (0..cases)
        .filter(|i| {
            let n = rng.gen_range(1..25);
            let rects = random_rects(&mut rng, n);
            // Coarse scores produce ties, which must resolve by index.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
            let thr = [0.3, 0.5, 0.7][i % 3];
            let rect_bad = nms_rects(&rects, &scores, thr) != nms_oracle(&scores, thr, |a, b| rects[a].iou(&rects[b]));
            let quads: Vec<Quad> = rects.iter().map(Quad::from_rect).collect();
            let res = 4.0;
            let quad_bad = nms(&quads, &scores, thr, res)
                != nms_oracle(&scores, thr, |a, b| facade_core::geometry::quad_iou(&quads[a], &quads[b], res));
            rect_bad || quad_bad
        })
        .count()
}
