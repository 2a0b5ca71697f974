//! Criteria decided by exact math, oracle agreement and fixed-size training runs.

use std::time::{Duration, Instant};

use facade_core::convex::{convex_loss, ConvexConfig, LabelMode, TargetMode};
use facade_core::geometry::{LabelMap, PixelMask};
use facade_core::tensor::{Tape, Tensor};
use facade_core::transconv::transform_kernel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::common::{self, detect, grads, training};
use crate::Outcome;

type Checks = Vec<(String, Outcome)>;

fn named(id: &str, name: &str, o: Outcome) -> (String, Outcome) {
    (format!("{id} {name}"), o)
}

fn table(id: &str, rows: Vec<(String, bool)>) -> (String, Outcome) {
    let n = rows.len();
    let failed: Vec<String> = rows.iter().filter(|r| !r.1).map(|r| r.0.clone()).collect();
    let detail = if failed.is_empty() {
        format!("{n} of {n} cases hold")
    } else {
        format!("{} of {n} cases hold; failing: {}", n - failed.len(), failed.join(", "))
    };
    (id.to_string(), Outcome::new(failed.is_empty(), detail))
}

pub fn gradients() -> Checks {
    let start = Instant::now();
    let results = grads::suite();
    let elapsed = start.elapsed();
    let mut out: Checks = results
        .iter()
        .map(|r| {
            named(
                "1",
                r.op,
                Outcome::new(
                    r.pass(),
                    format!("worst rel err {:.2e} over {} instances (limit {:.0e})", r.worst, r.instances, r.limit),
                ),
            )
        })
        .collect();
    let limit = Duration::from_secs(120);
    out.push(named("1", "runtime", Outcome::new(elapsed < limit, format!("{elapsed:.1?} (limit {limit:?})"))));
    out
}

fn bitwise(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn kernel_transforms() -> Checks {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let bases: Vec<Tensor> = [3, 5, 7].iter().map(|&s| common::random_tensor(&mut rng, &[2, 3, s, s])).collect();
    let identity = bases.iter().all(|b| bitwise(&transform_kernel(b, 0.0, false).unwrap(), b));
    let involution = bases.iter().all(|b| {
        let once = transform_kernel(b, 0.0, true).unwrap();
        bitwise(&transform_kernel(&once, 0.0, true).unwrap(), b) && !bitwise(&once, b)
    });
    let worst = bases
        .iter()
        .flat_map(|b| [false, true].map(|f| transform_kernel(b, 45.0, f).unwrap().max_abs_diff(&common::affine_resample(b, 45.0, f))))
        .fold(0.0, f64::max);
    vec![
        named("2", "identity transform is bitwise", Outcome::new(identity, "phi=0 without flip on 3x3, 5x5, 7x7")),
        named("2", "flip is a bitwise involution", Outcome::new(involution, "3x3, 5x5, 7x7")),
        named(
            "2",
            "phi=45 matches affine resampling",
            Outcome::new(worst < 1e-12, format!("max abs diff {worst:.2e} (limit 1e-12)")),
        ),
    ]
}

pub fn flip_equivariance() -> Checks {
    let worst = common::flip_equivariance_worst(50);
    vec![named(
        "3",
        "flip-closed groups commute with input flips",
        Outcome::new(worst < 1e-9, format!("max abs diff {worst:.2e} over 50 cases (limit 1e-9)")),
    )]
}

pub fn geometry() -> Checks {
    let hull = common::hull_mismatches(1000);
    let comps = common::component_mismatches(200);
    let nms = detect::nms_mismatches(300);
    vec![
        named("4", "convex hull", Outcome::new(hull == 0, format!("{hull} mismatches over 1000 sets of <= 12 points"))),
        named("4", "connected components", Outcome::new(comps == 0, format!("{comps} mismatches over 200 masks of 32x32"))),
        named("4", "NMS", Outcome::new(nms == 0, format!("{nms} mismatches over 300 box sets (rectangles and quads)"))),
    ]
}

fn single_pixel_loss(classes: usize, regularized: usize) -> (f64, f64) {
    let gt = LabelMap::filled(4, 4, 0);
    let inst = PixelMask::from_fn(4, 4, |x, y| x == 1 && y == 2);
    let cfg = ConvexConfig {
        classes: (1..=regularized).collect(),
        target: TargetMode::GroundTruth,
        label: LabelMode::Class,
    };
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[1, classes, 4, 4]), true);
    let l = convex_loss(&mut tape, logits, &gt, &[(1, &inst)], &cfg).unwrap();
    (tape.value(l).item().unwrap(), (classes as f64).ln() / regularized as f64)
}

pub fn loss_fixtures() -> Checks {
    let (got, want) = detect::two_region_fixture();
    let k2 = (got - want).abs();
    let pixel = [(6, 3), (6, 5), (3, 1)]
        .map(|(c, r)| {
            let (g, w) = single_pixel_loss(c, r);
            (g - w).abs()
        })
        .into_iter()
        .fold(0.0, f64::max);
    let mut worst = 0.0f64;
    let mut steps = 0;
    for alpha in [0.0, 1.0 / 9.0, 1.0] {
        let (w, n) = training::additivity_worst(alpha);
        worst = worst.max(w);
        steps += n;
    }
    vec![
        named("5", "detection loss K=2 fixture", Outcome::new(k2 < 1e-9, format!("|{got:.12} - (ln 3 + 0.835)| = {k2:.1e}"))),
        named(
            "5",
            "convex loss single pixel = ln C / |C_cls|",
            Outcome::new(pixel < 1e-9, format!("worst diff {pixel:.1e} over (C, |C_cls|) in (6,3) (6,5) (3,1)")),
        ),
        named(
            "5",
            "total loss additivity on every step",
            Outcome::new(worst < 1e-9, format!("worst {worst:.1e} over {steps} sample steps, alpha in 0, 1/9, 1")),
        ),
    ]
}

pub fn fusion() -> Checks {
    let violations = common::fusion_violations(300);
    vec![
        table("6 truth table", common::fusion_truth_table()),
        named(
            "6",
            "monotone in T over a 6-point sweep",
            Outcome::new(
                violations == 0,
                format!("{violations} of 300 scenes violate monotonicity or the per-pixel oracle at T in {:?}", common::MONOTONE_THRESHOLDS),
            ),
        ),
    ]
}

pub fn determinism() -> Checks {
    let data = training::scenes(16, 8);
    let cfg = training::small_config(2, 1.0 / 9.0);
    let a = training::metrics_json(&cfg, &data[..12], &data[12..]);
    let b = training::metrics_json(&cfg, &data[..12], &data[12..]);
    vec![named(
        "8",
        "train+eval twice gives identical metrics JSON",
        Outcome::new(a == b, format!("{} bytes, {}", a.len(), if a == b { "identical" } else { "different" })),
    )]
}

pub fn ingestion() -> Checks {
    vec![table("9 Labelme fixture", common::labelme_checks())]
}
