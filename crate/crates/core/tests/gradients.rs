mod common;

use common::grads;

#[test]
fn every_operation_matches_central_differences() {
    let mut failures = Vec::new();
    for r in grads::suite() {
        println!("{:<24} {:>2} instances, worst relative error {:.2e}", r.op, r.instances, r.worst);
        if !r.pass() {
            failures.push(format!("{} ({:.2e} >= {:.0e})", r.op, r.worst, r.limit));
        }
    }
    assert!(failures.is_empty(), "gradient mismatches: {failures:?}");
}
