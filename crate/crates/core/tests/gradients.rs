//! Finite-difference checks for every differentiable op and the composed networks.

use kiprn::gradcheck::suite;

#[test]
fn every_op_matches_central_differences() {
    let results = suite::run(20, 1000).unwrap();
    for (name, r) in &results {
        println!("{name:24} max_rel_err={:.3e} checked={} skipped={}", r.max_rel_err, r.checked, r.skipped);
    }
    for (name, r) in &results {
        assert!(r.checked > 0, "{name}: nothing checked");
        assert!(r.max_rel_err < 1e-6, "{name}: {:.3e}", r.max_rel_err);
    }
}
