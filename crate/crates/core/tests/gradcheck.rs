mod support;

use support::gradcheck::{full_suite, TOL};

#[test]
fn every_primitive_and_perceiver_kind() {
    let mut failed = Vec::new();
    for (name, worst) in full_suite() {
        eprintln!("{name:<16} max rel err {worst:.2e}");
        if !(worst <= TOL) {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "gradient checks failed: {failed:?}");
}
