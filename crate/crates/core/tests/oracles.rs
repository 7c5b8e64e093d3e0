mod common;

use common::{oracle_suite, ORACLE_TOLERANCE};
use vqknet::eval::tiou;

#[test]
fn library_matches_brute_force_on_random_instances() {
    for r in oracle_suite(150) {
        assert!(r.instances >= 100);
        assert!(r.max_error < ORACLE_TOLERANCE, "{r:?}");
    }
}

#[test]
fn tiou_examples() {
    assert!((tiou((0.0, 10.0), (5.0, 15.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(tiou((2.0, 3.0), (2.0, 3.0)).unwrap(), 1.0);
    assert_eq!(tiou((0.0, 1.0), (4.0, 5.0)).unwrap(), 0.0);
    assert!(tiou((3.0, 3.0), (0.0, 1.0)).is_err());
}
