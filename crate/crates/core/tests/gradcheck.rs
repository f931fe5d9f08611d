mod common;

use common::{gradient_suite, TOLERANCE};

#[test]
fn backward_matches_central_differences() {
    for (name, n, worst) in gradient_suite(100, 17) {
        assert!(worst < TOLERANCE, "{name}: worst relative error {worst:e} over {n} instances");
    }
}
