mod common;

use common::{gradient_check, REL_FLOOR};

#[test]
fn full_model_gradients_match_finite_differences() {
    let r = gradient_check(2);
    eprintln!("{r:?}");
    assert!(r.checked > 1000, "checked only {}", r.checked);
    assert!(r.loss_gap < 1e-12, "tape loss differs from recomputed loss by {}", r.loss_gap);
    assert!(r.max_rel < 1e-5, "max relative error {} at {} (floor {REL_FLOOR})", r.max_rel, r.worst);
}
