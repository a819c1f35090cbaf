mod common;

use common::{grad_instance, max_gradient_rel_error};

#[test]
fn bptt_gradients_match_finite_differences() {
    for seed in 0..20 {
        let inst = grad_instance(seed);
        let err = max_gradient_rel_error(&inst);
        assert!(err < 1e-4, "instance {seed}: rel. error {err:.3e}");
    }
}
