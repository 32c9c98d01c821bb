use headlab::selfcheck::{attention_row_check, gate_gradient_check, gate_pruning_check};
use proptest::prelude::*;

#[test]
fn gate_gradients_over_twenty_seeds() {
    for seed in 0..20 {
        let r = gate_gradient_check(seed).unwrap();
        assert_eq!(r.analytic.len(), 8);
        assert!(r.fd < 1e-3, "seed {seed}: finite-difference rel err {}", r.fd);
        assert!(r.identity < 1e-5, "seed {seed}: identity rel err {}", r.identity);
    }
}

#[test]
fn pruning_by_gate_equals_zeroed_projection() {
    assert!(gate_pruning_check(11, 100).unwrap() <= 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn attention_rows_are_distributions(seed in any::<u64>()) {
        prop_assert!(attention_row_check(seed).unwrap() <= 1e-6);
    }

    #[test]
    fn gate_pruning_equivalence_any_seed(seed in any::<u64>()) {
        prop_assert!(gate_pruning_check(seed, 3).unwrap() <= 1e-6);
    }
}
