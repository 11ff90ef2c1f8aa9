mod support;

use support::gradients::{CASES, TOLERANCE};

#[test]
fn every_case_passes_on_twenty_seeds() {
    for (name, case) in CASES {
        for seed in 0..20 {
            let r = case(seed).unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            assert!(
                r.max_relative_error < TOLERANCE,
                "{name} seed {seed}: relative error {:.3e} at {}",
                r.max_relative_error,
                r.worst
            );
        }
    }
}
