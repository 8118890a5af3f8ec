//! The invariant suite over every preset.

use hcgnet::arch::preset::Preset;
use hcgnet::context::TestHooks;
use hcgnet::verify::run_invariant_suite;

#[test]
fn all_presets_pass_at_three_seeds() {
    for p in Preset::ALL {
        for seed in 0..3 {
            let r = run_invariant_suite(&p.config(), seed, TestHooks::default()).unwrap();
            for c in &r.checks {
                assert!(c.passed, "{p} seed {seed}: {} ({})", c.name, c.detail);
            }
        }
    }
}

#[test]
fn bypassed_branch_softmax_is_detected_on_a1() {
    let hooks = TestHooks {
        bypass_branch_normalization: true,
    };
    let r = run_invariant_suite(&Preset::A1.config(), 0, hooks).unwrap();
    assert!(!r.passed());
    assert!(!r.check("branch-sum-to-one").unwrap().passed);
}
