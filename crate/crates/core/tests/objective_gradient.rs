#[path = "support/gradcheck.rs"]
mod gradcheck;

use oodconcepts_core::detectors::DetectorKind;
use oodconcepts_core::learn::Preset;

const MINI_SEED: u64 = 3;

#[test]
fn every_preset_and_detector_matches_finite_differences() {
    for kind in DetectorKind::ALL {
        for preset in Preset::ALL {
            let err = gradcheck::check(kind, preset, MINI_SEED);
            assert!(err < 1e-3, "{kind} {}: relative error {err:e}", preset.name());
        }
    }
}

// A step of 1e-4 can straddle a ReLU kink in g on some draws, so the sweep
// uses a smaller step.
#[test]
fn gradient_matches_across_random_draws() {
    for seed in 0..40 {
        for kind in DetectorKind::ALL {
            for preset in Preset::ALL {
                let err = gradcheck::check_with(kind, preset, seed, 1e-5, |_| {});
                assert!(err < 1e-3, "{kind} {} seed {seed}: relative error {err:e}", preset.name());
            }
        }
    }
}

#[test]
fn absolute_ridge_gradient_matches() {
    use oodconcepts_core::metrics::Ridge;
    for kind in DetectorKind::ALL {
        let err = gradcheck::check_with(kind, Preset::SepOnly, MINI_SEED, 1e-5, |s| s.ridge = Ridge::Absolute(1e-3));
        assert!(err < 1e-3, "{kind}: relative error {err:e}");
    }
}
