//! Absolute noise powers and absorption pinned from a verified build.

use spin_noise::spectra::ExperimentConfig;
use spin_noise::sweep::{noise_map, SweepPlan};

const DETUNINGS: [f64; 5] = [-5e9, -1e9, 0.0, 1e9, 6.8e9];

fn check(config: ExperimentConfig, integrated: [f64; 5], kappa: [f64; 5]) {
    let mut plan = SweepPlan::new(config);
    plan.detuning = DETUNINGS.to_vec();
    let map = noise_map(&plan).unwrap();
    for k in 0..5 {
        let (p, q) = (map.integrated[k], map.absorption[k]);
        assert!((p - integrated[k]).abs() <= 1e-6 * integrated[k].abs(), "power at {}: {p:e}", DETUNINGS[k]);
        assert!((q - kappa[k]).abs() <= 1e-6 * kappa[k], "kappa at {}: {q:e}", DETUNINGS[k]);
    }
}

#[test]
fn cell_a_at_1_8_w_per_cm2() {
    check(
        ExperimentConfig::cell_a(1.8e4),
        [1.550032376521e-13, 1.385311946973e-12, 2.936513893164e-15, 2.199333664316e-12, 1.158727964637e-13],
        [2.614141774988e-8, 7.716451114555e-7, 9.446809102168e-6, 5.859962105244e-7, 1.235089978186e-6],
    );
}

#[test]
fn cell_b_at_7_8_w_per_cm2() {
    check(
        ExperimentConfig::cell_b(7.8e4),
        [3.121084318404e-12, 2.570235557063e-11, 3.353218097430e-11, 2.186327009957e-11, 5.050849392755e-12],
        [9.671223594397e-9, 1.301159362110e-7, 7.818229643580e-7, 1.071267491553e-6, 1.256099977514e-7],
    );
}
