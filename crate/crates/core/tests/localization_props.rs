use std::f64::consts::TAU;

use num_complex::Complex64;
use proptest::prelude::*;

use locrel::channel::path_coefficients;
use locrel::localization::{fisher_eta, CrlbModel, PhasePair};
use locrel::SystemConfig;

fn model() -> CrlbModel {
    CrlbModel::new(&SystemConfig::default()).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn variance_positive_and_finite(x in 2.0..998.0f64, p1 in 0.0..TAU, p2 in 0.0..TAU) {
        let v = model().crlb(x, PhasePair::new(p1, p2)).unwrap().variance;
        prop_assert!(v.is_finite() && v > 0.0);
    }

    #[test]
    fn periodic_in_phase(x in 2.0..998.0f64, p1 in 0.0..TAU, p2 in 0.0..TAU, n in -3i32..3) {
        let m = model();
        let a = m.crlb(x, PhasePair::new(p1, p2)).unwrap().variance;
        let b = m.crlb(x, PhasePair::new(p1 + n as f64 * TAU, p2 - n as f64 * TAU)).unwrap().variance;
        prop_assert!(rel(b, a) < 1e-9);
    }

    #[test]
    fn mirror_symmetric(x in 2.0..998.0f64, p1 in 0.0..TAU, p2 in 0.0..TAU) {
        // BSs at 0 and 1000 m
        let m = model();
        let a = m.crlb(x, PhasePair::new(p1, p2)).unwrap().variance;
        let b = m.crlb(1000.0 - x, PhasePair::new(p2, p1)).unwrap().variance;
        prop_assert!(rel(b, a) < 1e-9);
    }

    #[test]
    fn scatter_magnitude_drops_out(
        x in 2.0..998.0f64,
        p1 in 0.0..TAU,
        p2 in 0.0..TAU,
        lm1 in -12.0..2.0f64,
        lm2 in -12.0..2.0f64,
    ) {
        let m = model();
        let unit = m
            .crlb_with_scatter(x, [Complex64::from_polar(1.0, p1), Complex64::from_polar(1.0, p2)])
            .unwrap()
            .variance;
        let scaled = m
            .crlb_with_scatter(
                x,
                [Complex64::from_polar(10f64.powf(lm1), p1), Complex64::from_polar(10f64.powf(lm2), p2)],
            )
            .unwrap()
            .variance;
        prop_assert!(rel(scaled, unit) < 1e-8);
    }

    #[test]
    fn variance_scales_inversely_with_power(x in 2.0..998.0f64, p1 in 0.0..TAU, p2 in 0.0..TAU, g in 0.01..100.0f64) {
        let cfg = SystemConfig::default();
        let mut louder = cfg.clone();
        louder.set_tx_power_watt(cfg.tx_power * g);
        let pair = PhasePair::new(p1, p2);
        let v1 = CrlbModel::new(&cfg).unwrap().crlb(x, pair).unwrap().variance;
        let v2 = CrlbModel::new(&louder).unwrap().crlb(x, pair).unwrap().variance;
        prop_assert!(rel(v2 * g, v1) < 1e-8);
    }

    #[test]
    fn fisher_matrix_is_psd(x in 2.0..998.0f64, bs in 0usize..2, phase in 0.0..TAU, lm in -9.0..-5.0f64) {
        let cfg = SystemConfig::default();
        let coeffs = path_coefficients(x, bs, Complex64::from_polar(10f64.powf(lm), phase), &cfg).unwrap();
        let j = fisher_eta(x, bs, &coeffs, &cfg).unwrap();
        prop_assert!(j.is_psd(1e-9));
        prop_assert!((j.matrix - j.matrix.transpose()).abs().max() <= 1e-12 * j.matrix.abs().max());
    }
}

#[test]
fn averaged_variance_smallest_between_stations() {
    let m = model();
    let mean = |x: f64| m.variance_summary(x, 16).unwrap().mean;
    assert!(mean(500.0) < mean(50.0));
    assert!(mean(500.0) < mean(950.0));
}
