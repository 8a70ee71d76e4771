//! Standard normal tail function.
//!
//! `q_function(z) = P(Z > z)`. For `|z| <= 8` it is evaluated through
//! `libm::erfc`; beyond that the Mills ratio is evaluated by its continued
//! fraction so the far tail keeps full relative accuracy down to the
//! underflow limit near `z = 38.4`.

use statrs::function::erf::erfc_inv;
use std::f64::consts::{FRAC_1_SQRT_2, SQRT_2};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const ERFC_LIMIT: f64 = 8.0;
const CF_DEPTH: usize = 80;

pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn upper_tail_asymptotic(z: f64) -> f64 {
    // R(z) = 1 / (z + 1/(z + 2/(z + 3/(z + ...)))), evaluated bottom-up.
    let mut t = z;
    for k in (1..=CF_DEPTH).rev() {
        t = z + k as f64 / t;
    }
    normal_pdf(z) / t
}

pub fn q_function(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    if z > ERFC_LIMIT {
        upper_tail_asymptotic(z)
    } else if z < -ERFC_LIMIT {
        1.0 - upper_tail_asymptotic(-z)
    } else {
        0.5 * libm::erfc(z * FRAC_1_SQRT_2)
    }
}

pub fn normal_cdf(z: f64) -> f64 {
    q_function(-z)
}

/// Inverse of the tail function: the `z` with `Q(z) = p`, for `p` in (0, 1).
pub fn q_inverse(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "q_inverse needs p in (0, 1), got {p}");
    let mut z = SQRT_2 * erfc_inv(2.0 * p);
    // Newton on the accurate tail function
    for _ in 0..2 {
        let pdf = normal_pdf(z);
        if pdf == 0.0 {
            break;
        }
        z += (q_function(z) - p) / pdf;
    }
    z
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    // Reference values from 40-digit arithmetic.
    const REFERENCE: &[(f64, f64)] = &[
        (0.0, 0.5),
        (0.5, 0.308_537_538_725_986_896_36),
        (1.0, 0.158_655_253_931_457_051_41),
        (2.0, 0.022_750_131_948_179_207_2),
        (3.0, 0.001_349_898_031_630_094_526_7),
        (5.0, 2.866_515_718_791_939_116_7e-7),
        (7.9, 1.394_517_146_659_264_278_1e-15),
        (8.0, 6.220_960_574_271_784_123_5e-16),
        (8.5, 9.479_534_822_203_318_354_2e-18),
        (10.0, 7.619_853_024_160_526_066e-24),
        (15.0, 3.670_966_199_312_750_885_8e-51),
        (20.0, 2.753_624_118_606_233_695_1e-89),
        (30.0, 4.906_713_927_148_187_059_5e-198),
        (37.0, 5.725_571_222_524_576_822_7e-300),
    ];

    #[test]
    fn matches_high_precision_reference() {
        for &(z, q) in REFERENCE {
            let got = q_function(z);
            if z <= 8.0 {
                assert!((got - q).abs() <= 1e-12, "Q({z}) = {got}, want {q}");
            }
            assert!(((got - q) / q).abs() < 1e-12, "Q({z}) = {got}, want {q}");
        }
    }

    #[test]
    fn symmetry_and_continuity_at_switch() {
        for &(z, q) in REFERENCE.iter().take(8) {
            assert!((q_function(-z) - (1.0 - q)).abs() < 1e-15);
        }
        let below = q_function(ERFC_LIMIT - 1e-12);
        let above = q_function(ERFC_LIMIT + 1e-12);
        assert!(((below - above) / below).abs() < 1e-10);
    }

    #[test]
    fn inverse_round_trips() {
        for &(p, z) in &[
            (0.025, 1.959_963_984_540_054_211_8),
            (1e-3, 3.090_232_306_167_813_535_4),
            (8e-6, 4.314_451_021_808_665_030_3),
            (1e-12, 7.034_483_825_301_131_932_6),
        ] {
            assert!((q_inverse(p) - z).abs() < 1e-13 * z, "q_inverse({p})");
        }
        assert!(q_inverse(0.5).abs() < 1e-15);
    }
}
