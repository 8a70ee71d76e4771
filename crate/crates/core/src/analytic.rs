//! Closed-form single-subcarrier results.
//!
//! With one subcarrier and BS 1 at the origin, the channel power near zero
//! has a linear CDF, `F(y) ≈ ψ x² y`. That gives a closed-form ε-outage
//! capacity `log₂(1 + ψ′/x²)` and the location where a backed-off rate
//! `k·C(x̂)` starts to exceed `C(x)`.

use serde::Serialize;
use std::f64::consts::PI;

use crate::config::SystemConfig;
use crate::error::{Error, Result};

/// Largest outage level for which the linear tail is used.
pub const MAX_TAIL_EPS: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailConstants {
    /// `F(y; x) ≈ ψ x² y`, m⁻² per unit power.
    pub psi: f64,
    /// `P_tx ε / (σ_n² ψ)`, m².
    pub psi_prime: f64,
}

impl TailConstants {
    pub fn new(eps: f64, cfg: &SystemConfig) -> Result<Self> {
        check_eps(eps)?;
        let psi = psi(cfg);
        Ok(TailConstants {
            psi,
            psi_prime: cfg.tx_power * eps / (cfg.noise_power * psi),
        })
    }
}

/// `(16π²/λ²) ρ exp(Δτ/ρ − ρ e^{Δτ/ρ})`: the Rician power density at zero
/// times `x²`.
pub fn psi(cfg: &SystemConfig) -> f64 {
    let lambda = cfg.wavelength();
    let rho = cfg.pdp_rho;
    let r = cfg.excess_delay / rho;
    16.0 * PI * PI / (lambda * lambda) * rho * (r - rho * r.exp()).exp()
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps <= MAX_TAIL_EPS {
        Ok(())
    } else {
        Err(Error::InvalidDomain(format!(
            "outage level {eps} outside (0, {MAX_TAIL_EPS}] where the linear tail holds"
        )))
    }
}

fn check_x(x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidDomain(format!(
            "location {x} m must be positive (BS at the origin)"
        )))
    }
}

/// Linear tail of the channel power CDF, `P(|h|² ≤ y) ≈ ψ x² y`.
pub fn tail_cdf(y: f64, x: f64, cfg: &SystemConfig) -> Result<f64> {
    check_x(x)?;
    if !(y >= 0.0) {
        return Err(Error::InvalidDomain(format!("power {y} must be non-negative")));
    }
    Ok(y * x * x * psi(cfg))
}

/// `log₂(1 + ψ′/x²)`.
pub fn analytic_outage_capacity(eps: f64, x: f64, cfg: &SystemConfig) -> Result<f64> {
    check_x(x)?;
    let t = TailConstants::new(eps, cfg)?;
    Ok((t.psi_prime / (x * x)).ln_1p() / std::f64::consts::LN_2)
}

fn check_k(k: f64) -> Result<()> {
    if k > 0.0 && k <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDomain(format!("backoff factor {k} not in (0, 1]")))
    }
}

/// Distance `Δx` from `x` towards the BS to the outage-region edge, from
/// `k log₂(1 + ψ′/x̂²) = log₂(1 + ψ′/x²)` solved for `x̂ = x − Δx`.
pub fn edge_exact(x: f64, k: f64, eps: f64, cfg: &SystemConfig) -> Result<f64> {
    check_x(x)?;
    check_k(k)?;
    let t = TailConstants::new(eps, cfg)?;
    let u = t.psi_prime / (x * x);
    let denom = ((u.ln_1p()) / k).exp_m1();
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::InvalidDomain(format!(
            "edge equation has no positive solution for x = {x}, k = {k}"
        )));
    }
    Ok(x - (t.psi_prime / denom).sqrt())
}

/// Low-SNR form of [`edge_exact`]: `x (1 − √k)`.
pub fn edge_approx(x: f64, k: f64) -> Result<f64> {
    check_k(k)?;
    Ok(x * (1.0 - k.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::rician_params;

    fn cfg() -> SystemConfig {
        SystemConfig::default().single_subcarrier()
    }

    #[test]
    fn tail_constants_table_values() {
        let t = TailConstants::new(1e-3, &cfg()).unwrap();
        // 16π²/λ² · 2e^{-2} with λ = c / 2.1 GHz, to first order in Δτ/ρ
        assert!((t.psi / 2097.0 - 1.0).abs() < 1e-3, "{}", t.psi);
        assert!((t.psi_prime / 47.69 - 1.0).abs() < 1e-3, "{}", t.psi_prime);
    }

    #[test]
    fn tail_matches_rician_density_at_zero() {
        let c = cfg();
        for x in [10.0, 300.0, 777.0] {
            let p = rician_params(x, 0, &c).unwrap();
            let y = 1e-14;
            let want = y / p.avg_power * (1.0 + p.k_factor) * (-p.k_factor).exp();
            let got = tail_cdf(y, x, &c).unwrap();
            assert!(((got - want) / want).abs() < 1e-12);
        }
    }

    #[test]
    fn tail_scaling_and_domain() {
        let c = cfg();
        assert_eq!(tail_cdf(0.0, 300.0, &c).unwrap(), 0.0);
        let a = tail_cdf(1e-15, 150.0, &c).unwrap();
        let b = tail_cdf(1e-15, 300.0, &c).unwrap();
        assert!((b / a - 4.0).abs() < 1e-12);
        assert!(matches!(tail_cdf(1e-15, 0.0, &c), Err(Error::InvalidDomain(_))));
        assert!(matches!(tail_cdf(-1.0, 10.0, &c), Err(Error::InvalidDomain(_))));
    }

    #[test]
    fn capacity_limits_and_monotonicity() {
        let c = cfg();
        assert!(analytic_outage_capacity(1e-3, 1e9, &c).unwrap() < 1e-12);
        let a = analytic_outage_capacity(1e-3, 300.0, &c).unwrap();
        let b = analytic_outage_capacity(2e-3, 300.0, &c).unwrap();
        assert!(b > a);
        assert!(analytic_outage_capacity(0.5, 300.0, &c).is_err());
    }

    #[test]
    fn edges() {
        let c = cfg();
        assert!(edge_exact(300.0, 1.0, 1e-3, &c).unwrap().abs() < 1e-9 * 300.0);
        assert_eq!(edge_approx(300.0, 0.25).unwrap(), 150.0);
        assert_eq!(edge_approx(300.0, 1.0).unwrap(), 0.0);
        assert!(edge_approx(300.0, 0.0).is_err());
    }

    #[test]
    fn exact_edge_substitutes_back() {
        let c = cfg();
        for (x, k) in [(300.0, 0.25), (100.0, 0.5), (650.0, 0.1)] {
            let dx = edge_exact(x, k, 1e-3, &c).unwrap();
            let lhs = k * analytic_outage_capacity(1e-3, x - dx, &c).unwrap();
            let rhs = analytic_outage_capacity(1e-3, x, &c).unwrap();
            assert!(((lhs - rhs) / rhs).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_edge_approaches_linear_form_as_power_drops() {
        let mut c = cfg();
        let approx = edge_approx(300.0, 0.25).unwrap();
        let mut last = f64::INFINITY;
        for p in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            c.set_tx_power_watt(p);
            let gap = (edge_exact(300.0, 0.25, 1e-3, &c).unwrap() - approx).abs();
            assert!(gap < last);
            last = gap;
        }
        assert!(last / 300.0 < 1e-6);
    }
}
